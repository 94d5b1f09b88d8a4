"""Range-adaptive scaled dot-product attention and its reverse-mode gradient.

The logit for query ``i`` and key ``j`` is ``q_i . k_j / sqrt(d) - alpha * dist_ij / r_max``.
Distances beyond ``r_max`` are penalised linearly, never clipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class EmptyKeysError(ValueError):
    """Raised when attention is requested over zero keys."""


@dataclass(frozen=True, eq=False)
class AttentionInputs:
    q: np.ndarray  # (N_q, d)
    k: np.ndarray  # (N_k, d)
    v: np.ndarray  # (N_k, d_v)
    p_q: Optional[np.ndarray] = None  # (N_q, 3)
    p_k: Optional[np.ndarray] = None  # (N_k, 3)
    dist: Optional[np.ndarray] = None  # (N_q, N_k), overrides positions

    def distances(self) -> np.ndarray:
        if self.dist is not None:
            return np.asarray(self.dist)
        if self.p_q is None or self.p_k is None:
            return np.zeros((len(self.q), len(self.k)), dtype=np.result_type(self.q))
        diff = np.asarray(self.p_q)[:, None, :] - np.asarray(self.p_k)[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))


def softmax(x, axis=-1, mask=None):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def attention_logits(inputs: AttentionInputs, alpha, r_max: float) -> np.ndarray:
    q, k = np.asarray(inputs.q), np.asarray(inputs.k)
    d = q.shape[-1]
    return q @ k.T / np.sqrt(d) - alpha * inputs.distances() / r_max


def attention_weights(inputs: AttentionInputs, alpha, r_max: float) -> np.ndarray:
    """Row-stochastic ``(N_q, N_k)`` weight matrix."""
    if len(inputs.k) == 0:
        raise EmptyKeysError("range-adaptive attention needs at least one key")
    if not r_max > 0:
        raise ValueError("r_max must be positive")
    return softmax(attention_logits(inputs, alpha, r_max), axis=-1)


def range_adaptive_attention(inputs: AttentionInputs, alpha, r_max: float) -> np.ndarray:
    return attention_weights(inputs, alpha, r_max) @ np.asarray(inputs.v)


def scaled_dot_product_attention(q, k, v) -> np.ndarray:
    """Plain softmax(q k^T / sqrt(d)) v, kept separate as a reference."""
    q, k = np.asarray(q), np.asarray(k)
    s = q @ k.T / np.sqrt(q.shape[-1])
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=1, keepdims=True)) @ np.asarray(v)


def attention_backward(inputs: AttentionInputs, alpha, r_max: float, grad_out) -> dict:
    """Gradients of ``sum(grad_out * output)`` with respect to q, k, v and alpha."""
    q, k, v = (np.asarray(a) for a in (inputs.q, inputs.k, inputs.v))
    dist = inputs.distances()
    w = attention_weights(inputs, alpha, r_max)
    g = np.asarray(grad_out)
    dw = g @ v.T
    ds = w * (dw - np.sum(dw * w, axis=1, keepdims=True))
    scale = 1.0 / np.sqrt(q.shape[-1])
    return {
        "q": ds @ k * scale,
        "k": ds.T @ q * scale,
        "v": w.T @ g,
        "alpha": -np.sum(ds * dist) / r_max,
    }


def finite_difference_gradcheck(f: Callable, grad: Callable, x, eps: float = 1e-5) -> float:
    """Max relative error between ``grad(x)`` and central differences of scalar ``f``.

    Relative error per coordinate is ``|g - g_fd| / max(1e-8, |g_fd|)``. Perturbations
    keep the dtype of ``x`` so extended precision inputs give tighter references.
    """
    x = np.array(x, copy=True)
    f0 = f(x)
    if not np.all(np.isfinite(f0)):
        raise ValueError("f(x) is not finite")
    g = np.asarray(grad(x), dtype=float).reshape(-1)
    flat = x.reshape(-1)
    fd = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        fd[i] = float((fp - fm) / (2 * eps))
    return float(np.max(np.abs(g - fd) / np.maximum(1e-8, np.abs(fd)))) if fd.size else 0.0


def attention_fd_gradients(inputs: AttentionInputs, alpha: float, r_max: float, grad_out,
                           eps: float = 1e-6) -> dict:
    """Central-difference gradients of ``sum(grad_out * attention)`` in extended precision.

    Each perturbation re-evaluates only the output rows it can change: a query
    row for ``q``, every row's softmax with one key swapped for ``k`` and ``v``.
    """
    ld = np.longdouble
    q, k, v = (np.asarray(getattr(inputs, n), dtype=ld) for n in ("q", "k", "v"))
    go = np.asarray(grad_out, dtype=ld)
    dist = np.asarray(inputs.distances(), dtype=ld)
    a, r, eps = ld(alpha), ld(r_max), ld(eps)
    scale = 1 / np.sqrt(ld(q.shape[1]))
    s = q @ k.T * scale - a * dist / r
    s_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - s_max)  # (N_q, N_k)
    z = e.sum(axis=1)
    num = e @ v  # (N_q, d_v)

    # q: perturbed logits of row i are s_i +/- eps k[:, c] * scale
    def q_rows(sign):
        sp = s[:, None, :] + sign * eps * scale * k.T[None, :, :]  # (N_q, d, N_k)
        ep = np.exp(sp - s_max[:, :, None])
        out = np.einsum("icj,jv->icv", ep, v) / ep.sum(axis=2)[:, :, None]
        return np.einsum("icv,iv->ic", out, go)

    fd_q = (q_rows(1) - q_rows(-1)) / (2 * eps)

    # k: column j of every row changes by +/- eps q[:, c] * scale
    def k_val(sign):
        ej_new = np.exp(s[:, None, :] + sign * eps * scale * q[:, :, None] - s_max[:, :, None])  # (N_q, d, N_k)
        de = ej_new - e[:, None, :]
        zp = z[:, None, None] + de
        out = (num[:, None, None, :] + de[..., None] * v[None, None, :, :]) / zp[..., None]
        return np.einsum("icjv,iv->jc", out, go)

    fd_k = (k_val(1) - k_val(-1)) / (2 * eps)

    # v: row j of the values shifts by +/- eps e_c
    w = e / z[:, None]
    base = np.sum(go * (num / z[:, None]))

    def v_val(sign):
        return base + sign * eps * np.einsum("ij,ic->jc", w, go)

    fd_v = (v_val(1) - v_val(-1)) / (2 * eps)

    def f_alpha(val):
        inp = AttentionInputs(q, k, v, dist=dist)
        return np.sum(go * range_adaptive_attention(inp, val, r))

    fd_alpha = (f_alpha(a + eps) - f_alpha(a - eps)) / (2 * eps)
    return {"q": fd_q, "k": fd_k, "v": fd_v, "alpha": fd_alpha}


def attention_gradcheck(inputs: AttentionInputs, alpha: float, r_max: float, grad_out=None,
                        eps: float = 1e-6) -> dict:
    """Max relative error of the analytic gradient for each of q, k, v and alpha."""
    go = np.ones((len(inputs.q), np.asarray(inputs.v).shape[1])) if grad_out is None else np.asarray(grad_out)
    analytic = attention_backward(inputs, alpha, r_max, go)
    numeric = attention_fd_gradients(inputs, alpha, r_max, go, eps)
    return {
        n: float(np.max(np.abs(np.asarray(analytic[n], dtype=float) - np.asarray(numeric[n], dtype=float))
                        / np.maximum(1e-8, np.abs(np.asarray(numeric[n], dtype=float)))))
        for n in analytic
    }
