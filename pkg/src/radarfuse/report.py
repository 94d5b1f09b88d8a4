"""Report emission: canonical JSON, a text summary, CSV series and PNG plots."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

from .io import dumps, finite_or_none

REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
FRAMES_CSV = "series_frames.csv"
HORIZONS_CSV = "series_horizons.csv"
HORIZONS_PNG = "horizons.png"
FRAMES_PNG = "frames_l2.png"


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_text(report: dict) -> str:
    lines = [f"frames: {report['frames']}  scenes: {report['scenes']}  radar: {report.get('radar', 'n/a')}"
             f"  oracle: {report.get('oracle', False)}"]
    for name in ("near", "far"):
        for metric, unit in (("l2", "m"), ("collision", "%"), ("tpc", "m")):
            row = report[f"{metric}_{name}"]
            cells = "  ".join(f"{k}={_fmt(v)}" for k, v in row.items())
            lines.append(f"{metric.upper():9s} {name:4s} ({unit}): {cells}")
    d = report["detection"]
    lines.append("detection: " + "  ".join(f"{k}={_fmt(d[k])}" for k in ("mAP", "NDS", "mATE", "mASE", "mAOE", "mAVE", "mAAE")))
    m = report["motion"]
    lines.append("motion: " + "  ".join(f"{k}={_fmt(v)}" for k, v in m.items()))
    return "\n".join(lines) + "\n"


def horizon_rows(report: dict) -> list[dict]:
    rows = []
    for name in ("near", "far"):
        for k in report[f"l2_{name}"]:
            if k == "avg":
                continue
            rows.append({"horizon": k, "l2": report[f"l2_{name}"][k], "collision": report[f"collision_{name}"][k],
                         "tpc": report[f"tpc_{name}"].get(k)})
    return rows


def _csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _plot_horizons(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    hs = [float(r["horizon"].rstrip("s")) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, label in zip(axes, ("l2", "collision", "tpc"), ("L2 (m)", "collision (%)", "TPC (m)")):
        ax.plot(hs, [float("nan") if r[key] is None else r[key] for r in rows], marker="o")
        ax.set_xlabel("horizon (s)")
        ax.set_ylabel(label)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_frames(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(range(len(rows)), [r["l2_avg"] for r in rows], lw=1, label="L2 avg")
    ax.plot(range(len(rows)), [float("nan") if r["tpc_avg"] is None else r["tpc_avg"] for r in rows], lw=1,
            label="TPC avg")
    ax.set_xlabel("frame (scene order)")
    ax.set_ylabel("m")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(out_dir, report: dict, frame_rows: Sequence[dict], plots: bool = True) -> list[Path]:
    """Writes every rendering of ``report`` into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    safe = finite_or_none(report)
    rows = [finite_or_none(r) for r in frame_rows]
    h_rows = horizon_rows(safe)
    written = []
    for name, text in ((REPORT_JSON, dumps(safe)), (REPORT_TXT, render_text(safe)), (FRAMES_CSV, _csv(rows)),
                       (HORIZONS_CSV, _csv(h_rows))):
        (out / name).write_text(text)
        written.append(out / name)
    if plots:
        _plot_horizons(h_rows, out / HORIZONS_PNG)
        _plot_frames(rows, out / FRAMES_PNG)
        written += [out / HORIZONS_PNG, out / FRAMES_PNG]
    return written
