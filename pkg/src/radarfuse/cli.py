"""Command-line entry point: generate, train and eval.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .config import load_config, load_fusion_config
from .core import FusionConfig, validate_scene
from .evaluate import aggregate, frame_series, run_scenes
from .io import dumps, load_params, load_scene, save_params, save_scene, scene_files
from .report import write_report
from .training import TrainConfig, TrainingDiverged, encode_scene, train
from .world.scene import ScenarioError, generate_scene

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("radarfuse")


class UsageError(Exception):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def _generate_job(cfg):
    return cfg, generate_scene(cfg)


def cmd_generate(args) -> int:
    configs = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            done = list(pool.map(_generate_job, configs))
    else:
        done = [_generate_job(c) for c in configs]
    for cfg, frames in done:
        problems = validate_scene(frames)
        if problems:
            raise RuntimeError(f"scene {cfg.seed} failed validation: " + "; ".join(problems))
        path = save_scene(out / f"scene_{cfg.seed:06d}.json", cfg, frames)
        log.info("wrote %s (%d frames)", path, len(frames))
    return EXIT_OK


def _load_scenes(directory):
    scenes = [load_scene(p)[1] for p in scene_files(directory)]
    return sorted(scenes, key=lambda s: s[0].scene_id if s else "")


def _encode_job(args):
    scene, params, use_radar = args
    return encode_scene(scene, params, use_radar)


def _parallel_encoder(workers: int):
    def encode(scenes, params, use_radar):
        if workers <= 1:
            return [encode_scene(s, params, use_radar) for s in scenes]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_encode_job, [(s, params, use_radar) for s in scenes]))
    return encode


def cmd_train(args) -> int:
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    fusion = load_fusion_config(args.fusion_config) if args.fusion_config else FusionConfig()
    scenes = _load_scenes(args.scenes)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, use_radar=args.radar, fusion=fusion)
    result = train(scenes, cfg, encoder=_parallel_encoder(args.workers))
    meta = {"radar": args.radar, "epochs": args.epochs, "train_seed": args.seed,
            "scenes": [s[0].scene_id for s in scenes if s],
            "history": [{k: v for k, v in h.items()} for h in result.history]}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_params(out, result.params, meta)
    log.info("wrote %s sha256=%s", out, digest)
    return EXIT_OK


def cmd_eval(args) -> int:
    scenes = _load_scenes(args.scenes)
    params = None
    params_hash = None
    fusion = load_fusion_config(args.fusion_config) if args.fusion_config else None
    if not args.oracle:
        if not args.params:
            raise UsageError("--params is required unless --oracle is given")
        params, doc = load_params(args.params)
        params_hash = doc["sha256"]
        try:
            params.check(fusion)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    results = run_scenes(scenes, params, args.radar, args.oracle, fusion, workers=args.workers)
    report = aggregate(results)
    report["radar"] = "on" if args.radar else "off"
    report["oracle"] = bool(args.oracle)
    report["params_sha256"] = params_hash
    write_report(args.out, report, frame_series(results), plots=not args.no_plots)
    manifest = {"scenes": str(args.scenes), "params": None if args.oracle else str(args.params),
                "params_sha256": params_hash, "fusion_config": args.fusion_config, "out": str(args.out),
                "radar_enabled": bool(args.radar), "oracle": bool(args.oracle),
                "seeds": sorted({s[0].scene_id for s in scenes if s})}
    (Path(args.out) / "manifest.json").write_text(dumps(manifest))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=1, help="scene-level worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="radarfuse", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate synthetic scenes from a YAML config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train the output heads")
    t.add_argument("--scenes", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--radar", type=_on_off, default=True)
    t.add_argument("--out", required=True)
    t.add_argument("--fusion-config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate and write a metric report")
    e.add_argument("--scenes", required=True)
    e.add_argument("--params")
    e.add_argument("--radar", type=_on_off, default=True)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="ground-truth passthrough instead of the learned pipeline")
    e.add_argument("--fusion-config")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ScenarioError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
