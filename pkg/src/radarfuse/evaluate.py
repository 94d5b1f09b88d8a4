"""Batch evaluation: runs the pipeline over scenes and aggregates every metric."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Frame, FusionConfig
from .metrics import (
    FAR_HORIZONS,
    NEAR_HORIZONS,
    TP_NAMES,
    collision_rate,
    detection_map,
    detection_record,
    l2_at_horizons,
    mean_tpc,
    motion_metrics,
    motion_record,
    nds,
    planning_record,
    tpc,
)
from .planner import PlannerParams, PlannerState, oracle_output, run_frame

MOTION_SCORE_THRESHOLD = 0.3


@dataclass(frozen=True, eq=False)
class FrameResult:
    scene_id: str
    index: int
    planning: object
    detection: object
    motion: object
    command: str


def run_scene(frames: Sequence[Frame], params: Optional[PlannerParams], use_radar: bool = True,
              oracle: bool = False, cfg: Optional[FusionConfig] = None) -> list[FrameResult]:
    """Streams one scene; frames are processed in order so memory and TPC see their predecessors."""
    state = PlannerState(params) if params is not None else None
    prev_plan = prev_pose = None
    out = []
    for frame in frames:
        if oracle:
            result = oracle_output(frame)
        else:
            result, state = run_frame(frame, state, cfg, use_radar)
        plan = result.plan.points
        out.append(FrameResult(
            frame.scene_id, frame.index,
            planning_record(frame, plan, prev_plan, prev_pose),
            detection_record(frame, result.detections),
            motion_record(frame, result.detections, result.agent_futures,
                          0.0 if oracle else MOTION_SCORE_THRESHOLD),
            result.command.name,
        ))
        prev_plan, prev_pose = plan, frame.ego_pose
    return out


def _run_scene_job(args):
    return run_scene(*args)


def run_scenes(scenes: Sequence[Sequence[Frame]], params, use_radar=True, oracle=False, cfg=None,
               workers: int = 1) -> list[FrameResult]:
    """All scenes, merged in scene-id order regardless of worker count."""
    jobs = [(s, params, use_radar, oracle, cfg) for s in scenes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_scene_job, jobs))
    else:
        results = [_run_scene_job(j) for j in jobs]
    order = sorted(range(len(scenes)), key=lambda i: (scenes[i][0].scene_id if scenes[i] else "", i))
    return [fr for i in order for fr in results[i]]


def _mean(values) -> float:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def aggregate(results: Sequence[FrameResult]) -> dict:
    """Every metric of the evaluation suite over a flat, ordered list of frame results."""
    planning = [r.planning for r in results]
    report: dict = {"frames": len(results), "scenes": len({r.scene_id for r in results})}
    for name, horizons in (("near", NEAR_HORIZONS), ("far", FAR_HORIZONS)):
        l2 = [l2_at_horizons(p.plan, p.gt_future, horizons) for p in planning]
        keys = list(l2[0]) if l2 else [f"{h:g}s" for h in horizons] + ["avg"]
        report[f"l2_{name}"] = {k: _mean(v[k] for v in l2) for k in keys}
        report[f"collision_{name}"] = collision_rate(planning, horizons)
        report[f"tpc_{name}"] = mean_tpc(planning, horizons)
    det = detection_map([r.detection for r in results])
    report["detection"] = {"mAP": det.mAP, **dict(zip(TP_NAMES, det.tp_errors)), "NDS": nds(det.mAP, det.tp_errors),
                           "ap": det.ap}
    mm = motion_metrics([r.motion for r in results])
    report["motion"] = {"minADE": mm.min_ade, "minFDE": mm.min_fde, "MR": mm.miss_rate, "EPA": mm.epa,
                        "matched": mm.matched, "hits": mm.hits, "false_positives": mm.false_positives,
                        "num_gt": mm.num_gt}
    return report


def frame_series(results: Sequence[FrameResult]) -> list[dict]:
    """Plot-ready per-frame rows."""
    rows = []
    for r in results:
        p = r.planning
        l2 = l2_at_horizons(p.plan, p.gt_future, NEAR_HORIZONS)
        t = tpc(p.plan, p.prev_plan, NEAR_HORIZONS, p.prev_to_current)
        det = r.detection
        rows.append({
            "scene_id": r.scene_id,
            "frame": r.index,
            "command": r.command,
            "l2_1s": l2["1s"], "l2_2s": l2["2s"], "l2_3s": l2["3s"], "l2_avg": l2["avg"],
            "tpc_avg": None if t is None else t["avg"],
            "collision": int(collision_rate([p], NEAR_HORIZONS)["3s"] > 0),
            "num_gt": int(len(det.gt_labels)),
            "num_pred_over_0.3": int(np.sum(np.asarray(det.pred_scores) >= MOTION_SCORE_THRESHOLD)),
        })
    return rows
