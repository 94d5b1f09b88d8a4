"""JSON serialization of scenes and trained parameters.

Camera grids are not stored: they are re-rendered on load from the stored
per-frame grid seed, which reproduces them bit for bit. Decoder weights and
head liftings are likewise rebuilt from the parameter seed; only the trained
head arrays and the clustered anchors are written out.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AgentInstance, DrivingCommand, Frame, FusionConfig, MapPolyline, Pose2D, RadarPoint, radar_array
from .fusion.layers import DecoderParams
from .geometry import CameraModel
from .heads import HeadParams
from .planner import PlannerParams
from .world.camera import render_camera_features
from .world.scene import RadarSensorConfig, ScenarioConfig, WeatherNoise

SCENE_FORMAT = "radarfuse.scene/1"
PARAMS_FORMAT = "radarfuse.params/1"


def dumps(doc) -> str:
    """Canonical JSON: sorted keys, no NaN, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def content_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()).hexdigest()


def _pose(p: Pose2D) -> list:
    return [float(p.x), float(p.y), float(p.yaw)]


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["radars"] = [dict(asdict(r), mount=_pose(r.mount)) for r in cfg.radars]
    d["agent_speed_range"] = list(cfg.agent_speed_range)
    d["ego_speed_range"] = list(cfg.ego_speed_range)
    return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    radars = tuple(RadarSensorConfig(**dict(r, mount=Pose2D(*r["mount"]))) for r in d.pop("radars"))
    return ScenarioConfig(weather=WeatherNoise(**d.pop("weather")), radars=radars,
                          agent_speed_range=tuple(d.pop("agent_speed_range")),
                          ego_speed_range=tuple(d.pop("ego_speed_range")), **d)


def camera_to_dict(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "rotation": np.asarray(cam.rotation).tolist(),
            "translation": np.asarray(cam.translation).tolist(), "width": cam.width, "height": cam.height}


def camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"], dtype=float),
                       np.array(d["translation"], dtype=float), int(d["width"]), int(d["height"]))


def frame_to_dict(f: Frame, grid_seed) -> dict:
    return {
        "timestamp": f.timestamp,
        "index": f.index,
        "scene_id": f.scene_id,
        "ego_pose": _pose(f.ego_pose),
        "ego_velocity": np.asarray(f.ego_velocity, dtype=float).tolist(),
        "command": DrivingCommand(f.command).name,
        "radar": f.radar_array().tolist(),
        "grid_seed": list(grid_seed),
        "agents": [{"id": a.instance_id, "anchor": np.asarray(a.anchor).tolist(),
                    "class_scores": np.asarray(a.class_scores).tolist(),
                    "future": np.asarray(f.gt_futures[a.instance_id]).tolist() if a.instance_id in f.gt_futures else None}
                   for a in f.gt_agents],
        "map": [{"waypoints": np.asarray(p.waypoints).tolist(), "class_scores": np.asarray(p.class_scores).tolist()}
                for p in f.gt_map],
        "ego_future": np.asarray(f.gt_ego_future).tolist(),
    }


def frame_from_dict(d: dict, cams: Sequence[CameraModel]) -> Frame:
    agents, futures = [], {}
    for a in d["agents"]:
        agents.append(AgentInstance(np.array(a["anchor"], dtype=float), class_scores=np.array(a["class_scores"]),
                                    instance_id=int(a["id"])))
        if a["future"] is not None:
            futures[int(a["id"])] = np.array(a["future"], dtype=float)
    radar = np.array(d["radar"], dtype=float).reshape(-1, 6)
    frame = Frame(
        timestamp=float(d["timestamp"]), ego_pose=Pose2D(*d["ego_pose"]),
        ego_velocity=np.array(d["ego_velocity"], dtype=float),
        radar_points=tuple(RadarPoint(*map(float, row)) for row in radar), cameras=tuple(cams),
        gt_agents=tuple(agents),
        gt_map=tuple(MapPolyline(np.array(p["waypoints"], dtype=float), class_scores=np.array(p["class_scores"]))
                     for p in d["map"]),
        gt_futures=futures, gt_ego_future=np.array(d["ego_future"], dtype=float),
        command=DrivingCommand[d["command"]], scene_id=d["scene_id"], index=int(d["index"]),
    )
    grids = render_camera_features(frame, cams, seed=tuple(d["grid_seed"]))
    return replace(frame, camera_grids=tuple(grids))


def scene_to_dict(cfg: ScenarioConfig, frames: Sequence[Frame]) -> dict:
    cams = frames[0].cameras if frames else ()
    return {
        "format": SCENE_FORMAT,
        "config": scenario_to_dict(cfg),
        "cameras": [camera_to_dict(c) for c in cams],
        "frames": [frame_to_dict(f, (cfg.seed, f.index)) for f in frames],
    }


def save_scene(path, cfg: ScenarioConfig, frames: Sequence[Frame]) -> Path:
    p = Path(path)
    p.write_text(dumps(scene_to_dict(cfg, frames)))
    return p


def load_scene(path) -> tuple[ScenarioConfig, list[Frame]]:
    p = Path(path)
    doc = json.loads(p.read_text())
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError(f"{p}: not a scene file (format {doc.get('format')!r})")
    cams = tuple(camera_from_dict(c) for c in doc["cameras"])
    return scenario_from_dict(doc["config"]), [frame_from_dict(f, cams) for f in doc["frames"]]


def scene_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory not found: {d}")
    files = sorted(d.glob("scene_*.json"))
    if not files:
        raise FileNotFoundError(f"no scene_*.json files in {d}")
    return files


def params_to_dict(params: PlannerParams, meta: dict | None = None) -> dict:
    content = {
        "seed": params.heads.seed,
        "decoder_seed": params.decoder.seed,
        "fusion": asdict(params.config),
        "heads": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in sorted(params.heads.arrays.items())},
        "agent_anchors": params.agent_anchors.tolist(),
        "map_anchors": params.map_anchors.tolist(),
        "meta": meta or {},
    }
    return {"format": PARAMS_FORMAT, "sha256": content_hash(content), "content": content}


def params_from_dict(doc: dict) -> PlannerParams:
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"not a parameter file (format {doc.get('format')!r})")
    c = doc["content"]
    if content_hash(c) != doc.get("sha256"):
        raise ValueError("parameter file hash mismatch")
    cfg = FusionConfig(**c["fusion"])
    arrays = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in c["heads"].items()}
    heads = HeadParams(int(c["seed"]), cfg.embed_dim, arrays, HeadParams.make_lifts(int(c["seed"]), cfg.embed_dim))
    return PlannerParams(DecoderParams.init(cfg, int(c["decoder_seed"])), heads,
                         np.array(c["agent_anchors"], dtype=float), np.array(c["map_anchors"], dtype=float))


def save_params(path, params: PlannerParams, meta: dict | None = None) -> str:
    doc = params_to_dict(params, meta)
    Path(path).write_text(dumps(doc))
    return doc["sha256"]


def load_params(path) -> tuple[PlannerParams, dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"parameter file not found: {p}")
    doc = json.loads(p.read_text())
    return params_from_dict(doc), doc


def finite_or_none(x):
    """JSON-safe copy of nested metric values: NaN and infinities become ``None``."""
    if isinstance(x, dict):
        return {str(k): finite_or_none(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [finite_or_none(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if math.isfinite(v) else None
    return x
