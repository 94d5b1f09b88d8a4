"""YAML scenario configs.

Schema (every key optional; unknown keys are rejected)::

    seed: 0
    num_agents: 8
    scene_duration: 5.0          # seconds
    map_template: straight       # straight | T-junction | curve
    frame_rate: 2.0              # Hz
    agent_speed_range: [2.0, 15.0]
    ego_speed_range: [3.0, 14.0]
    weather:
      position_sigma: 0.0        # m
      dropout: 0.0               # probability in [0, 1)
      doppler_sigma: 0.0         # m/s
    radar:                       # applied to all five mounts
      max_range: 50.0
      fov_deg: 120.0
      points_per_agent: 24
      num_sweeps: 4
      static_density: 0.3
      sweep_interval: 0.075
    suite:                       # optional: expand into several scenes
      count: 1
      seed_stride: 1
      map_templates: [straight]  # cycled over the suite
"""

from __future__ import annotations

import math
from dataclasses import fields, replace
from pathlib import Path

import yaml

from .core import FusionConfig
from .world.scene import ScenarioConfig, ScenarioError, WeatherNoise, default_radars

_TOP = {"seed", "num_agents", "scene_duration", "map_template", "frame_rate", "agent_speed_range",
        "ego_speed_range", "weather", "radar", "suite"}
_WEATHER = {"position_sigma", "dropout", "doppler_sigma"}
_RADAR = {"max_range", "fov_deg", "points_per_agent", "num_sweeps", "static_density", "sweep_interval"}
_SUITE = {"count", "seed_stride", "map_templates"}


def _section(doc, name: str, allowed: set, problems: list) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        problems.append(f"{name} must be a mapping")
        return {}
    problems.extend(f"unknown key {name}.{k}" for k in sorted(set(sec) - allowed))
    return sec


def _number(value, key: str, problems: list, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{key} must be a number, got {value!r}")
        return None
    if integer and int(value) != value:
        problems.append(f"{key} must be an integer, got {value!r}")
        return None
    return int(value) if integer else float(value)


def parse_config(doc) -> list[ScenarioConfig]:
    """Validated scenario configs described by a parsed YAML document; raises ``ScenarioError``."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ScenarioError(["config must be a mapping"])
    problems: list[str] = [f"unknown key {k}" for k in sorted(set(doc) - _TOP)]
    kw = {}
    for key, integer in (("seed", True), ("num_agents", True), ("scene_duration", False), ("frame_rate", False)):
        if key in doc:
            kw[key] = _number(doc[key], key, problems, integer)
    if "map_template" in doc:
        kw["map_template"] = str(doc["map_template"])
    for key in ("agent_speed_range", "ego_speed_range"):
        if key in doc:
            v = doc[key]
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                problems.append(f"{key} must be a [low, high] pair")
            else:
                kw[key] = tuple(_number(x, key, problems) for x in v)
    weather = _section(doc, "weather", _WEATHER, problems)
    if weather:
        kw["weather"] = WeatherNoise(**{k: _number(v, f"weather.{k}", problems) for k, v in weather.items()
                                        if k in _WEATHER})
    radar = _section(doc, "radar", _RADAR, problems)
    if radar:
        over = {}
        for k, v in radar.items():
            if k not in _RADAR:
                continue
            num = _number(v, f"radar.{k}", problems, integer=k in ("points_per_agent", "num_sweeps"))
            if k == "fov_deg" and num is not None:
                over["fov"] = math.radians(num)
            else:
                over[k] = num
        if not any(v is None for v in over.values()):
            kw["radars"] = default_radars(**over)
    suite = _section(doc, "suite", _SUITE, problems)
    if any(v is None for v in kw.values()) or problems:
        raise ScenarioError(problems)
    base = ScenarioConfig(**kw)
    count = _number(suite.get("count", 1), "suite.count", problems, integer=True)
    stride = _number(suite.get("seed_stride", 1), "suite.seed_stride", problems, integer=True)
    templates = suite.get("map_templates", [base.map_template])
    if not isinstance(templates, list) or not templates:
        problems.append("suite.map_templates must be a non-empty list")
    if count is not None and count < 1:
        problems.append("suite.count must be >= 1")
    if problems:
        raise ScenarioError(problems)
    configs = [replace(base, seed=base.seed + k * stride, map_template=str(templates[k % len(templates)]))
               for k in range(count)]
    for c in configs:
        bad = c.validate()
        if bad:
            raise ScenarioError([f"seed {c.seed}: {p}" for p in bad])
    return configs


def load_config(path) -> list[ScenarioConfig]:
    """Reads and validates a YAML scenario file; ``FileNotFoundError`` names the path."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError([f"{p}: not valid YAML ({exc})"]) from exc
    return parse_config(doc)


def load_fusion_config(path) -> FusionConfig:
    """Reads a flat YAML mapping of ``FusionConfig`` fields; unknown keys and invalid values raise ``ScenarioError``."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"fusion config not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ScenarioError([f"{p}: fusion config must be a mapping"])
    allowed = {f.name: f.type for f in fields(FusionConfig)}
    problems = [f"unknown key {k}" for k in sorted(set(doc) - set(allowed))]
    kw = {}
    for k, v in doc.items():
        if k in allowed:
            num = _number(v, k, problems, integer=isinstance(getattr(FusionConfig(), k), int))
            if num is not None:
                kw[k] = num
    if problems:
        raise ScenarioError(problems)
    cfg = FusionConfig(**kw)
    problems = cfg.validate()
    if problems:
        raise ScenarioError(problems)
    return cfg
