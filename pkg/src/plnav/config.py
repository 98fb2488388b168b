"""YAML run configuration.

A config file has an optional ``scenario`` section (simulation settings) and
an optional ``solver`` section (graph and optimizer settings). Unknown keys
are rejected with the dotted path of the offending entry. Angles are in
radians and all other quantities in SI units.

Example::

    scenario:
      name: GPS+2PL
      seed: 3
      trajectory: {type: circle, radius: 40.0, speed: 4.0}
      pseudolites: [PL01, PL02]
    solver:
      fixed_sigma_p: 2.0
"""

from __future__ import annotations

import math
from dataclasses import fields, replace
from pathlib import Path
from typing import Any

import yaml

from .frames import GeodeticCoord
from .graph import OptimizerConfig, PriorSigmas
from .navstate import ImuBias
from .pipeline import FgoConfig
from .preintegration import ImuNoiseParams
from .sim import (
    DEFAULT_PSEUDOLITES,
    DEFAULT_SATELLITES,
    Circle,
    FigureEight,
    PseudoliteSpec,
    SatelliteSpec,
    ScenarioConfig,
    ScenarioError,
    StraightLine,
)


class ConfigError(ValueError):
    """Bad config entry; ``field`` is its dotted path."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


_TRAJECTORIES = {"circle": Circle, "figure_eight": FigureEight, "straight": StraightLine}
_TRAJECTORY_NAMES = {v: k for k, v in _TRAJECTORIES.items()}
_SCALARS = ("name", "seed", "duration", "gnss_epoch_rate", "imu_rate", "pr_sigma", "pr_corr_sigma",
            "pr_corr_tau", "clock_walk", "add_noise", "elevation_mask")
_SCENARIO_KEYS = set(_SCALARS) | {"origin", "trajectory", "satellites", "pseudolites", "base_enu", "lever",
                                  "imu_noise", "initial_bias"}
_NOISE_KEYS = ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk")
_SOLVER_SCALARS = ("sigma_p_floor", "fixed_sigma_p", "initial_yaw", "align_window")


def _check_keys(d: Any, allowed, where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(where, "expected a mapping")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{where}.{k}" if where else str(k), "unknown key")
    return d


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(where, f"expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(where, "must be finite")
    return float(v)


def _vec3(v, where: str) -> tuple:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ConfigError(where, "expected a list of 3 numbers")
    return tuple(_num(x, f"{where}[{i}]") for i, x in enumerate(v))


def _trajectory(d, where):
    d = _check_keys(d, {"type", "radius", "speed", "scale", "period", "heading"}, where)
    kind = d.get("type", "circle")
    if kind not in _TRAJECTORIES:
        raise ConfigError(f"{where}.type", f"must be one of {sorted(_TRAJECTORIES)}")
    cls = _TRAJECTORIES[kind]
    names = {f.name for f in fields(cls)}
    extra = set(d) - names - {"type"}
    if extra:
        raise ConfigError(f"{where}.{sorted(extra)[0]}", f"not a {kind} parameter")
    return cls(**{k: _num(v, f"{where}.{k}") for k, v in d.items() if k != "type"})


def _satellites(items, where):
    if not isinstance(items, list):
        raise ConfigError(where, "expected a list")
    out = []
    for k, s in enumerate(items):
        w = f"{where}[{k}]"
        s = _check_keys(s, {"id", "azimuth", "elevation", "range", "clock_offset"}, w)
        if "id" not in s or "azimuth" not in s or "elevation" not in s:
            raise ConfigError(w, "needs id, azimuth and elevation")
        out.append(SatelliteSpec(
            str(s["id"]), _num(s["azimuth"], f"{w}.azimuth"), _num(s["elevation"], f"{w}.elevation"),
            _num(s.get("range", 2.2e7), f"{w}.range"), _num(s.get("clock_offset", 0.0), f"{w}.clock_offset"),
        ))
    return tuple(out)


def _pseudolites(items, where):
    if not isinstance(items, list):
        raise ConfigError(where, "expected a list")
    presets = {p.id: p for p in DEFAULT_PSEUDOLITES}
    out = []
    for k, p in enumerate(items):
        w = f"{where}[{k}]"
        if isinstance(p, str):
            if p not in presets:
                raise ConfigError(w, f"unknown preset {p!r}; known: {sorted(presets)}")
            out.append(presets[p])
            continue
        p = _check_keys(p, {"id", "enu", "clock_offset"}, w)
        if "id" not in p or "enu" not in p:
            raise ConfigError(w, "needs id and enu")
        out.append(PseudoliteSpec(str(p["id"]), _vec3(p["enu"], f"{w}.enu"),
                                  _num(p.get("clock_offset", 0.0), f"{w}.clock_offset")))
    return tuple(out)


def scenario_from_dict(d: dict | None) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig`; omitted keys keep their defaults.

    ``satellites`` defaults to the built-in four-satellite constellation and
    ``pseudolites`` to none. Pseudolites may be given by preset id.
    """
    d = _check_keys(d, _SCENARIO_KEYS, "scenario")
    kw: dict[str, Any] = {"satellites": DEFAULT_SATELLITES}
    for k in _SCALARS:
        if k not in d:
            continue
        v = d[k]
        where = f"scenario.{k}"
        if k == "name":
            kw[k] = str(v)
        elif k == "seed":
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(where, "must be a non-negative integer")
            kw[k] = v
        elif k == "add_noise":
            if not isinstance(v, bool):
                raise ConfigError(where, "must be true or false")
            kw[k] = v
        else:
            kw[k] = _num(v, where)
    if "origin" in d:
        o = _check_keys(d["origin"], {"lat", "lon", "height"}, "scenario.origin")
        try:
            kw["origin"] = GeodeticCoord(_num(o.get("lat"), "scenario.origin.lat"),
                                         _num(o.get("lon"), "scenario.origin.lon"),
                                         _num(o.get("height", 0.0), "scenario.origin.height"))
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError("scenario.origin", str(e)) from None
    if "trajectory" in d:
        kw["trajectory"] = _trajectory(d["trajectory"], "scenario.trajectory")
    if "satellites" in d:
        kw["satellites"] = _satellites(d["satellites"], "scenario.satellites")
    if "pseudolites" in d:
        kw["pseudolites"] = _pseudolites(d["pseudolites"], "scenario.pseudolites")
    for k in ("base_enu", "lever"):
        if k in d:
            kw[k] = _vec3(d[k], f"scenario.{k}")
    rate = kw.get("imu_rate", ScenarioConfig.imu_rate)
    if not rate > 0:
        raise ConfigError("scenario.imu_rate", "must be > 0")
    noise = _check_keys(d.get("imu_noise"), set(_NOISE_KEYS), "scenario.imu_noise")
    try:
        kw["noise"] = ImuNoiseParams(**{k: _num(v, f"scenario.imu_noise.{k}") for k, v in noise.items()},
                                     sample_rate=rate)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("scenario.imu_noise", str(e)) from None
    if "initial_bias" in d:
        b = _check_keys(d["initial_bias"], {"accel", "gyro"}, "scenario.initial_bias")
        kw["initial_bias"] = ImuBias(_vec3(b.get("accel", [0, 0, 0]), "scenario.initial_bias.accel"),
                                     _vec3(b.get("gyro", [0, 0, 0]), "scenario.initial_bias.gyro"))
    try:
        return ScenarioConfig(**kw)
    except ScenarioError as e:
        raise ConfigError(f"scenario.{e.field}", str(e).split(": ", 1)[-1]) from None


def solver_from_dict(d: dict | None) -> FgoConfig:
    opt_names = {f.name for f in fields(OptimizerConfig)}
    prior_names = {f.name for f in fields(PriorSigmas)}
    d = _check_keys(d, set(_SOLVER_SCALARS) | {"optimizer", "prior"}, "solver")
    kw: dict[str, Any] = {}
    for k in _SOLVER_SCALARS:
        if k in d:
            kw[k] = None if d[k] is None and k in ("fixed_sigma_p", "initial_yaw") else _num(d[k], f"solver.{k}")
    if kw.get("fixed_sigma_p") is not None and not kw["fixed_sigma_p"] > 0:
        raise ConfigError("solver.fixed_sigma_p", "must be > 0")
    if "sigma_p_floor" in kw and not kw["sigma_p_floor"] > 0:
        raise ConfigError("solver.sigma_p_floor", "must be > 0")
    opt = _check_keys(d.get("optimizer"), opt_names, "solver.optimizer")
    okw = {}
    for k, v in opt.items():
        if k == "max_iterations":
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError("solver.optimizer.max_iterations", "must be a positive integer")
            okw[k] = v
        else:
            okw[k] = _num(v, f"solver.optimizer.{k}")
    try:
        kw["optimizer"] = OptimizerConfig(**okw)
    except ValueError as e:
        raise ConfigError("solver.optimizer", str(e)) from None
    pr = _check_keys(d.get("prior"), prior_names, "solver.prior")
    kw["prior"] = PriorSigmas(**{k: _num(v, f"solver.prior.{k}") for k, v in pr.items()})
    return FgoConfig(**kw)


def parse_config(text: str) -> tuple[ScenarioConfig, FgoConfig]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("config", f"not valid YAML: {e}") from None
    return config_from_dict(data or {})


def config_from_dict(data: dict) -> tuple[ScenarioConfig, FgoConfig]:
    data = _check_keys(data, {"scenario", "solver"}, "")
    return scenario_from_dict(data.get("scenario")), solver_from_dict(data.get("solver"))


def load_config(path: str | Path | None) -> tuple[ScenarioConfig, FgoConfig]:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {path}")
    return parse_config(p.read_text())


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    """Inverse of :func:`scenario_from_dict` (lossless for finite floats)."""
    traj = cfg.trajectory
    tdict = {"type": _TRAJECTORY_NAMES[type(traj)]}
    tdict.update({f.name: float(getattr(traj, f.name)) for f in fields(traj)})
    return {
        "name": cfg.name,
        "seed": int(cfg.seed),
        "duration": float(cfg.duration),
        "gnss_epoch_rate": float(cfg.gnss_epoch_rate),
        "imu_rate": float(cfg.imu_rate),
        "origin": {"lat": cfg.origin.lat, "lon": cfg.origin.lon, "height": cfg.origin.height},
        "trajectory": tdict,
        "satellites": [
            {"id": s.id, "azimuth": float(s.azimuth), "elevation": float(s.elevation), "range": float(s.range),
             "clock_offset": float(s.clock_offset)}
            for s in cfg.satellites
        ],
        "pseudolites": [
            {"id": p.id, "enu": [float(x) for x in p.enu], "clock_offset": float(p.clock_offset)}
            for p in cfg.pseudolites
        ],
        "base_enu": [float(x) for x in cfg.base_enu],
        "lever": [float(x) for x in cfg.lever],
        "pr_sigma": float(cfg.pr_sigma),
        "pr_corr_sigma": float(cfg.pr_corr_sigma),
        "pr_corr_tau": float(cfg.pr_corr_tau),
        "clock_walk": float(cfg.clock_walk),
        "imu_noise": {k: float(getattr(cfg.noise, k)) for k in _NOISE_KEYS},
        "initial_bias": {"accel": [float(x) for x in cfg.initial_bias.accel],
                         "gyro": [float(x) for x in cfg.initial_bias.gyro]},
        "add_noise": bool(cfg.add_noise),
        "elevation_mask": float(cfg.elevation_mask),
    }


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump({"scenario": scenario_to_dict(cfg)}, sort_keys=False)


def with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(cfg, seed=int(seed))
