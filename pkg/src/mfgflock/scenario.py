"""Scenario files: YAML with sections ``env``, ``mu0``, ``fp``, ``sac`` and ``flow``.

Every key has a default; :func:`to_dict` writes all of them out so a saved
scenario is self-describing.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .env import EnvConfig, Obstacle, RewardSpec
from .flows import FlowConfig
from .fp import FpConfig, InitialDistribution
from .sac import SacConfig


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    config: FpConfig


FP_KEYS = ("J", "pop_size", "n_station_samples", "station_horizon", "gamma", "n_eval", "mixture", "mean_samples")


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError("scenario: expected a mapping at top level")
    allowed = {"name", "seed", "env", "mu0", "fp", "sac", "flow"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"scenario: unknown section(s) {', '.join(unknown)}")
    env_data = dict(data.get("env") or {})
    reward = _build(RewardSpec, env_data.pop("reward", None), "env.reward")
    obstacles = []
    for i, ob in enumerate(env_data.pop("obstacles", None) or []):
        obstacles.append(_build(Obstacle, ob, f"env.obstacles[{i}]"))
    env = _build(EnvConfig, env_data, "env")
    env.reward, env.obstacles = reward, obstacles
    mu0_data = dict(data.get("mu0") or {})
    mu0_data.setdefault("d", env.d)
    mu0_data.setdefault("bounds", env.bounds)
    mu0 = _build(InitialDistribution, mu0_data, "mu0")
    sac_data = dict(data.get("sac") or {})
    if "hidden" in sac_data:
        sac_data["hidden"] = tuple(sac_data["hidden"])
    sac = _build(SacConfig, sac_data, "sac")
    flow = _build(FlowConfig, data.get("flow"), "flow")
    fp_data = dict(data.get("fp") or {})
    bad = sorted(set(fp_data) - set(FP_KEYS))
    if bad:
        raise ConfigError(f"fp: unknown key(s) {', '.join(bad)}")
    cfg = FpConfig(seed=int(data.get("seed", 0)), mu0=mu0, env=env, sac=sac, flow=flow, **fp_data)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Scenario(str(data.get("name", "scenario")), cfg)


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [float(x) for x in obj.tolist()]
    if isinstance(obj, (tuple, list)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def to_dict(sc: Scenario) -> dict:
    cfg = sc.config
    env = {f.name: getattr(cfg.env, f.name) for f in dataclasses.fields(EnvConfig)}
    env["reward"] = dataclasses.asdict(cfg.env.reward)
    env["obstacles"] = [{"lo": o.lo, "hi": o.hi, "penalty": o.penalty} for o in cfg.env.obstacles]
    out = {
        "name": sc.name,
        "seed": cfg.seed,
        "env": env,
        "mu0": dataclasses.asdict(cfg.mu0),
        "fp": {k: getattr(cfg, k) for k in FP_KEYS},
        "sac": dataclasses.asdict(cfg.sac),
        "flow": dataclasses.asdict(cfg.flow),
    }
    return _plain(out)


def load(path) -> Scenario:
    if not os.path.exists(path):
        bundled = bundled_path(path)
        if bundled is None:
            raise ConfigError(f"scenario file not found: {path}")
        path = bundled
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(data)


def dumps(sc: Scenario) -> str:
    return yaml.safe_dump(to_dict(sc), sort_keys=False)


def save(sc: Scenario, path):
    with open(path, "w") as fh:
        fh.write(dumps(sc))


def bundled_names():
    root = resources.files("mfgflock") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_path(name):
    """Path of a bundled scenario given its name (with or without ``.yaml``)."""
    stem = os.path.basename(name)
    stem = stem[:-5] if stem.endswith(".yaml") else stem
    p = resources.files("mfgflock") / "scenarios" / f"{stem}.yaml"
    return str(p) if p.is_file() else None
