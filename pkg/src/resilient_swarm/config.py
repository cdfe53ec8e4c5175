"""Scenario configuration: defaults, YAML loading, overrides and validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .channel import ChannelParams
from .control import ControlParams
from .detection import DetectorParams
from .errors import ConfigError, SwarmError
from .model import LtiModel, build_double_integrator, is_spd
from .threats import KINDS, CompromiseSpec

VARIANTS = ("no_recovery", "recovery_no_R_update", "recovery_nonrobust_R",
            "recovery_robust_R")
VARIANT_ALIASES = {
    "none": "no_recovery", "no_recovery": "no_recovery",
    "no_update": "recovery_no_R_update", "recovery_no_R_update": "recovery_no_R_update",
    "nonrobust": "recovery_nonrobust_R", "recovery_nonrobust_R": "recovery_nonrobust_R",
    "robust": "recovery_robust_R", "recovery_robust_R": "recovery_robust_R",
}


@dataclass(frozen=True)
class ModelParams:
    q_pos: float = 1e-4
    q_vel: float = 1e-3
    r_pos: float = 0.1
    r_vel: float = 0.01


@dataclass(frozen=True)
class AttackParams:
    """Randomized compromise schedule; ``compromises`` pins it explicitly."""

    start_k: int = 350
    n_attacked: int = 5
    n_faulty: int = 2
    attack_kind: str = "ramp_divert"
    rate: float = 0.12
    divert_target: tuple[float, float] = (0.0, 140.0)
    bias: tuple[float, float] = (5.0, 0.0)
    fault_kind: str = "noise_inflation"
    noise_scale: float = 4.0
    compromises: tuple[CompromiseSpec, ...] = ()


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 12
    dt: float = 0.1
    max_steps: int = 1000
    seed: int = 0
    gamma: float = 0.01
    goal: tuple[float, float] = (60.0, 60.0)
    goal_radius: float = 20.0
    init_region: tuple[float, float, float, float] = (-15.0, -15.0, 15.0, 15.0)
    noiseless: bool = False     # zero every noise realization (filters keep Q, R)
    model: ModelParams = field(default_factory=ModelParams)
    control: ControlParams = field(default_factory=ControlParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    attack: AttackParams = field(default_factory=AttackParams)

    @property
    def dim(self) -> int:
        return 2

    def lti_model(self) -> LtiModel:
        m = self.model
        return build_double_integrator(self.dt, m.q_pos, m.q_vel, m.r_pos, m.r_vel)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


_NESTED = {"model": ModelParams, "control": ControlParams, "channel": ChannelParams,
           "detector": DetectorParams, "attack": AttackParams}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown field")
        if cls is ScenarioConfig and key in _NESTED:
            val = _build(_NESTED[key], val, f"{where}.{key}")
        elif cls is AttackParams and key == "compromises":
            val = tuple(_build(CompromiseSpec, item, f"{where}.compromises[{i}]")
                        for i, item in enumerate(val or []))
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, SwarmError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict | None) -> ScenarioConfig:
    return _build(ScenarioConfig, data or {}, "config")


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{loc}: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(config: ScenarioConfig, overrides) -> ScenarioConfig:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    data = config.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown field")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def dump_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def validate_dict(data: dict) -> list[str]:
    """All invariant violations of a raw config mapping (empty when valid)."""
    problems: list[str] = []
    try:
        cfg = config_from_dict(data)
    except ConfigError as exc:
        # fall back to checking what can be checked field by field
        problems.append(str(exc))
        return problems
    return validate(cfg)


def validate(cfg: ScenarioConfig) -> list[str]:
    problems: list[str] = []
    D = cfg.dim
    if cfg.n_agents < 1:
        problems.append("n_agents must be >= 1")
    elif cfg.n_agents < D + 2:
        problems.append(f"feasibility: n_agents={cfg.n_agents} < D+2={D + 2}; a compromised "
                        f"agent may lack the {D + 1} anchors needed for a position fix")
    if cfg.dt <= 0:
        problems.append("dt must be positive")
    if not 0 < cfg.gamma < 1:
        problems.append(f"gamma={cfg.gamma} must lie in (0, 1)")
    if cfg.goal_radius <= 0:
        problems.append("goal_radius must be positive")
    x0, y0, x1, y1 = cfg.init_region
    if not (x1 > x0 and y1 > y0):
        problems.append("init_region must be (xmin, ymin, xmax, ymax) with max > min")
    m = cfg.model
    for name in ("q_pos", "q_vel", "r_pos", "r_vel"):
        if not getattr(m, name) > 0:
            problems.append(f"model.{name} must be positive")
    if not problems:
        lti = cfg.lti_model()
        if not is_spd(lti.Q):
            problems.append("Q is not symmetric positive definite")
        if not is_spd(lti.R):
            problems.append("R is not symmetric positive definite")
    a = cfg.attack
    if a.start_k < 0:
        problems.append("attack.start_k must be >= 0")
    if cfg.max_steps <= a.start_k:
        problems.append(f"max_steps={cfg.max_steps} must exceed attack.start_k={a.start_k}")
    for kind_name in ("attack_kind", "fault_kind"):
        if getattr(a, kind_name) not in KINDS:
            problems.append(f"attack.{kind_name} must be one of {KINDS}")
    if a.compromises:
        targets = [c.target for c in a.compromises]
        if len(set(targets)) != len(targets):
            problems.append("attack.compromises lists an agent more than once")
        for c in a.compromises:
            if not 0 <= c.target < cfg.n_agents:
                problems.append(f"compromise target {c.target} out of range")
            if c.start_k >= cfg.max_steps:
                problems.append(f"compromise of agent {c.target} starts after the run ends")
    elif a.n_attacked + a.n_faulty > cfg.n_agents:
        problems.append("more compromised agents than agents")
    if a.n_attacked < 0 or a.n_faulty < 0:
        problems.append("compromised agent counts must be non-negative")
    if a.rate <= 0:
        problems.append("attack.rate must be positive")
    if a.noise_scale <= 1:
        problems.append("attack.noise_scale must exceed 1")
    return problems
