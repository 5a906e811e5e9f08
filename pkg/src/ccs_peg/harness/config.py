"""Scenario configuration: YAML document -> validated frozen dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..controllers import SteadyStateCriteria
from ..strategy import SpeedModulation, StrategyParams, coverage_bound
from ..synthesis import SynthesisSpec
from ..world import MATERIALS, Geometry, Material, WorldConfig


class ConfigError(ValueError):
    pass


CONTROLLER_KINDS = ("ccs", "int_s", "int_h")


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "ccs"
    ccs_path: Optional[str] = None  # exported design; synthesized on demand if absent
    clamp: float = 0.5  # mm per step
    int_h_gain_margin: float = 2.0
    int_h_stiffness: float = 100.0
    synthesis: SynthesisSpec = SynthesisSpec()


@dataclass(frozen=True)
class TrialPlan:
    materials: tuple = ("rubber", "abs", "pine", "aluminum")
    trials_per_material: int = 12
    offset_radius: float = 20.0  # mm
    master_seed: int = 2024
    global_timeout: float = 120.0  # s
    workers: int = 1


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldConfig = WorldConfig()
    materials: dict = field(default_factory=lambda: dict(MATERIALS))
    controller: ControllerConfig = ControllerConfig()
    strategy: StrategyParams = StrategyParams()
    plan: TrialPlan = TrialPlan()

    def material(self, name: str) -> Material:
        try:
            return self.materials[name]
        except KeyError:
            raise ConfigError(f"unknown material {name!r}") from None

    def to_dict(self) -> dict:
        return _plain(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_controller(self, kind: str) -> "ScenarioConfig":
        return dataclasses.replace(self, controller=dataclasses.replace(self.controller, kind=kind))

    def with_plan(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, plan=dataclasses.replace(self.plan, **kw))


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}.{name}")
        elif isinstance(current, tuple) and value is not None:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(doc: Optional[dict]) -> ScenarioConfig:
    doc = dict(doc or {})
    allowed = {"world", "materials", "controller", "strategy", "plan"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    world = _build(WorldConfig, doc.get("world"), "world")
    mats = dict(MATERIALS)
    for name, m in (doc.get("materials") or {}).items():
        base = _plain(MATERIALS[name]) if name in MATERIALS else {"name": name}
        base.update(m or {})
        base["name"] = name
        try:
            mats[name] = Material(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"materials.{name}: {exc}") from exc
    cfg = ScenarioConfig(world=world, materials=mats,
                         controller=_build(ControllerConfig, doc.get("controller"), "controller"),
                         strategy=_build(StrategyParams, doc.get("strategy"), "strategy"),
                         plan=_build(TrialPlan, doc.get("plan"), "plan"))
    validate_config(cfg)
    return cfg


def load_config(path) -> ScenarioConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def validate_config(cfg: ScenarioConfig) -> ScenarioConfig:
    c, p, s = cfg.controller, cfg.plan, cfg.strategy
    if c.kind not in CONTROLLER_KINDS:
        raise ConfigError(f"controller.kind must be one of {CONTROLLER_KINDS}")
    if c.clamp <= 0:
        raise ConfigError("controller.clamp must be positive")
    if p.trials_per_material < 1:
        raise ConfigError("plan.trials_per_material must be >= 1")
    if not p.materials:
        raise ConfigError("plan.materials must not be empty")
    for m in p.materials:
        cfg.material(m)
    if p.offset_radius < 0:
        raise ConfigError("plan.offset_radius must be >= 0")
    # the spiral must be able to sweep the whole start disk within one state timeout
    theta = coverage_bound(p.offset_radius, s.pitch)
    b = s.pitch / (2 * math.pi)
    arc = 0.5 * b * (theta * math.sqrt(theta * theta + 1) + math.asinh(theta))
    if arc / s.speed.v_max > s.state_timeout:
        raise ConfigError("plan.offset_radius exceeds what the spiral covers before the "
                          "search state times out")
    if p.global_timeout <= 0:
        raise ConfigError("plan.global_timeout must be positive")
    if p.workers < 1:
        raise ConfigError("plan.workers must be >= 1")
    if s.hole_threshold <= 6 * cfg.world.sigma_position:
        raise ConfigError("strategy.hole_threshold must exceed six position-noise sigmas")
    return cfg


def default_config() -> ScenarioConfig:
    return ScenarioConfig()


def dump_default_yaml() -> str:
    return yaml.safe_dump(default_config().to_dict(), sort_keys=False)
