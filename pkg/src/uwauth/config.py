"""Experiment configuration: JSON schema, validation and defaults.

See the README for the full key reference. Unknown keys are rejected by name
so typos never silently fall back to defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .channel import AttackerConfig, ROLE_ATTACKER, ROLE_LEGITIMATE, ScenarioConfig
from .errors import ConfigError
from .features import ALL_FEATURE_IDS
from .ggmix import EMConfig

THRESHOLD_MODES = ("knee", "trained", "fixed")
SCHEDULE_ORDERS = ("attacker_last", "attacker_first_after_reference")


@dataclass
class ScheduleConfig:
    legitimate_packets: int = 6
    attacker_packets: int = 1
    symbols_per_packet: int = 100
    order: str = "attacker_last"

    def pattern(self) -> list:
        if self.order == "attacker_last":
            return [ROLE_LEGITIMATE] * self.legitimate_packets + [
                ROLE_ATTACKER
            ] * self.attacker_packets
        # reference packet first, then the attacker, then the remaining
        # legitimate traffic
        return (
            [ROLE_LEGITIMATE]
            + [ROLE_ATTACKER] * self.attacker_packets
            + [ROLE_LEGITIMATE] * (self.legitimate_packets - 1)
        )

    def validate(self):
        if self.legitimate_packets < 1:
            raise ConfigError("schedule.legitimate_packets must be >= 1")
        if self.attacker_packets < 0:
            raise ConfigError("schedule.attacker_packets must be >= 0")
        if self.symbols_per_packet < 1:
            raise ConfigError("schedule.symbols_per_packet must be >= 1")
        if self.order not in SCHEDULE_ORDERS:
            raise ConfigError(
                f"schedule.order must be one of {SCHEDULE_ORDERS}, got {self.order!r}"
            )


@dataclass
class FeaturesConfig:
    set: tuple = (1, 4, 6)
    alpha: float = 0.5

    def validate(self):
        if not self.set:
            raise ConfigError("features.set must not be empty")
        bad = [f for f in self.set if f not in ALL_FEATURE_IDS]
        if bad:
            raise ConfigError(f"features.set contains unknown feature ids {bad}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("features.alpha must lie in (0, 1]")


@dataclass
class EMBlockConfig:
    tol: float = 1e-6
    max_iters: int = 100
    warm_start: bool = True
    max_restarts: int = 2
    mass_floor_per_packet: float = 1e-3

    def validate(self):
        if self.tol <= 0:
            raise ConfigError("em.tol must be > 0")
        if self.max_iters < 1:
            raise ConfigError("em.max_iters must be >= 1")
        if self.max_restarts < 0:
            raise ConfigError("em.max_restarts must be >= 0")
        if self.mass_floor_per_packet < 0:
            raise ConfigError("em.mass_floor_per_packet must be >= 0")

    def to_em_config(self) -> EMConfig:
        return EMConfig(
            tol=self.tol,
            max_iters=self.max_iters,
            mass_floor_per_packet=self.mass_floor_per_packet,
        )


@dataclass
class DecisionConfig:
    mode: str = "trained"
    knee_target_fn: float = 0.1
    knee_target_tp: float = 0.98
    fixed_lambda: float = 0.0
    use_zeta: bool = False

    def validate(self):
        if self.mode not in THRESHOLD_MODES:
            raise ConfigError(
                f"decision.mode must be one of {THRESHOLD_MODES}, got {self.mode!r}"
            )
        for key in ("knee_target_fn", "knee_target_tp"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"decision.{key} must lie in [0, 1]")
        if not math.isfinite(self.fixed_lambda):
            raise ConfigError("decision.fixed_lambda must be finite")


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    em: EMBlockConfig = field(default_factory=EMBlockConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    runs: int = 500
    master_seed: int = 12345
    fixed_topology: bool = False

    def validate(self):
        self.scenario.validate()
        self.schedule.validate()
        self.features.validate()
        self.em.validate()
        self.decision.validate()
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if self.attacker.x > self.scenario.n_trusted:
            raise ConfigError(
                f"attacker.x = {self.attacker.x} exceeds scenario.n_trusted = "
                f"{self.scenario.n_trusted}"
            )

    def as_dict(self) -> dict:
        out = asdict(self)
        out["features"]["set"] = list(self.features.set)
        for key in ("area_x", "area_y", "depth_range", "legit_position",
                    "attacker_position", "sink_position"):
            out["scenario"][key] = list(out["scenario"][key])
        return out


_TUPLE_SCENARIO_KEYS = {
    "area_x": 2,
    "area_y": 2,
    "depth_range": 2,
    "legit_position": 3,
    "attacker_position": 3,
    "sink_position": 3,
}


def _apply_block(obj, block: dict, block_name: str, tuple_keys=None):
    tuple_keys = tuple_keys or {}
    valid = set(vars(obj))
    for key, value in block.items():
        if key not in valid:
            raise ConfigError(f"unknown key {block_name}.{key}")
        if key in tuple_keys:
            if not isinstance(value, (list, tuple)) or len(value) != tuple_keys[key]:
                raise ConfigError(
                    f"{block_name}.{key} must be a list of {tuple_keys[key]} numbers"
                )
            value = tuple(float(v) for v in value)
        setattr(obj, key, value)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated config from a parsed JSON document."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a JSON object")
    cfg = ExperimentConfig()
    known_blocks = {
        "scenario": (cfg.scenario, _TUPLE_SCENARIO_KEYS),
        "schedule": (cfg.schedule, None),
        "features": (cfg.features, None),
        "em": (cfg.em, None),
        "decision": (cfg.decision, None),
    }
    for key, value in raw.items():
        if key in known_blocks:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a JSON object")
            obj, tk = known_blocks[key]
            _apply_block(obj, value, key, tk)
        elif key == "attacker":
            if not isinstance(value, dict):
                raise ConfigError("attacker must be a JSON object")
            unknown = set(value) - {"mode", "x", "estimation_error"}
            if unknown:
                raise ConfigError(f"unknown key attacker.{sorted(unknown)[0]}")
            cfg.attacker = AttackerConfig(
                mode=str(value.get("mode", "naive")),
                x=int(value.get("x", 0)),
                estimation_error=float(value.get("estimation_error", 0.1)),
            )
        elif key == "runs":
            cfg.runs = int(value)
        elif key == "master_seed":
            cfg.master_seed = int(value)
        elif key == "fixed_topology":
            cfg.fixed_topology = bool(value)
        else:
            raise ConfigError(f"unknown key {key}")
    if isinstance(cfg.features.set, list):
        cfg.features.set = tuple(int(f) for f in cfg.features.set)
    # One alpha drives both synthesis and extraction.
    cfg.scenario.power_smoothing_alpha = cfg.features.alpha
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Load, validate and default-fill an experiment configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)
