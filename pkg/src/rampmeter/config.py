"""Run configuration: JSON on disk, validated dataclasses in memory.

The file is a nested JSON object whose keys mirror RunConfig's fields; an
empty file means "all defaults".  Unknown keys are rejected, every numeric
field is range-checked, and the effective configuration is dumped next to the
outputs so a run can be reproduced from (dump, seed) alone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .dynamics import IdmParams, SimLimits
from .engine import PlatoonSpec
from .env import EnvConfig, NoiseConfig, NormalizationScales, RewardConfig
from .network import NORTH, WEST, default_network, network_from_dict
from .transfer import PerturbationProfile
from .trpo import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    idm: IdmParams = field(default_factory=IdmParams)
    limits: SimLimits = field(default_factory=SimLimits)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    perturbation: PerturbationProfile = field(default_factory=PerturbationProfile)
    scales: NormalizationScales = field(default_factory=NormalizationScales)
    platoon_west: PlatoonSpec = field(default_factory=lambda: PlatoonSpec(size=4))
    platoon_north: PlatoonSpec = field(default_factory=lambda: PlatoonSpec(size=3))
    spawn_period: float = 72.0
    stochastic_speed: bool = True
    vehicle_length: float = 5.0
    network: dict | None = None     # geometry overrides; None = built-in default
    output_dir: str = "runs"
    master_seed: int = 0

    def build_network(self):
        return network_from_dict(self.network) if self.network else default_network()

    def env(self) -> EnvConfig:
        return EnvConfig(
            net=self.build_network(),
            idm=self.idm,
            limits=self.limits,
            platoons={WEST: self.platoon_west, NORTH: self.platoon_north},
            spawn_period=self.spawn_period,
            stochastic_speed=self.stochastic_speed,
            noise=self.noise,
            reward=self.reward,
            scales=self.scales,
            vehicle_length=self.vehicle_length,
        )


def _coerce(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be an object")
    sub_types = {
        "idm": IdmParams, "limits": SimLimits, "noise": NoiseConfig,
        "reward": RewardConfig, "train": TrainConfig,
        "perturbation": PerturbationProfile, "scales": NormalizationScales,
        "platoon_west": PlatoonSpec, "platoon_north": PlatoonSpec,
    }
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}")
    kwargs = {}
    train_raw = data.get("train", {})
    for name, value in data.items():
        if name in sub_types:
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: must be an object")
            kwargs[name] = _coerce(sub_types[name], value, name)
        else:
            kwargs[name] = value
    cfg = RunConfig(**kwargs)
    # The run seed is authoritative unless the train section pins its own.
    if "master_seed" not in train_raw:
        cfg.train = dataclasses.replace(cfg.train, master_seed=cfg.master_seed)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return config_from_dict({})
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def dump_effective(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check(cond: bool, where: str, why: str):
    if not cond:
        raise ConfigError(f"{where}: {why}")


def validate(cfg: RunConfig) -> None:
    idm, lim, tr = cfg.idm, cfg.limits, cfg.train
    for name in ("T", "a", "b", "s0", "v0"):
        _check(getattr(idm, name) > 0, f"idm.{name}", "must be > 0")
    _check(idm.delta >= 1, "idm.delta", "must be >= 1")
    _check(idm.accel_noise_std >= 0, "idm.accel_noise_std", "must be >= 0")
    _check(lim.a_min < 0 < lim.a_max, "limits.a_min/a_max", "need a_min < 0 < a_max")
    _check(lim.v_max > 0, "limits.v_max", "must be > 0")
    _check(lim.dt > 0, "limits.dt", "must be > 0")
    _check(cfg.noise.std >= 0, "noise.std", "must be >= 0")
    _check(cfg.reward.v_max > 0, "reward.v_max", "must be > 0")
    _check(cfg.reward.slow_threshold > 0, "reward.slow_threshold", "must be > 0")
    _check(0 < tr.discount <= 1, "train.discount", "must be in (0, 1]")
    _check(tr.kl_limit > 0, "train.kl_limit", "must be > 0")
    _check(tr.horizon >= 1, "train.horizon", "must be >= 1")
    _check(tr.batch_size >= tr.horizon, "train.batch_size", "must be >= horizon")
    _check(tr.iterations >= 0, "train.iterations", "must be >= 0")
    _check(tr.cg_iters >= 1, "train.cg_iters", "must be >= 1")
    _check(tr.cg_damping >= 0, "train.cg_damping", "must be >= 0")
    _check(0 < tr.backtrack_ratio < 1, "train.backtrack_ratio", "must be in (0, 1)")
    _check(tr.max_backtracks >= 1, "train.max_backtracks", "must be >= 1")
    _check(tr.baseline_ridge > 0, "train.baseline_ridge", "must be > 0")
    _check(tr.workers >= 1, "train.workers", "must be >= 1")
    for name, spec in (("platoon_west", cfg.platoon_west), ("platoon_north", cfg.platoon_north)):
        _check(spec.size >= 0, f"{name}.size", "must be >= 0")
        if spec.size:
            _check(spec.spawn_gap > idm.s0, f"{name}.spawn_gap", "must be > idm.s0")
            _check(spec.spawn_speed >= 0, f"{name}.spawn_speed", "must be >= 0")
    _check(cfg.spawn_period > 0, "spawn_period", "must be > 0")
    _check(cfg.vehicle_length > 0, "vehicle_length", "must be > 0")
    p = cfg.perturbation
    _check(p.actuation_delay_steps >= 0, "perturbation.actuation_delay_steps", "must be >= 0")
    _check(p.observation_delay_steps >= 0, "perturbation.observation_delay_steps", "must be >= 0")
    _check(p.speed_tracking_time_constant >= 0, "perturbation.speed_tracking_time_constant",
           "must be >= 0")
    _check(p.geometry_scale_error >= 0, "perturbation.geometry_scale_error", "must be >= 0")
    _check(0 <= p.sensor_dropout_prob <= 1, "perturbation.sensor_dropout_prob",
           "must be in [0, 1]")
    _check(p.yield_gap >= 0, "perturbation.yield_gap", "must be >= 0")
    for name in ("position", "north_entry_distance", "west_entry_distance",
                 "velocity", "queue_north", "queue_west"):
        _check(getattr(cfg.scales, name) > 0, f"scales.{name}", "must be > 0")
    if cfg.network is not None:
        cfg.build_network()   # raises NetworkError on a bad geometry spec
