"""Zero-shot transfer proxy: replay a frozen policy in a perturbed-dynamics
world (actuation delay, speed-tracking lag, observation delay, geometry
scaling, sensor dropout, an explicit yield rule at the northern entry) and
produce the three-case comparison report.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import policy as policy_mod
from .engine import World, make_streams
from .env import (NON_AV_PAD, NON_AV_SLOTS, EnvConfig, NoiseConfig, RlQueues,
                  assign_actions, build_observation, compute_reward,
                  finish_metrics, inject_state_noise)
from .network import NORTH, WEST, RoadNetwork, build_network

CASE_BASELINE = "BASELINE"
CASE_RL_NOISE_FREE = "RL_NOISE_FREE"
CASE_RL_NOISE_TRAINED = "RL_NOISE_TRAINED"
CASES = (CASE_BASELINE, CASE_RL_NOISE_FREE, CASE_RL_NOISE_TRAINED)


@dataclass(frozen=True)
class PerturbationProfile:
    """Stand-in for the unquantified gap between the nominal simulator and a
    physical deployment; defaults are illustrative, not measured values."""
    actuation_delay_steps: int = 2
    speed_tracking_time_constant: float = 1.5   # first-order lag, seconds
    observation_delay_steps: int = 1
    geometry_scale_error: float = 0.05          # one uniform +-fraction per trial
    sensor_dropout_prob: float = 0.05           # per non-AV slot, per step
    yield_gap: float = 12.0                     # conflict window at the north merge [m]

    @classmethod
    def zero(cls):
        return cls(0, 0.0, 0, 0.0, 0.0, 0.0)


@dataclass
class EvalReport:
    case: str
    avg_velocity: float
    avg_travel_time: float
    max_travel_time: float
    collision_count: int
    trials: int
    collision_trials: int


def yield_controller(vehicle, world: World, yield_gap: float = 12.0) -> bool:
    """True when a vehicle waiting at the northern ring entry may proceed:
    no ring vehicle inside the conflict window (within yield_gap upstream of
    the merge point, or still straddling it)."""
    net = world.net
    merge = net.merge_ring_coordinate(NORTH)
    ring_len = net.ring_circumference
    for v in world.active():
        if v.id == vehicle.id or not net.on_roundabout(v.route, v.progress):
            continue
        upstream = (merge - net.ring_coordinate(v.route, v.progress)) % ring_len
        if upstream <= yield_gap or upstream >= ring_len - v.length:
            return False
    return True


class _YieldGate:
    """Velocity gate pinning blocked northern vehicles to the entry line.

    The stop envelope targets a standoff short of the junction so that with a
    coarse timestep a waiting nose cannot creep into the circulating lane."""

    STANDOFF = 2.0

    def __init__(self, yield_gap: float):
        self.yield_gap = yield_gap
        self._cached_time = None
        self._clear = True

    def __call__(self, world: World, veh, v: float) -> float:
        if veh.route != NORTH or world.net.segment_pos(veh.route, veh.progress) != 0:
            return v
        if world.time != self._cached_time:
            self._cached_time = world.time
            self._clear = yield_controller(veh, world, self.yield_gap)
        if self._clear:
            return v
        dist = world.net.entry_lengths[NORTH] - self.STANDOFF - veh.progress
        brake = abs(world.limits.a_min)
        bd = brake * world.limits.dt
        allow = -bd + math.sqrt(bd * bd + 2.0 * brake * max(dist, 0.0))
        return min(v, allow)


def _speed_lag(time_constant: float):
    if time_constant <= 0.0:
        return None

    def lag(world, veh, v_cmd):
        return veh.velocity + (world.limits.dt / time_constant) * (v_cmd - veh.velocity)

    return lag


def apply_sensor_dropout(obs: np.ndarray, prob: float, rng) -> np.ndarray:
    """Replace randomly chosen non-AV slots by their padding value."""
    if prob <= 0.0:
        return obs
    out = obs.copy()
    mask = rng.random(NON_AV_SLOTS.shape[0]) < prob
    out[NON_AV_SLOTS[mask]] = NON_AV_PAD[mask]
    return out


def perturbed_network(env_cfg: EnvConfig, profile: PerturbationProfile, rng) -> RoadNetwork:
    """Rescale every segment once per trial by (1 + e*u), u ~ U[-1, 1]."""
    factor = 1.0 + profile.geometry_scale_error * rng.uniform(-1.0, 1.0)
    lengths = {sid: seg.length * factor for sid, seg in env_cfg.net.segments.items()}
    succ = {sid: seg.successors for sid, seg in env_cfg.net.segments.items()}
    routes = {rid: r.segments for rid, r in env_cfg.net.routes.items()}
    return build_network(lengths, succ, routes, env_cfg.net.roundabout_ids)


def run_perturbed_episode(policy, env_cfg: EnvConfig, profile: PerturbationProfile,
                          seed, max_steps: int, sample_actions: bool = False,
                          record_log: bool = True):
    """One trial under the perturbation profile.

    State/action noise injection stays off (it is a training device); the
    policy acts through its mean unless sample_actions is set.  The trial runs
    the single-wave platoon scenario until every vehicle has exited or
    max_steps elapse; collisions freeze the vehicles involved but do not end
    the trial, so pile-ups are priced into the travel times.
    """
    streams = make_streams(seed)
    net = perturbed_network(env_cfg, profile, streams["perturb"])
    world = World(net, env_cfg.idm, env_cfg.limits, env_cfg.platoons,
                  spawn_period=math.inf, streams=streams,
                  stochastic_speed=env_cfg.stochastic_speed,
                  vehicle_length=env_cfg.vehicle_length, record_log=record_log,
                  speed_filter=_speed_lag(profile.speed_tracking_time_constant),
                  entry_gate=_YieldGate(profile.yield_gap) if profile.yield_gap > 0 else None)
    queues = RlQueues()
    queues.sync(world)
    no_noise = NoiseConfig(enabled=False)

    action_buffer = deque([np.zeros(2)] * profile.actuation_delay_steps)
    obs_buffer = deque()
    rewards = []
    vel_sum, vel_count = 0.0, 0

    for _ in range(max_steps):
        if policy is not None:
            obs = build_observation(world, queues, env_cfg.scales)
            obs = apply_sensor_dropout(obs, profile.sensor_dropout_prob, streams["perturb"])
            if not obs_buffer:
                obs_buffer.extend([obs] * (profile.observation_delay_steps + 1))
            else:
                obs_buffer.append(obs)
            served = obs_buffer.popleft()
            dist = policy_mod.forward(policy, served)
            if sample_actions:
                raw = dist.mean + dist.std * streams["policy"].standard_normal(2)
            else:
                raw = dist.mean.copy()
            action_buffer.append(raw)
            delayed = action_buffer.popleft()
            actions = assign_actions(delayed, queues, no_noise, streams["action"],
                                     env_cfg.limits)
        else:
            actions = {}
        world.step(actions)
        queues.sync(world)
        rewards.append(compute_reward(world, env_cfg.reward))
        for v in world.active():
            vel_sum += v.velocity
            vel_count += 1
        if not world.present():
            break

    metrics = finish_metrics(world, rewards, vel_sum, vel_count, world.time, False)
    return metrics, world


def evaluate(case: str, policy_path, profile: PerturbationProfile, trials: int,
             seed: int, env_cfg: EnvConfig, max_steps: int = 500,
             sample_actions: bool = False):
    """Run one of the three comparison cases and average over trials.

    Trial seeds depend only on (seed, trial), so the cases see paired
    perturbation draws.  Returns (EvalReport, per-trial (metrics, world)).
    """
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    policy = None
    if case != CASE_BASELINE:
        if policy_path is None:
            raise ValueError(f"case {case} needs a policy file")
        policy = policy_mod.load_params(policy_path)
    # The placement protocol is deterministic (fixed platoons, stationary,
    # fixed order); trial-to-trial variability comes from the driver model and
    # the perturbation draws, which are paired across cases via (seed, trial).
    results = []
    for trial in range(trials):
        metrics, world = run_perturbed_episode(policy, env_cfg, profile,
                                               (seed, trial), max_steps,
                                               sample_actions=sample_actions)
        results.append((metrics, world))
    report = EvalReport(
        case=case,
        avg_velocity=float(np.mean([m.avg_velocity for m, _ in results])),
        avg_travel_time=float(np.mean([m.avg_travel_time for m, _ in results])),
        max_travel_time=float(np.mean([m.max_travel_time for m, _ in results])),
        collision_count=sum(m.collisions for m, _ in results),
        trials=trials,
        collision_trials=sum(1 for m, _ in results if m.collisions > 0),
    )
    return report, results


def metering_score(trajectory_log, net: RoadNetwork, gap_threshold: float = 4.0,
                   vehicle_length: float = 5.0, dt: float = 1.0) -> float:
    """Total time during which a northern and a western vehicle occupy the
    shared merge arc within `gap_threshold` (bumper-to-bumper) of each other.
    Zero under perfect metering."""
    lo, hi = net.shared_ring_span()
    by_time: dict[float, dict[str, list[float]]] = {}
    for row in trajectory_log:
        if lo <= row.position_1d < hi:
            by_time.setdefault(row.time, {}).setdefault(row.route, []).append(row.position_1d)
    overlap = 0.0
    for groups in by_time.values():
        north = groups.get(NORTH)
        west = groups.get(WEST)
        if not north or not west:
            continue
        gap = min(abs(pn - pw) for pn in north for pw in west) - vehicle_length
        if gap < gap_threshold:
            overlap += dt
    return overlap
