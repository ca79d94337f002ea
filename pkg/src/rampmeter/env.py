"""POMDP wrapper around the world stepper: observation construction and
normalization, control queues, action noise and clipping, reward, and the
episode lifecycle.

Observation layout (54 scalars, all normalized then clipped to [-1, 1]):

    [ 0: 2)  controlled-AV frame positions          (north slot, west slot)
    [ 2: 4)  controlled-AV velocities
    [ 4:10)  north entry: distances to the ring of the 6 nearest vehicles
    [10:16)  west entry:  distances to the ring of the 6 nearest vehicles
    [16:22)  north entry: velocities of those vehicles
    [22:28)  west entry:  velocities of those vehicles
    [28:30)  AV headways   (distance slots)
    [30:32)  AV tailways   (distance slots)
    [32:34)  waiting-vehicle counts per entry       (north, west)
    [34:44)  ring vehicles: frame positions, ascending, up to 10
    [44:54)  ring vehicles: velocities, same order

Absent distance slots pad to 1.0 (maximally far); absent position/velocity
slots pad to 0.0.  The layout is versioned via OBS_LAYOUT_VERSION.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import CONTROLLER_RL, IdmParams, SimLimits
from .engine import PlatoonSpec, World, make_streams
from .network import NORTH, WEST, RoadNetwork, default_network
from . import policy as policy_mod

OBS_DIM = 54
OBS_LAYOUT_VERSION = 1

SL_AV_POS = slice(0, 2)
SL_AV_VEL = slice(2, 4)
SL_N_DIST = slice(4, 10)
SL_W_DIST = slice(10, 16)
SL_N_VEL = slice(16, 22)
SL_W_VEL = slice(22, 28)
SL_AV_HEAD = slice(28, 30)
SL_AV_TAIL = slice(30, 32)
SL_QUEUES = slice(32, 34)
SL_RING_POS = slice(34, 44)
SL_RING_VEL = slice(44, 54)

# Slots that read from infrastructure sensors rather than the AVs themselves,
# and the value each one pads (and drops out) to.
_dist_pad = np.zeros(OBS_DIM)
_dist_pad[SL_N_DIST] = 1.0
_dist_pad[SL_W_DIST] = 1.0
NON_AV_SLOTS = np.concatenate([np.arange(OBS_DIM)[s] for s in
                               (SL_N_DIST, SL_W_DIST, SL_N_VEL, SL_W_VEL,
                                SL_QUEUES, SL_RING_POS, SL_RING_VEL)])
NON_AV_PAD = _dist_pad[NON_AV_SLOTS]


@dataclass(frozen=True)
class NormalizationScales:
    """Divisors taking raw quantities into the [-1, 1] box; the defaults
    anchor the published perturbation magnitudes (reported std = 0.1 x scale)."""
    position: float = 443.0             # AV positions, headways, tailways, ring positions
    north_entry_distance: float = 74.3
    west_entry_distance: float = 86.6
    velocity: float = 15.0
    queue_north: float = 16.0
    queue_west: float = 19.0


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    std: float = 0.1     # normalized units for states; m/s^2 for actions


@dataclass(frozen=True)
class RewardConfig:
    v_max: float = 15.0
    standstill_weight: float = 1.5
    slow_threshold: float = 0.3


@dataclass
class EnvConfig:
    """Everything needed to build one rollout world plus its POMDP wrapper."""
    net: RoadNetwork = field(default_factory=default_network)
    idm: IdmParams = field(default_factory=IdmParams)
    limits: SimLimits = field(default_factory=SimLimits)
    platoons: dict = field(default_factory=lambda: {WEST: PlatoonSpec(size=4),
                                                    NORTH: PlatoonSpec(size=3)})
    spawn_period: float = 72.0
    stochastic_speed: bool = True
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    scales: NormalizationScales = field(default_factory=NormalizationScales)
    vehicle_length: float = 5.0


class RlQueues:
    """Per-entry FIFO of RL-capable vehicles in the system; only the front of
    each queue receives policy actions, ids pop when the vehicle exits."""

    def __init__(self):
        self._q = {NORTH: [], WEST: []}
        self._seen = set()

    def sync(self, world: World):
        for v in world.vehicles.values():
            if (v.controller == CONTROLLER_RL and v.entered_at is not None
                    and v.id not in self._seen):
                self._q[v.route].append(v.id)
                self._seen.add(v.id)
        for route in (NORTH, WEST):
            self._q[route] = [i for i in self._q[route]
                              if world.vehicles[i].exited_at is None]

    def front(self, route_id: str):
        q = self._q[route_id]
        return q[0] if q else None

    def ids(self, route_id: str):
        return tuple(self._q[route_id])


def build_observation(world: World, queues: RlQueues,
                      scales: NormalizationScales) -> np.ndarray:
    obs = np.zeros(OBS_DIM)
    obs[SL_N_DIST] = 1.0
    obs[SL_W_DIST] = 1.0
    obs[SL_AV_HEAD] = 1.0
    obs[SL_AV_TAIL] = 1.0

    net = world.net
    active = world.active()
    vehs, frame, seg_bit, path_mask, leader, gap, _ = world.resolve_state()
    index = {v.id: i for i, v in enumerate(vehs)}

    for k, route in enumerate((NORTH, WEST)):
        av_id = queues.front(route)
        if av_id is None:
            continue
        av = world.vehicles[av_id]
        i = index[av_id]
        obs[SL_AV_POS.start + k] = frame[i] / scales.position
        obs[SL_AV_VEL.start + k] = av.velocity / scales.velocity
        if leader[i] >= 0:
            obs[SL_AV_HEAD.start + k] = gap[i] / scales.position
        behind = (frame < frame[i]) & ((path_mask & seg_bit[i]) != 0)
        behind[i] = False
        if behind.any():
            tailway = frame[i] - av.length - frame[behind].max()
            obs[SL_AV_TAIL.start + k] = tailway / scales.position

    entry_scale = {NORTH: scales.north_entry_distance, WEST: scales.west_entry_distance}
    dist_slices = {NORTH: SL_N_DIST, WEST: SL_W_DIST}
    vel_slices = {NORTH: SL_N_VEL, WEST: SL_W_VEL}
    for qk, route in enumerate((NORTH, WEST)):
        on_entry = [(net.distance_to_roundabout(v.route, v.progress), v.velocity)
                    for v in active
                    if v.route == route and net.segment_pos(v.route, v.progress) == 0]
        on_entry.sort(key=lambda t: t[0])
        base_d = dist_slices[route].start
        base_v = vel_slices[route].start
        for i, (d, vel) in enumerate(on_entry[:6]):
            obs[base_d + i] = d / entry_scale[route]
            obs[base_v + i] = vel / scales.velocity
        waiting = sum(1 for d, vel in on_entry if vel < 0.3) + world.staged_count(route)
        scale = scales.queue_north if route == NORTH else scales.queue_west
        obs[SL_QUEUES.start + qk] = waiting / scale

    ring = [(world.frame_of(v), v.velocity) for v in active
            if net.on_roundabout(v.route, v.progress)]
    ring.sort(key=lambda t: t[0])
    for i, (pos, vel) in enumerate(ring[:10]):
        obs[SL_RING_POS.start + i] = pos / scales.position
        obs[SL_RING_VEL.start + i] = vel / scales.velocity

    np.clip(obs, -1.0, 1.0, out=obs)
    return obs


def inject_state_noise(obs: np.ndarray, noise: NoiseConfig, rng) -> np.ndarray:
    """i.i.d. Gaussian perturbation per element, then re-clip to the box."""
    if not noise.enabled:
        return obs
    noised = obs + rng.normal(0.0, noise.std, obs.shape)
    np.clip(noised, -1.0, 1.0, out=noised)
    return noised


def assign_actions(policy_output, queues: RlQueues, noise: NoiseConfig, rng,
                   limits: SimLimits) -> dict[str, float]:
    """Perturb, clip, and dispatch the 2-vector of accelerations: element 0 to
    the north-queue front, element 1 to the west-queue front.  Elements with
    no controllable vehicle are simply unused; all other RL-capable vehicles
    fall back to car-following control upstream."""
    a = np.asarray(policy_output, dtype=float).copy()
    if noise.enabled:
        a += rng.normal(0.0, noise.std, a.shape)
    np.clip(a, limits.a_min, limits.a_max, out=a)
    actions = {}
    for k, route in enumerate((NORTH, WEST)):
        front = queues.front(route)
        if front is not None:
            actions[front] = float(a[k])
    return actions


def compute_reward(world: World, cfg: RewardConfig) -> float:
    """Normalized L2 closeness of all system velocities to v_max, minus
    standstill and slow-travel penalties; at most 1.0 per step."""
    vels = [v.velocity for v in world.active()]
    n = len(vels)
    if n == 0:
        return 0.0
    dev = math.sqrt(sum((vi - cfg.v_max) ** 2 for vi in vels))
    norm = cfg.v_max * math.sqrt(n)
    base = max(norm - dev, 0.0) / norm
    pen_s = sum(1 for vi in vels if vi == 0.0)
    pen_p = sum(1 for vi in vels if vi < cfg.slow_threshold)
    return base - cfg.standstill_weight * pen_s - pen_p


@dataclass
class EpisodeMetrics:
    steps: int
    episode_return: float
    avg_velocity: float
    travel_times: tuple
    avg_travel_time: float
    max_travel_time: float
    collisions: int
    spawned: int
    completed: int
    terminated_early: bool


@dataclass
class Episode:
    observations: np.ndarray   # (T, 54), post-noise: what the policy saw
    actions: np.ndarray        # (T, 2), raw sampled actions (pre-noise/clip)
    rewards: np.ndarray        # (T,)
    terminated_early: bool


def finish_metrics(world: World, rewards, vel_sum, vel_count, horizon_end,
                   terminated_early) -> EpisodeMetrics:
    """Travel times of vehicles still in the system are censored at the end
    of the episode, so pile-ups show up in the averages instead of vanishing."""
    times = []
    completed = 0
    for v in world.vehicles.values():
        if v.entered_at is None:
            continue
        if v.exited_at is not None:
            times.append(v.exited_at - v.entered_at)
            completed += 1
        else:
            times.append(horizon_end - v.entered_at)
    return EpisodeMetrics(
        steps=len(rewards),
        episode_return=float(sum(rewards)),
        avg_velocity=vel_sum / vel_count if vel_count else 0.0,
        travel_times=tuple(times),
        avg_travel_time=sum(times) / len(times) if times else 0.0,
        max_travel_time=max(times) if times else 0.0,
        collisions=len(world.events),
        spawned=world.spawned,
        completed=completed,
        terminated_early=terminated_early,
    )


def run_episode(policy, env_cfg: EnvConfig, seed, horizon: int,
                deterministic: bool = False, record_log: bool = False,
                terminate_on_collision: bool = True):
    """Roll one episode; `policy` is PolicyParameters or None (all-IDM).

    Returns (Episode, EpisodeMetrics, World).  With a policy, each step builds
    the observation, perturbs it, samples the raw action from the policy
    Gaussian (or takes the mean when deterministic), then perturbs + clips the
    executed accelerations; the recorded pair is (noised observation, raw
    sampled action) so that policy likelihoods match what was sampled.
    """
    streams = make_streams(seed)
    world = World(env_cfg.net, env_cfg.idm, env_cfg.limits, env_cfg.platoons,
                  env_cfg.spawn_period, streams,
                  stochastic_speed=env_cfg.stochastic_speed,
                  vehicle_length=env_cfg.vehicle_length, record_log=record_log)
    queues = RlQueues()
    queues.sync(world)

    obs_list, act_list, rew_list = [], [], []
    vel_sum, vel_count = 0.0, 0
    terminated = False
    for _ in range(horizon):
        if policy is not None:
            obs = build_observation(world, queues, env_cfg.scales)
            obs = inject_state_noise(obs, env_cfg.noise, streams["state"])
            dist = policy_mod.forward(policy, obs)
            if deterministic:
                action = dist.mean.copy()
            else:
                action = dist.mean + dist.std * streams["policy"].standard_normal(2)
            if not np.all(np.isfinite(action)):
                raise ArithmeticError("policy produced a non-finite action; aborting episode")
            actions = assign_actions(action, queues, env_cfg.noise, streams["action"],
                                     env_cfg.limits)
            obs_list.append(obs)
            act_list.append(action)
        else:
            actions = {}
        events = world.step(actions)
        queues.sync(world)
        rew_list.append(compute_reward(world, env_cfg.reward))
        for v in world.active():
            vel_sum += v.velocity
            vel_count += 1
        if events and terminate_on_collision:
            terminated = True
            break

    episode = Episode(
        observations=np.array(obs_list) if obs_list else np.zeros((0, OBS_DIM)),
        actions=np.array(act_list) if act_list else np.zeros((0, 2)),
        rewards=np.array(rew_list),
        terminated_early=terminated,
    )
    metrics = finish_metrics(world, rew_list, vel_sum, vel_count, world.time, terminated)
    return episode, metrics, world
