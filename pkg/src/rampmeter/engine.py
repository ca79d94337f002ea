"""Discrete-time world stepper: platoon spawning, control dispatch, merge
ordering, collision detection, retirement, and trajectory recording.

Leader resolution is geometric: a vehicle follows the nearest vehicle ahead
(in frame coordinates) whose current segment lies on its own remaining path.
Entry approaches of different routes are mutually invisible, so a vehicle
merging onto the ring does not yield to circulating traffic that has not yet
reached a shared segment -- merges are blind, which is what makes collisions
possible at the junction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import (CONTROLLER_IDM, CONTROLLER_RL, IdmParams, SimLimits,
                       VehicleState, sample_desired_speed)
from .network import NORTH, ROUTE_IDS, WEST, RoadNetwork


@dataclass(frozen=True)
class PlatoonSpec:
    """One spawn wave on one route; the leader is the RL-capable slot."""
    size: int
    leader_rl_capable: bool = True
    spawn_gap: float = 5.0    # bumper-to-bumper gap between staged vehicles [m]
    spawn_speed: float = 0.0


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    follower_id: str
    leader_id: str
    gap: float


@dataclass
class TrajectoryRow:
    time: float
    vehicle_id: str
    route: str
    position_1d: float
    velocity: float
    controller: str


def make_streams(seed_entropy, names=("idm", "speed", "state", "action", "policy", "perturb")):
    """Independent named RNG streams derived from one entropy tuple."""
    if isinstance(seed_entropy, int):
        seed_entropy = (seed_entropy,)
    return {name: np.random.default_rng(np.random.SeedSequence(list(seed_entropy) + [i]))
            for i, name in enumerate(names)}


class World:
    """Mutable state of one rollout; single-threaded, one instance per worker."""

    def __init__(self, net: RoadNetwork, idm: IdmParams, limits: SimLimits,
                 platoons: dict[str, PlatoonSpec], spawn_period: float,
                 streams: dict, stochastic_speed: bool = True,
                 vehicle_length: float = 5.0, record_log: bool = False,
                 speed_filter=None, entry_gate=None):
        self.net = net
        self.idm = idm
        self.limits = limits
        self.platoons = platoons
        self.spawn_period = spawn_period
        self.stochastic_speed = stochastic_speed
        self.vehicle_length = vehicle_length
        self.record_log = record_log
        self.speed_filter = speed_filter    # (world, vehicle, v_cmd) -> realized velocity
        self.entry_gate = entry_gate        # (world, vehicle, v) -> gated velocity

        self.time = 0.0
        self.vehicles: dict[str, VehicleState] = {}
        self.events: list[CollisionEvent] = []
        self.log: list[TrajectoryRow] = []
        self.spawned = 0
        self._wave = 0
        self._rng_idm = streams["idm"]
        self._rng_speed = streams["speed"]

        self._spawn_wave()
        self._next_spawn = self.spawn_period
        self._log_active()

    # -- bookkeeping ------------------------------------------------------------

    def present(self):
        return [v for v in self.vehicles.values() if v.exited_at is None]

    def active(self):
        return [v for v in self.vehicles.values()
                if v.entered_at is not None and v.exited_at is None]

    def staged_count(self, route_id: str) -> int:
        return sum(1 for v in self.vehicles.values()
                   if v.route == route_id and v.entered_at is None and v.exited_at is None)

    def exited(self):
        return [v for v in self.vehicles.values() if v.exited_at is not None]

    def frame_of(self, veh: VehicleState) -> float:
        return self.net.frame(veh.route, veh.progress)

    # -- spawning ---------------------------------------------------------------

    def _spawn_wave(self):
        for route_id in ROUTE_IDS:
            spec = self.platoons.get(route_id)
            if spec is None or spec.size < 1:
                continue
            spacing = spec.spawn_gap + self.vehicle_length
            clearance = self.idm.s0 + spec.spawn_gap
            rears = [v.progress - v.length for v in self.vehicles.values()
                     if v.route == route_id and v.exited_at is None]
            front = 0.0
            if rears and min(rears) < clearance:
                # Origin occupied: hold the whole platoon behind the rearmost vehicle.
                front = min(rears) - clearance
            for k in range(spec.size):
                rl = spec.leader_rl_capable and k == 0
                if self.stochastic_speed:
                    v0 = min(self.idm.v0,
                             sample_desired_speed(self.limits.v_max, self._rng_speed))
                else:
                    v0 = self.idm.v0
                veh = VehicleState(
                    id=f"{route_id}_{self._wave}_{k}",
                    route=route_id,
                    progress=front - k * spacing,
                    velocity=spec.spawn_speed,
                    controller=CONTROLLER_RL if rl else CONTROLLER_IDM,
                    length=self.vehicle_length,
                    desired_speed=v0,
                )
                if veh.progress >= 0.0:
                    veh.entered_at = self.time
                self.vehicles[veh.id] = veh
                self.spawned += 1
        self._wave += 1

    # -- leader resolution --------------------------------------------------------

    def _resolve_arrays(self, vehs):
        n = len(vehs)
        frame = np.empty(n)
        seg_bit = np.empty(n, dtype=np.uint64)
        path_mask = np.empty(n, dtype=np.uint64)
        length = np.empty(n)
        seg_start = np.empty(n)
        rear_bit = np.empty(n, dtype=np.uint64)
        velocity = np.empty(n)
        net = self.net
        for i, v in enumerate(vehs):
            route = net.routes[v.route]
            pos = net.segment_pos(v.route, v.progress)
            frame[i] = route.frame_offset + v.progress
            seg_bit[i] = 1 << net.seg_index(route.segments[pos])
            path_mask[i] = route.suffix_masks[pos]
            length[i] = v.length
            seg_start[i] = route.frame_offset + route.starts[pos]
            rear_pos = net.segment_pos(v.route, v.progress - v.length)
            rear_bit[i] = 1 << net.seg_index(route.segments[rear_pos])
            velocity[i] = v.velocity
        leader = np.empty(n, dtype=np.int64)
        gap = np.empty(n)
        lead_v = np.empty(n)
        kernels.resolve_leaders(frame, seg_bit, path_mask, length, seg_start,
                                rear_bit, velocity, leader, gap, lead_v)
        return frame, seg_bit, path_mask, leader, gap, lead_v

    def resolve_state(self):
        """One leader-resolution pass over every present vehicle, for callers
        that need several queries per step (observation building)."""
        vehs = self.present()
        frame, seg_bit, path_mask, leader, gap, lead_v = self._resolve_arrays(vehs)
        return vehs, frame, seg_bit, path_mask, leader, gap, lead_v

    def leader_of(self, vehicle_id: str):
        """(leader VehicleState, bumper gap) for the nearest vehicle ahead on the
        remaining path, or None on a free road."""
        vehs = self.present()
        idx = next(i for i, v in enumerate(vehs) if v.id == vehicle_id)
        _, _, _, leader, gap, _ = self._resolve_arrays(vehs)
        if leader[idx] < 0:
            return None
        return vehs[leader[idx]], float(gap[idx])

    def follower_of(self, vehicle_id: str):
        """(follower VehicleState, bumper gap behind ego), or None."""
        ego = self.vehicles[vehicle_id]
        net = self.net
        ego_seg = net.segment_at(ego.route, ego.progress)
        ego_bit = 1 << net.seg_index(ego_seg)
        ego_frame = self.frame_of(ego)
        best, best_d = None, math.inf
        for w in self.present():
            if w.id == vehicle_id:
                continue
            route = net.routes[w.route]
            mask = route.suffix_masks[net.segment_pos(w.route, w.progress)]
            if not mask & ego_bit:
                continue
            d = ego_frame - self.frame_of(w)
            if 0.0 < d < best_d:
                best, best_d = w, d
        if best is None:
            return None
        return best, best_d - ego.length

    # -- stepping ---------------------------------------------------------------

    def step(self, rl_actions: dict[str, float] | None = None) -> list[CollisionEvent]:
        rl_actions = rl_actions or {}
        idm, limits = self.idm, self.limits
        dt, v_max = limits.dt, limits.v_max
        brake = abs(limits.a_min)

        vehs = self.present()
        pre_frame, pre_bit, pre_mask, leader, gap, lead_v = self._resolve_arrays(vehs)
        new_v = {}
        for i, v in enumerate(vehs):
            if v.collided:
                continue
            action = rl_actions.get(v.id)
            if action is not None:
                vv = v.velocity + action * dt
                if vv > v_max:
                    vv = v_max
            else:
                li = leader[i]
                if li < 0:
                    acc = kernels.idm_accel_free(v.velocity, v.desired_speed,
                                                 idm.a, idm.delta)
                    cap = v_max
                elif gap[i] <= 0.0:
                    # Overlapping before the collision scan has fired; stop dead.
                    acc, cap = 0.0, 0.0
                else:
                    acc = kernels.idm_accel(v.velocity, lead_v[i], gap[i],
                                            v.desired_speed, idm.T, idm.a, idm.b,
                                            idm.delta, idm.s0)
                    cap = kernels.safe_velocity(gap[i], lead_v[i], brake,
                                                dt, idm.s0, v_max)
                    if cap > v_max:
                        cap = v_max
                if idm.accel_noise_std > 0.0:
                    acc += idm.accel_noise_std * self._rng_idm.standard_normal()
                vv = v.velocity + acc * dt
                if vv > cap:
                    vv = cap
            if vv < 0.0:
                vv = 0.0
            if self.speed_filter is not None:
                vv = self.speed_filter(self, v, vv)
            if self.entry_gate is not None:
                vv = self.entry_gate(self, v, vv)
            new_v[v.id] = vv

        self.time += dt
        pre_prog = {v.id: v.progress for v in vehs}
        for v in vehs:
            if v.collided:
                continue
            v.velocity = new_v[v.id]
            v.progress += v.velocity * dt

        visible_pre = {}
        for i, v in enumerate(vehs):
            visible_pre[v.id] = (pre_mask[i], pre_frame[i])
        step_events = self._resolve_overlaps(vehs, visible_pre, pre_bit, pre_prog)

        for v in vehs:
            if v.collided:
                continue
            if v.entered_at is None and v.progress >= 0.0:
                v.entered_at = self.time
            if v.progress >= self.net.routes[v.route].total_length:
                v.exited_at = self.time

        while self.time >= self._next_spawn - 1e-9:
            self._spawn_wave()
            self._next_spawn += self.spawn_period

        self._log_active()
        return step_events

    # Minimum bumper gap granted to a vehicle slotted in behind a leader it
    # could not see before the step (same-step junction crossings).
    INSERT_GAP = 0.5

    def _resolve_overlaps(self, vehs, visible_pre, pre_bit, pre_prog) -> list[CollisionEvent]:
        """Zipper rule for merges plus collision detection.

        Two vehicles crossing the merge point within the same step can land
        overlapping even though a continuous-time trajectory would order them.
        Such a pair is re-ordered: the trailing vehicle is slotted in behind
        the one that landed ahead, but never behind its own pre-step position.
        An overlap with a vehicle that was already visible before the step, or
        one that persists even at the pre-step position, is a genuine
        collision: both vehicles freeze in place and the event propagates.
        """
        out = []
        index = {v.id: k for k, v in enumerate(vehs)}
        dt = self.limits.dt

        def collide(v, lead, gap_value):
            out.append(CollisionEvent(self.time, v.id, lead.id, float(gap_value)))
            v.collided = True
            v.velocity = 0.0
            lead.collided = True
            lead.velocity = 0.0

        for _ in range(16):
            frame, _, _, leader, gap, _ = self._resolve_arrays(vehs)
            violations = [i for i in range(len(vehs))
                          if leader[i] >= 0 and not vehs[i].collided and gap[i] <= 0.0]
            if not violations:
                break
            violations.sort(key=lambda k: -frame[k])
            changed = False
            for i in violations:
                v = vehs[i]
                lead = vehs[leader[i]]
                if v.collided or lead.collided:
                    continue
                mask, f_pre = visible_pre[v.id]
                could_see = bool(int(mask) & int(pre_bit[index[lead.id]])) and \
                    visible_pre[lead.id][1] > f_pre
                if could_see:
                    collide(v, lead, gap[i])
                    changed = True
                    continue
                offset = self.net.routes[v.route].frame_offset
                target = max(frame[i] + gap[i] - self.INSERT_GAP - offset,
                             pre_prog[v.id])
                if target < v.progress - 1e-12:
                    # Slot in behind; the effective gap is rechecked next round
                    # (it is not linear in position across a junction line).
                    v.velocity = max((target - pre_prog[v.id]) / dt, 0.0)
                    v.progress = target
                    changed = True
            if not changed:
                # Nothing left to clamp: the remaining overlaps are physical.
                for i in violations:
                    if not vehs[i].collided and not vehs[leader[i]].collided:
                        collide(vehs[i], vehs[leader[i]], gap[i])
                break
        self.events.extend(out)
        return out

    def _log_active(self):
        if not self.record_log:
            return
        for v in self.active():
            self.log.append(TrajectoryRow(self.time, v.id, v.route,
                                          self.frame_of(v), v.velocity, v.controller))
