"""Car-following dynamics: IDM acceleration, stochastic desired speed, the
safe-velocity supervisor, and the clipped Euler velocity updates."""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import kernels

CONTROLLER_IDM = "idm"
CONTROLLER_RL = "rl"


@dataclass(frozen=True)
class IdmParams:
    """IDM parameters: T safe time headway [s], a/b comfortable accel/decel
    [m/s^2], delta acceleration exponent, s0 linear jam distance [m], v0
    desired speed [m/s], accel_noise_std [m/s^2]."""
    T: float = 1.0
    a: float = 1.0
    b: float = 1.5
    delta: float = 4.0
    s0: float = 2.0
    v0: float = 30.0
    accel_noise_std: float = 0.1


@dataclass(frozen=True)
class SimLimits:
    a_max: float = 1.0
    a_min: float = -1.0
    v_max: float = 15.0
    dt: float = 1.0


@dataclass
class VehicleState:
    id: str
    route: str
    progress: float          # front-bumper arc length along the route; < 0 while staged
    velocity: float
    controller: str          # CONTROLLER_IDM or CONTROLLER_RL (capability, not per-step mode)
    length: float = 5.0
    desired_speed: float = 30.0
    entered_at: float | None = None
    exited_at: float | None = None
    collided: bool = False


def idm_accel(ego: VehicleState, headway: float, lead_velocity: float,
              params: IdmParams, rng=None) -> float:
    """IDM acceleration behind a leader at bumper-to-bumper distance `headway`.

    Adds a zero-mean Gaussian of std params.accel_noise_std when an rng is
    given.  A non-positive headway is a collision state and is the caller's
    problem; it is never silently clamped here.
    """
    if headway <= 0.0:
        raise ValueError(f"non-positive headway {headway}: collision state")
    acc = kernels.idm_accel(ego.velocity, lead_velocity, headway, ego.desired_speed,
                            params.T, params.a, params.b, params.delta, params.s0)
    if rng is not None and params.accel_noise_std > 0.0:
        acc += params.accel_noise_std * rng.standard_normal()
    return acc


def idm_accel_free(ego: VehicleState, params: IdmParams, rng=None) -> float:
    """Free-road IDM: no leader, so the interaction term is dropped."""
    acc = kernels.idm_accel_free(ego.velocity, ego.desired_speed, params.a, params.delta)
    if rng is not None and params.accel_noise_std > 0.0:
        acc += params.accel_noise_std * rng.standard_normal()
    return acc


def sample_desired_speed(speed_limit: float, rng, relative_std: float = 0.2,
                         floor_fraction: float = 0.1) -> float:
    """Gaussian desired speed around the limit, floored to stay positive."""
    if speed_limit <= 0.0:
        raise ValueError("speed_limit must be > 0")
    draw = rng.normal(speed_limit, relative_std * speed_limit)
    return max(draw, floor_fraction * speed_limit)


def safe_velocity(ego: VehicleState, headway: float, lead_velocity: float,
                  limits: SimLimits, s0: float = 2.0) -> float:
    """Largest speed that keeps the follower clear of a max-braking leader.

    One step of reaction delay, then braking at |a_min|; closed-form root of
    v*dt + v^2/(2B) <= max(headway - s0, 0) + v_lead^2/(2B).  Capped at v_max.
    """
    return kernels.safe_velocity(headway, lead_velocity, abs(limits.a_min),
                                 limits.dt, s0, limits.v_max)


def step_velocity_idm(ego: VehicleState, accel: float, limits: SimLimits,
                      headway: float = math.inf, lead_velocity: float = 0.0,
                      s0: float = 2.0) -> float:
    """Euler velocity update for car-following vehicles, capped by v_max and
    by the safe-velocity supervisor, floored at 0."""
    cap = min(limits.v_max,
              kernels.safe_velocity(headway, lead_velocity, abs(limits.a_min),
                                    limits.dt, s0, limits.v_max))
    v = ego.velocity + accel * limits.dt
    if v > cap:
        v = cap
    return v if v > 0.0 else 0.0


def step_velocity_av(ego: VehicleState, action_accel: float, limits: SimLimits) -> float:
    """Euler velocity update for policy-controlled vehicles: box to [0, v_max],
    no safe-velocity cap (the supervisor applies to car-following models only)."""
    v = ego.velocity + action_accel * limits.dt
    if v > limits.v_max:
        v = limits.v_max
    return v if v > 0.0 else 0.0
