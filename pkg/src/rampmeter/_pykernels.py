"""Pure-Python fallback for the compiled hot-loop kernels (see _core.pyx)."""
import math

import numpy as np

BACKEND = "python"


def idm_accel(v, v_lead, headway, v0, T, a, b, delta, s0):
    follow = v * T + v * (v - v_lead) / (2.0 * math.sqrt(a * b))
    s_star = s0 + (follow if follow > 0.0 else 0.0)
    ratio = s_star / headway
    return a * (1.0 - (v / v0) ** delta - ratio * ratio)


def idm_accel_free(v, v0, a, delta):
    return a * (1.0 - (v / v0) ** delta)


def safe_velocity(headway, v_lead, brake, dt, s0, v_max):
    bd = brake * dt
    budget = headway - s0
    if budget < 0.0:
        budget = 0.0
    v = -bd + math.sqrt(bd * bd + v_lead * v_lead + 2.0 * brake * budget)
    return v if v < v_max else v_max


def resolve_leaders(frame, seg_bit, path_mask, length, seg_start, rear_bit,
                    velocity, out_leader, out_gap, out_lead_v):
    n = frame.shape[0]
    if n == 0:
        return
    visible = (path_mask[:, None] & seg_bit[None, :]) != 0
    dist = frame[None, :] - frame[:, None]
    dist = np.where(visible & (dist > 0.0), dist, np.inf)
    j = np.argmin(dist, axis=1)
    has = np.isfinite(dist[np.arange(n), j])
    rear = frame[j] - length[j]
    # A leader whose tail straddles back into a foreign approach blocks the
    # junction line itself until the tail clears.
    blocked = ((rear < seg_start[j]) & (seg_bit != seg_bit[j])
               & ((path_mask & rear_bit[j]) == 0))
    out_leader[:] = np.where(has, j, -1)
    out_gap[:] = np.where(has, np.where(blocked, seg_start[j], rear) - frame, np.inf)
    out_lead_v[:] = np.where(has & ~blocked, velocity[j], 0.0)


def mlp_forward(theta, sizes, obs, out_mean, buf_a=None, buf_b=None):
    h = obs
    off = 0
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        cols = int(sizes[k])
        rows = int(sizes[k + 1])
        w = theta[off:off + rows * cols].reshape(rows, cols)
        b = theta[off + rows * cols:off + rows * cols + rows]
        z = w @ h + b
        h = z if k == n_layers - 1 else np.tanh(z)
        off += rows * cols + rows
    out_mean[:] = h
