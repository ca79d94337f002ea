# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot-loop kernels.

Function-for-function twin of rampmeter._pykernels; keep both in sync.
"""
from libc.math cimport INFINITY, pow, sqrt, tanh

BACKEND = "cython"


cpdef double idm_accel(double v, double v_lead, double headway, double v0,
                       double T, double a, double b, double delta, double s0):
    cdef double follow = v * T + v * (v - v_lead) / (2.0 * sqrt(a * b))
    cdef double s_star = s0 + (follow if follow > 0.0 else 0.0)
    cdef double ratio = s_star / headway
    return a * (1.0 - pow(v / v0, delta) - ratio * ratio)


cpdef double idm_accel_free(double v, double v0, double a, double delta):
    return a * (1.0 - pow(v / v0, delta))


cpdef double safe_velocity(double headway, double v_lead, double brake,
                           double dt, double s0, double v_max):
    cdef double bd = brake * dt
    cdef double budget = headway - s0
    if budget < 0.0:
        budget = 0.0
    cdef double v = -bd + sqrt(bd * bd + v_lead * v_lead + 2.0 * brake * budget)
    return v if v < v_max else v_max


cpdef void resolve_leaders(double[::1] frame, unsigned long long[::1] seg_bit,
                           unsigned long long[::1] path_mask, double[::1] length,
                           double[::1] seg_start, unsigned long long[::1] rear_bit,
                           double[::1] velocity, long long[::1] out_leader,
                           double[::1] out_gap, double[::1] out_lead_v):
    cdef Py_ssize_t n = frame.shape[0]
    cdef Py_ssize_t i, j, best_j
    cdef double best, d, rear
    for i in range(n):
        best = INFINITY
        best_j = -1
        for j in range(n):
            if j == i:
                continue
            if (path_mask[i] & seg_bit[j]) == 0:
                continue
            d = frame[j] - frame[i]
            if d > 0.0 and d < best:
                best = d
                best_j = j
        out_leader[i] = best_j
        if best_j < 0:
            out_gap[i] = INFINITY
            out_lead_v[i] = 0.0
            continue
        j = best_j
        rear = frame[j] - length[j]
        if (rear < seg_start[j] and seg_bit[i] != seg_bit[j]
                and (path_mask[i] & rear_bit[j]) == 0):
            # The leader's tail still straddles back into a foreign approach:
            # the junction line itself is the obstacle until the tail clears.
            out_gap[i] = seg_start[j] - frame[i]
            out_lead_v[i] = 0.0
        else:
            out_gap[i] = rear - frame[i]
            out_lead_v[i] = velocity[j]


cpdef void mlp_forward(double[::1] theta, int[::1] sizes, double[::1] obs,
                       double[::1] out_mean, double[::1] buf_a, double[::1] buf_b):
    cdef Py_ssize_t n_layers = sizes.shape[0] - 1
    cdef Py_ssize_t off = 0
    cdef Py_ssize_t k, i, j, rows, cols
    cdef double acc
    cdef bint last
    cdef double[::1] cur = buf_a
    cdef double[::1] nxt = buf_b
    cdef double[::1] tmp
    for i in range(sizes[0]):
        cur[i] = obs[i]
    for k in range(n_layers):
        cols = sizes[k]
        rows = sizes[k + 1]
        last = k == n_layers - 1
        for i in range(rows):
            acc = theta[off + rows * cols + i]
            for j in range(cols):
                acc += theta[off + i * cols + j] * cur[j]
            if last:
                nxt[i] = acc
            else:
                nxt[i] = tanh(acc)
        off += rows * cols + rows
        tmp = cur
        cur = nxt
        nxt = tmp
    for i in range(sizes[n_layers]):
        out_mean[i] = cur[i]
