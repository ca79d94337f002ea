"""Gaussian MLP policy: tanh hidden layers, linear mean output, a learnable
state-independent log-std vector, analytic backpropagation, and a bit-exact
little-endian weight file for moving a frozen policy across processes.

Parameter vectors are flattened layer by layer as [W row-major, b] with the
log-std vector at the tail; flatten()/unflatten() define the canonical order
used by the trainer and by grad_log_prob.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels

DEFAULT_LAYER_SIZES = (54, 100, 50, 25, 2)
LOG_2PI = math.log(2.0 * math.pi)

FILE_MAGIC = b"RNDP"
FILE_VERSION = 1


class PolicyFileError(ValueError):
    pass


@dataclass
class PolicyParameters:
    """Immutable-by-convention snapshot; many rollout workers may read one
    instance concurrently across processes, only the trainer makes new ones."""
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]     # per layer, shape (out, in)
    biases: list[np.ndarray]      # per layer, shape (out,)
    log_std: np.ndarray           # (action_dim,)

    def __post_init__(self):
        self._flat = None
        self._sizes_i32 = None
        width = max(self.layer_sizes)
        self._buf_a = np.empty(width)
        self._buf_b = np.empty(width)

    @property
    def action_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def obs_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases)) + self.log_std.size

    def flat(self) -> np.ndarray:
        if self._flat is None:
            self._flat = flatten(self)
        return self._flat

    def sizes_i32(self) -> np.ndarray:
        if self._sizes_i32 is None:
            self._sizes_i32 = np.asarray(self.layer_sizes, dtype=np.int32)
        return self._sizes_i32


@dataclass(frozen=True)
class ActionDistribution:
    mean: np.ndarray
    std: np.ndarray


def init_params(layer_sizes=DEFAULT_LAYER_SIZES, rng=None) -> PolicyParameters:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, zero log-std."""
    rng = rng or np.random.default_rng()
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return PolicyParameters(tuple(layer_sizes), weights, biases,
                            np.zeros(layer_sizes[-1]))


def flatten(params: PolicyParameters) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    parts.append(params.log_std)
    return np.concatenate(parts)


def unflatten(layer_sizes, vec: np.ndarray) -> PolicyParameters:
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        weights.append(vec[off:off + fan_out * fan_in].reshape(fan_out, fan_in).copy())
        off += fan_out * fan_in
        biases.append(vec[off:off + fan_out].copy())
        off += fan_out
    log_std = vec[off:off + layer_sizes[-1]].copy()
    if off + layer_sizes[-1] != vec.size:
        raise ValueError("parameter vector length does not match layer sizes")
    return PolicyParameters(tuple(layer_sizes), weights, biases, log_std)


def forward(params: PolicyParameters, obs) -> ActionDistribution:
    """Deterministic forward pass to the action distribution."""
    o = np.ascontiguousarray(obs, dtype=np.float64)
    if o.shape != (params.obs_dim,):
        raise ValueError(f"observation shape {o.shape}, expected ({params.obs_dim},)")
    if not np.all(np.isfinite(o)):
        raise ValueError("non-finite observation")
    mean = np.empty(params.action_dim)
    kernels.mlp_forward(params.flat(), params.sizes_i32(), o, mean,
                        params._buf_a, params._buf_b)
    return ActionDistribution(mean=mean, std=np.exp(params.log_std))


def sample_action(dist: ActionDistribution, rng) -> np.ndarray:
    return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)


def log_prob(params: PolicyParameters, obs, action) -> float:
    dist = forward(params, obs)
    z = (np.asarray(action, dtype=float) - dist.mean) / dist.std
    return float(-0.5 * np.dot(z, z) - np.sum(params.log_std)
                 - 0.5 * params.action_dim * LOG_2PI)


def grad_log_prob(params: PolicyParameters, obs, action) -> np.ndarray:
    """Exact gradient of log_prob w.r.t. every parameter, in flatten() order."""
    x = np.asarray(obs, dtype=float)[None, :]
    a = np.asarray(action, dtype=float)[None, :]
    means, acts = forward_batch(params, x)
    return weighted_logp_grad(params, acts, a, means, np.ones(1))


# -- batched training math --------------------------------------------------------


def forward_batch(params: PolicyParameters, x: np.ndarray):
    """Batched means plus per-layer inputs (needed by the backward passes)."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if k == last:
            return z, acts
        h = np.tanh(z)
        acts.append(h)
    raise AssertionError("unreachable")


def gaussian_logp(means: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - means) / np.exp(log_std)
    return (-0.5 * np.sum(z * z, axis=1) - np.sum(log_std)
            - 0.5 * means.shape[1] * LOG_2PI)


def _backprop_mean_grad(params: PolicyParameters, acts, dout):
    """Accumulate parameter gradients for sum_t dout_t . dmu_t/dtheta."""
    d = dout
    n_layers = len(params.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        grads_w[k] = d.T @ acts[k]
        grads_b[k] = d.sum(axis=0)
        if k > 0:
            d = (d @ params.weights[k]) * (1.0 - acts[k] * acts[k])
    return grads_w, grads_b


def _flatten_grads(grads_w, grads_b, dlog_std) -> np.ndarray:
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    parts.append(dlog_std)
    return np.concatenate(parts)


def weighted_logp_grad(params: PolicyParameters, acts, actions, means,
                       weights: np.ndarray) -> np.ndarray:
    """Flat gradient of sum_t weights_t * log pi(a_t | s_t)."""
    var = np.exp(2.0 * params.log_std)
    delta = actions - means
    dmu = delta / var * weights[:, None]
    grads_w, grads_b = _backprop_mean_grad(params, acts, dmu)
    dlog_std = np.sum((delta * delta / var - 1.0) * weights[:, None], axis=0)
    return _flatten_grads(grads_w, grads_b, dlog_std)


def fisher_vector_product(params: PolicyParameters, acts, v: np.ndarray) -> np.ndarray:
    """F·v for the mean KL at the current parameters, computed exactly as a
    forward tangent pass followed by a weighted backward pass.

    For a diagonal Gaussian with state-independent log-std the Fisher block
    for the mean is J^T diag(1/sigma^2) J averaged over states, and the
    log-std block is the constant 2 per dimension.
    """
    vp = unflatten(params.layer_sizes, v)
    n = acts[0].shape[0]
    n_layers = len(params.weights)
    t = None
    for k in range(n_layers):
        tz = acts[k] @ vp.weights[k].T + vp.biases[k]
        if t is not None:
            tz += t @ params.weights[k].T
        if k == n_layers - 1:
            t_mu = tz
        else:
            t = tz * (1.0 - acts[k + 1] * acts[k + 1])
    var = np.exp(2.0 * params.log_std)
    dout = t_mu / var / n
    grads_w, grads_b = _backprop_mean_grad(params, acts, dout)
    return _flatten_grads(grads_w, grads_b, 2.0 * vp.log_std)


def mean_kl(old_means, old_log_std, new_means, new_log_std) -> float:
    """Mean over states of KL(old || new) between the diagonal Gaussians."""
    var_old = np.exp(2.0 * old_log_std)
    var_new = np.exp(2.0 * new_log_std)
    delta = new_means - old_means
    per_dim = (new_log_std - old_log_std) + (var_old + delta * delta) / (2.0 * var_new) - 0.5
    return float(np.mean(np.sum(per_dim, axis=1)))


def mean_kl_grad(params_new: PolicyParameters, x, old_means, old_log_std) -> np.ndarray:
    """Flat gradient of mean_kl w.r.t. the new parameters (used to verify the
    Fisher-vector product against finite differences)."""
    means, acts = forward_batch(params_new, x)
    n = x.shape[0]
    var_old = np.exp(2.0 * old_log_std)
    var_new = np.exp(2.0 * params_new.log_std)
    delta = means - old_means
    dmu = delta / var_new / n
    grads_w, grads_b = _backprop_mean_grad(params_new, acts, dmu)
    dlog_std = np.mean(1.0 - (var_old + delta * delta) / var_new, axis=0)
    return _flatten_grads(grads_w, grads_b, dlog_std)


# -- weight file -------------------------------------------------------------------
#
#   magic "RNDP" | u32 version | u32 layer_count
#   per layer:  u32 rows | u32 cols | rows*cols f64 (row-major) | rows f64 bias
#   action_dim f64 log-std (action_dim = rows of the last layer)
#   u32 CRC32 of everything above
#
# All integers and floats little-endian.


def save_params(params: PolicyParameters, path) -> None:
    buf = bytearray()
    buf += FILE_MAGIC
    buf += struct.pack("<II", FILE_VERSION, len(params.weights))
    for w, b in zip(params.weights, params.biases):
        rows, cols = w.shape
        buf += struct.pack("<II", rows, cols)
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(params.log_std, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_params(path) -> PolicyParameters:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise PolicyFileError("truncated policy file")
    if raw[:4] != FILE_MAGIC:
        raise PolicyFileError(f"bad magic {raw[:4]!r}, expected {FILE_MAGIC!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise PolicyFileError("checksum mismatch")
    version, layer_count = struct.unpack_from("<II", body, 4)
    if version != FILE_VERSION:
        raise PolicyFileError(f"unsupported version {version}")
    off = 12
    weights, biases = [], []
    for _ in range(layer_count):
        if off + 8 > len(body):
            raise PolicyFileError("truncated policy file")
        rows, cols = struct.unpack_from("<II", body, off)
        off += 8
        need = 8 * (rows * cols + rows)
        if off + need > len(body):
            raise PolicyFileError("truncated policy file")
        w = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=off)
        off += 8 * rows * cols
        b = np.frombuffer(body, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        weights.append(w.reshape(rows, cols).astype(np.float64))
        biases.append(b.astype(np.float64))
    action_dim = weights[-1].shape[0] if weights else 0
    if off + 8 * action_dim != len(body):
        raise PolicyFileError("policy file length does not match declared shapes")
    log_std = np.frombuffer(body, dtype="<f8", count=action_dim, offset=off).astype(np.float64)
    for prev, cur in zip(weights, weights[1:]):
        if cur.shape[1] != prev.shape[0]:
            raise PolicyFileError(f"layer shapes do not chain: {prev.shape} -> {cur.shape}")
    for w, b in zip(weights, biases):
        if b.shape[0] != w.shape[0]:
            raise PolicyFileError("bias length does not match layer rows")
    layer_sizes = (weights[0].shape[1],) + tuple(w.shape[0] for w in weights)
    return PolicyParameters(layer_sizes, weights, biases, log_std)
