"""Backend selection for the hot-loop kernels.

The compiled extension (rampmeter._core) and rampmeter._pykernels expose the
same functions; whichever is available backs this module, decided at import.
Set RAMPMETER_PURE_PYTHON=1 to force the fallback, or call use_backend() to
switch at runtime (used by the benchmark and the cross-backend tests).
"""
import os

from . import _pykernels

try:
    from . import _core
except ImportError:
    _core = None

_BACKENDS = {"python": _pykernels}
if _core is not None:
    _BACKENDS["cython"] = _core

_active = None

# Rebound by use_backend().
idm_accel = None
idm_accel_free = None
safe_velocity = None
resolve_leaders = None
mlp_forward = None


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active


def use_backend(name):
    global _active, idm_accel, idm_accel_free, safe_velocity, resolve_leaders, mlp_forward
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    mod = _BACKENDS[name]
    idm_accel = mod.idm_accel
    idm_accel_free = mod.idm_accel_free
    safe_velocity = mod.safe_velocity
    resolve_leaders = mod.resolve_leaders
    mlp_forward = mod.mlp_forward
    _active = name


if os.environ.get("RAMPMETER_PURE_PYTHON") == "1" or _core is None:
    use_backend("python")
else:
    use_backend("cython")
