import numpy as np
import pytest

from rampmeter import kernels

pytestmark = pytest.mark.skipif(
    len(kernels.available_backends()) < 2,
    reason="compiled backend not built; nothing to compare")


@pytest.fixture(autouse=True)
def restore_backend():
    active = kernels.backend_name()
    yield
    kernels.use_backend(active)


def _each_backend(fn):
    out = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        out[name] = fn()
    return out


def test_scalar_kernels_agree():
    rng = np.random.default_rng(0)
    for _ in range(500):
        v, vl = rng.uniform(0, 15, 2)
        gap = rng.uniform(0.1, 200)
        res = _each_backend(lambda: (
            kernels.idm_accel(v, vl, gap, 30.0, 1.0, 1.0, 1.5, 4.0, 2.0),
            kernels.idm_accel_free(v, 30.0, 1.0, 4.0),
            kernels.safe_velocity(gap, vl, 1.0, 1.0, 2.0, 15.0),
        ))
        a, b = res.values()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_resolve_leaders_agree():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = rng.integers(1, 40)
        frame = rng.uniform(0, 443, n)
        seg = rng.integers(0, 6, n)
        seg_bit = (1 << seg).astype(np.uint64)
        path_mask = rng.integers(1, 64, n).astype(np.uint64)
        length = np.full(n, 5.0)
        seg_start = frame - rng.uniform(0, 30, n)
        rear_bit = (1 << rng.integers(0, 6, n)).astype(np.uint64)
        velocity = rng.uniform(0, 15, n)

        def run():
            leader = np.empty(n, dtype=np.int64)
            gap = np.empty(n)
            lead_v = np.empty(n)
            kernels.resolve_leaders(frame, seg_bit, path_mask, length, seg_start,
                                    rear_bit, velocity, leader, gap, lead_v)
            return leader.copy(), gap.copy(), lead_v.copy()

        res = list(_each_backend(run).values())
        np.testing.assert_array_equal(res[0][0], res[1][0])
        np.testing.assert_allclose(res[0][1], res[1][1], rtol=1e-12)
        np.testing.assert_allclose(res[0][2], res[1][2], rtol=1e-12)


def test_mlp_forward_agree():
    rng = np.random.default_rng(2)
    sizes = np.array([54, 100, 50, 25, 2], dtype=np.int32)
    n_theta = sum((sizes[k] + 1) * sizes[k + 1] for k in range(len(sizes) - 1)) + 2
    for _ in range(20):
        theta = rng.normal(size=n_theta)
        obs = rng.uniform(-1, 1, 54)

        def run():
            out = np.empty(2)
            buf_a = np.empty(100)
            buf_b = np.empty(100)
            kernels.mlp_forward(theta, sizes, obs, out, buf_a, buf_b)
            return out.copy()

        res = list(_each_backend(run).values())
        np.testing.assert_allclose(res[0], res[1], rtol=1e-10, atol=1e-12)


def test_full_episode_agrees_across_backends():
    from rampmeter import policy as P
    from rampmeter.config import RunConfig
    from rampmeter.env import run_episode

    env = RunConfig().env()
    params = P.init_params(rng=np.random.default_rng(5))

    def run():
        ep, m, _ = run_episode(params, env, seed=9, horizon=120)
        return ep.rewards.copy(), m.episode_return

    res = list(_each_backend(run).values())
    np.testing.assert_allclose(res[0][0], res[1][0], rtol=1e-9, atol=1e-9)
