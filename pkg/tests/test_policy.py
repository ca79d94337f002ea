import math
import os
import struct
import zlib

import numpy as np
import pytest

from rampmeter import policy as P

FIXTURE = os.path.join(os.path.dirname(__file__), "data", "policy_fixture.bin")


def small_params(seed=0, sizes=(6, 8, 5, 2)):
    p = P.init_params(sizes, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    # non-trivial biases and log-std so every parameter block matters
    for b in p.biases:
        b[:] = rng.normal(0, 0.3, b.shape)
    p.log_std[:] = rng.normal(0, 0.3, p.log_std.shape)
    return P.PolicyParameters(p.layer_sizes, p.weights, p.biases, p.log_std)


class TestForward:
    def test_zero_network(self):
        sizes = (54, 100, 50, 25, 2)
        zeros = P.PolicyParameters(
            sizes,
            [np.zeros((o, i)) for i, o in zip(sizes, sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
            np.zeros(2))
        d = P.forward(zeros, np.linspace(-1, 1, 54))
        np.testing.assert_array_equal(d.mean, 0.0)
        np.testing.assert_array_equal(d.std, 1.0)

    def test_zero_observation_passes_output_bias(self):
        p = small_params(3)
        d = P.forward(p, np.zeros(6))
        # tanh(b) stacks: with zero input only biases drive the result; check
        # against an explicit recomputation
        h = np.zeros(6)
        for k, (w, b) in enumerate(zip(p.weights, p.biases)):
            z = w @ h + b
            h = z if k == len(p.weights) - 1 else np.tanh(z)
        np.testing.assert_allclose(d.mean, h, rtol=1e-12)

    def test_golden_regression(self):
        params = P.init_params(rng=np.random.default_rng(2024))
        d = P.forward(params, np.linspace(-1.0, 1.0, 54))
        np.testing.assert_allclose(
            d.mean, [-0.13926399661381159, 0.500158485790693], rtol=1e-9)

    def test_saturation_safety_at_box_corners(self):
        params = P.init_params(rng=np.random.default_rng(5))
        for corner in (np.ones(54), -np.ones(54)):
            d = P.forward(params, corner)
            assert np.all(np.isfinite(d.mean))

    def test_bad_inputs_rejected(self):
        p = small_params()
        with pytest.raises(ValueError):
            P.forward(p, np.zeros(7))
        bad = np.zeros(6)
        bad[3] = np.nan
        with pytest.raises(ValueError):
            P.forward(p, bad)

    def test_forward_determinism(self):
        p = small_params(9)
        obs = np.random.default_rng(0).uniform(-1, 1, 6)
        d1, d2 = P.forward(p, obs), P.forward(p, obs)
        np.testing.assert_array_equal(d1.mean, d2.mean)
        np.testing.assert_array_equal(d1.std, d2.std)


class TestSampling:
    def test_seeded_sample_is_mean_plus_scaled_normal(self):
        p = small_params(1)
        obs = np.zeros(6)
        d = P.forward(p, obs)
        z = np.random.default_rng(77).standard_normal(2)
        want = d.mean + d.std * z
        got = P.sample_action(d, np.random.default_rng(77))
        np.testing.assert_array_equal(got, want)

    def test_empirical_moments(self):
        p = small_params(2)
        d = P.forward(p, np.zeros(6))
        rng = np.random.default_rng(8)
        draws = np.stack([P.sample_action(d, rng) for _ in range(10 ** 5)])
        np.testing.assert_allclose(draws.mean(axis=0), d.mean, atol=0.01 * 3)
        np.testing.assert_allclose(draws.std(axis=0), d.std, rtol=0.01)


class TestLogProb:
    def test_density_at_mode_unit_std(self):
        p = small_params(4)
        p.log_std[:] = 0.0
        obs = np.zeros(6)
        mode = P.forward(p, obs).mean
        assert P.log_prob(p, obs, mode) == pytest.approx(-math.log(2 * math.pi))

    def test_doubling_sigma_costs_log2_per_dim(self):
        p = small_params(4)
        p.log_std[:] = 0.0
        obs = np.zeros(6)
        mode = P.forward(p, obs).mean
        lp0 = P.log_prob(p, obs, mode)
        p.log_std[:] = math.log(2.0)
        assert P.log_prob(p, obs, mode) == pytest.approx(lp0 - 2 * math.log(2.0))

    def test_density_integrates_to_one(self):
        # quadrature oracle over a grid spanning +-8 sigma in each dimension
        p = small_params(6)
        obs = np.random.default_rng(1).uniform(-1, 1, 6)
        d = P.forward(p, obs)
        axes = [np.linspace(m - 8 * s, m + 8 * s, 401) for m, s in zip(d.mean, d.std)]
        g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
        dens = np.array([[math.exp(P.log_prob(p, obs, (a, b)))
                          for a, b in zip(r0, r1)] for r0, r1 in zip(g0, g1)])
        total = np.trapezoid(np.trapezoid(dens, axes[1], axis=1), axes[0])
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_matches_batched_evaluation(self):
        p = small_params(7)
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (40, 6))
        a = rng.normal(size=(40, 2))
        means, _ = P.forward_batch(p, x)
        batched = P.gaussian_logp(means, p.log_std, a)
        single = np.array([P.log_prob(p, xi, ai) for xi, ai in zip(x, a)])
        np.testing.assert_allclose(batched, single, rtol=1e-10)


def finite_difference_grad(params, obs, action, h=1e-5):
    flat = P.flatten(params)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        grad[k] = (P.log_prob(P.unflatten(params.layer_sizes, up), obs, action)
                   - P.log_prob(P.unflatten(params.layer_sizes, dn), obs, action)) / (2 * h)
    return grad


class TestGradLogProb:
    def test_against_central_differences(self):
        # the single most important check in the repo: exact backprop vs a
        # finite-difference oracle over 20 random instances
        rng = np.random.default_rng(0)
        worst = 0.0
        for trial in range(20):
            p = small_params(trial)
            obs = rng.uniform(-1, 1, 6)
            action = rng.normal(size=2)
            got = P.grad_log_prob(p, obs, action)
            want = finite_difference_grad(p, obs, action)
            scale = np.maximum(np.abs(want), 1e-3)
            worst = max(worst, float(np.max(np.abs(got - want) / scale)))
        assert worst < 1e-4

    def test_log_std_gradient_at_mode_unit_sigma(self):
        p = small_params(3)
        p.log_std[:] = 0.0
        obs = np.zeros(6)
        mode = P.forward(p, obs).mean
        grad = P.grad_log_prob(p, obs, mode)
        np.testing.assert_allclose(grad[-2:], [-1.0, -1.0], atol=1e-12)

    def test_mean_gradient_vanishes_at_mode(self):
        p = small_params(5)
        obs = np.random.default_rng(4).uniform(-1, 1, 6)
        mode = P.forward(p, obs).mean
        grad = P.grad_log_prob(p, obs, mode)
        # only the log-std block survives at the mode
        np.testing.assert_allclose(grad[:-2], 0.0, atol=1e-12)


class TestFlatten:
    def test_round_trip(self):
        p = small_params(11)
        q = P.unflatten(p.layer_sizes, P.flatten(p))
        for a, b in zip(p.weights, q.weights):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(p.log_std, q.log_std)

    def test_size_mismatch_rejected(self):
        p = small_params(12)
        with pytest.raises(ValueError):
            P.unflatten(p.layer_sizes, np.zeros(P.flatten(p).size + 1))


class TestWeightFile:
    def test_round_trip_bit_exact(self, tmp_path):
        p = P.init_params(rng=np.random.default_rng(31))
        path = tmp_path / "w.bin"
        P.save_params(p, path)
        q = P.load_params(path)
        assert q.layer_sizes == p.layer_sizes
        for a, b in zip(p.weights, q.weights):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(p.biases, q.biases):
            assert a.tobytes() == b.tobytes()
        assert p.log_std.tobytes() == q.log_std.tobytes()

    def test_committed_fixture(self):
        q = P.load_params(FIXTURE)
        assert q.layer_sizes == (3, 4, 2)
        np.testing.assert_array_equal(q.weights[0],
                                      np.arange(12, dtype=float).reshape(4, 3) / 8.0)
        np.testing.assert_array_equal(q.biases[0], [0.5, -0.25, 0.125, -1.0])
        np.testing.assert_array_equal(q.weights[1],
                                      [[1.0, -2.0, 3.0, -4.0], [0.5, 0.25, -0.125, 2.0]])
        np.testing.assert_array_equal(q.biases[1], [0.75, -0.375])
        np.testing.assert_array_equal(q.log_std, [0.1, -0.2])

    def test_explicit_little_endian_writer(self, tmp_path):
        # Bytes assembled with explicit '<' packing, as any conforming writer
        # would produce regardless of host endianness.
        body = bytearray()
        body += b"RNDP" + struct.pack("<II", 1, 1)
        body += struct.pack("<II", 1, 2)
        body += struct.pack("<2d", 0.5, -1.5) + struct.pack("<1d", 2.25)
        body += struct.pack("<1d", 0.0)
        body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        path = tmp_path / "le.bin"
        path.write_bytes(bytes(body))
        q = P.load_params(path)
        np.testing.assert_array_equal(q.weights[0], [[0.5, -1.5]])
        np.testing.assert_array_equal(q.biases[0], [2.25])

    def test_corrupt_magic(self, tmp_path):
        raw = bytearray(open(FIXTURE, "rb").read())
        raw[0] ^= 0xFF
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(raw))
        with pytest.raises(P.PolicyFileError):
            P.load_params(path)

    def test_corrupt_payload_fails_checksum(self, tmp_path):
        raw = bytearray(open(FIXTURE, "rb").read())
        raw[40] ^= 0x01
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(raw))
        with pytest.raises(P.PolicyFileError, match="checksum"):
            P.load_params(path)

    def test_truncation(self, tmp_path):
        raw = open(FIXTURE, "rb").read()
        path = tmp_path / "short.bin"
        path.write_bytes(raw[:10])
        with pytest.raises(P.PolicyFileError):
            P.load_params(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            P.load_params(tmp_path / "nope.bin")
