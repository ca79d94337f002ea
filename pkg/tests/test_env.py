import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rampmeter import env as E
from rampmeter import policy as P
from rampmeter.config import RunConfig
from rampmeter.dynamics import IdmParams, SimLimits, VehicleState
from rampmeter.engine import PlatoonSpec, World, make_streams
from rampmeter.env import (OBS_DIM, EnvConfig, NoiseConfig, RewardConfig,
                           RlQueues, assign_actions, build_observation,
                           compute_reward, inject_state_noise, run_episode)
from rampmeter.network import NORTH, WEST, default_network

SCALES = E.NormalizationScales()
LIMITS = SimLimits()


def empty_world(**kw):
    return World(default_network(), IdmParams(accel_noise_std=0.0), LIMITS, {},
                 spawn_period=1e9, streams=make_streams(0), stochastic_speed=False, **kw)


def add(world, vid, route, progress, velocity, controller="idm", entered=True):
    world.vehicles[vid] = VehicleState(id=vid, route=route, progress=progress,
                                       velocity=velocity, controller=controller,
                                       entered_at=0.0 if entered else None)
    return world.vehicles[vid]


class TestObservation:
    def test_layout_dimension(self):
        assert OBS_DIM == 54
        spans = [E.SL_AV_POS, E.SL_AV_VEL, E.SL_N_DIST, E.SL_W_DIST, E.SL_N_VEL,
                 E.SL_W_VEL, E.SL_AV_HEAD, E.SL_AV_TAIL, E.SL_QUEUES,
                 E.SL_RING_POS, E.SL_RING_VEL]
        covered = sorted(i for s in spans for i in range(s.start, s.stop))
        assert covered == list(range(54))

    def test_empty_world_padding(self):
        obs = build_observation(empty_world(), RlQueues(), SCALES)
        assert obs.shape == (54,)
        np.testing.assert_array_equal(obs[E.SL_N_DIST], 1.0)
        np.testing.assert_array_equal(obs[E.SL_W_DIST], 1.0)
        np.testing.assert_array_equal(obs[E.SL_AV_HEAD], 1.0)
        np.testing.assert_array_equal(obs[E.SL_AV_TAIL], 1.0)
        np.testing.assert_array_equal(obs[E.SL_AV_POS], 0.0)
        np.testing.assert_array_equal(obs[E.SL_AV_VEL], 0.0)
        np.testing.assert_array_equal(obs[E.SL_QUEUES], 0.0)
        np.testing.assert_array_equal(obs[E.SL_RING_POS], 0.0)
        np.testing.assert_array_equal(obs[E.SL_RING_VEL], 0.0)

    def test_av_position_normalization(self):
        w = empty_world()
        add(w, "av", WEST, 221.5, 7.5, controller="rl")
        q = RlQueues()
        q.sync(w)
        obs = build_observation(w, q, SCALES)
        assert obs[E.SL_AV_POS][1] == pytest.approx(0.5)       # 221.5 / 443
        assert obs[E.SL_AV_VEL][1] == pytest.approx(0.5)       # 7.5 / 15
        assert obs[E.SL_AV_POS][0] == 0.0                      # no northern AV

    def test_entry_block_selection_and_queue_count(self):
        w = empty_world()
        # eight stopped vehicles strung along the north entry
        for k in range(8):
            add(w, f"n{k}", NORTH, 70.0 - 8.0 * k, 0.0)
        q = RlQueues()
        obs = build_observation(w, q, SCALES)
        dists = obs[E.SL_N_DIST]
        # exactly the six nearest represented, ascending distance
        expect = np.array([74.3 - 70.0 + 8.0 * k for k in range(6)]) / 74.3
        np.testing.assert_allclose(dists, expect)
        assert obs[E.SL_QUEUES][0] == pytest.approx(8.0 / 16.0)
        np.testing.assert_array_equal(obs[E.SL_N_VEL], 0.0)

    def test_waiting_count_excludes_moving_vehicles_but_counts_staged(self):
        w = empty_world()
        add(w, "moving", NORTH, 30.0, 5.0)
        add(w, "crawl", NORTH, 20.0, 0.1)
        staged = add(w, "staged", NORTH, -12.0, 0.0, entered=False)
        assert staged.entered_at is None
        obs = build_observation(w, RlQueues(), SCALES)
        assert obs[E.SL_QUEUES][0] == pytest.approx(2.0 / 16.0)

    def test_ring_block_sorted_and_capped(self):
        w = empty_world()
        for k in range(12):
            add(w, f"r{k}", WEST, 131.0 - 2.0 * k, 1.0 + k)   # 12 on the ring arcs
        obs = build_observation(w, RlQueues(), SCALES)
        pos = obs[E.SL_RING_POS]
        assert np.all(np.diff(pos) > 0)                        # ascending
        assert pos[0] == pytest.approx((131.0 - 22.0) / 443.0)
        assert obs[E.SL_RING_VEL][0] == pytest.approx(12.0 / 15.0)

    def test_headway_and_tailway_slots(self):
        w = empty_world()
        add(w, "av", WEST, 50.0, 5.0, controller="rl")
        add(w, "lead", WEST, 70.0, 5.0)
        add(w, "tail", WEST, 30.0, 5.0)
        q = RlQueues()
        q.sync(w)
        obs = build_observation(w, q, SCALES)
        assert obs[E.SL_AV_HEAD][1] == pytest.approx(15.0 / 443.0)
        assert obs[E.SL_AV_TAIL][1] == pytest.approx(15.0 / 443.0)

    def test_observation_box_holds_during_rollout(self):
        cfg = RunConfig().env()
        w = World(cfg.net, cfg.idm, cfg.limits, cfg.platoons, cfg.spawn_period,
                  make_streams(5), stochastic_speed=True)
        q = RlQueues()
        rng = np.random.default_rng(0)
        for _ in range(300):
            q.sync(w)
            obs = build_observation(w, q, SCALES)
            assert np.all(obs >= -1.0) and np.all(obs <= 1.0)
            noised = inject_state_noise(obs, NoiseConfig(enabled=True), rng)
            assert np.all(noised >= -1.0) and np.all(noised <= 1.0)
            w.step()


class TestStateNoise:
    def test_disabled_is_identity(self):
        obs = np.linspace(-1, 1, 54)
        out = inject_state_noise(obs, NoiseConfig(enabled=False), np.random.default_rng(0))
        assert out is obs

    def test_clip_bound(self):
        obs = np.full(54, 0.95)

        class Plus02:
            def normal(self, mean, std, shape):
                return np.full(shape, 0.2)

        out = inject_state_noise(obs, NoiseConfig(enabled=True), Plus02())
        np.testing.assert_array_equal(out, 1.0)

    def test_empirical_std_of_perturbations(self):
        rng = np.random.default_rng(11)
        obs = np.zeros(54)
        draws = np.stack([inject_state_noise(obs, NoiseConfig(enabled=True), rng)
                          for _ in range(10 ** 5)])
        # pre-clip distribution is N(0, 0.1); clipping at +-1 is 10 sigma out
        std = draws.std(axis=0)
        assert np.all(np.abs(std - 0.1) < 0.005)


class TestAssignActions:
    def _queues(self, world):
        q = RlQueues()
        q.sync(world)
        return q

    def test_dispatch_to_queue_fronts(self):
        w = empty_world()
        add(w, "n_av", NORTH, 10.0, 0.0, controller="rl")
        add(w, "w_av", WEST, 10.0, 0.0, controller="rl")
        add(w, "w_av2", WEST, 2.0, 0.0, controller="rl")
        q = self._queues(w)
        acts = assign_actions((0.3, -0.4), q, NoiseConfig(enabled=False),
                              np.random.default_rng(0), LIMITS)
        assert acts == {"n_av": pytest.approx(0.3), "w_av": pytest.approx(-0.4)}
        assert "w_av2" not in acts     # trails the queue, car-following upstream

    def test_empty_queue_discards_element(self):
        w = empty_world()
        add(w, "w_av", WEST, 10.0, 0.0, controller="rl")
        acts = assign_actions((0.9, 0.1), self._queues(w),
                              NoiseConfig(enabled=False), np.random.default_rng(0), LIMITS)
        assert list(acts) == ["w_av"]
        assert acts["w_av"] == pytest.approx(0.1)

    def test_clip_to_acceleration_box(self):
        w = empty_world()
        add(w, "n_av", NORTH, 10.0, 0.0, controller="rl")
        acts = assign_actions((1.7, 0.0), self._queues(w),
                              NoiseConfig(enabled=False), np.random.default_rng(0), LIMITS)
        assert acts["n_av"] == 1.0

    def test_noise_then_clip(self):
        w = empty_world()
        add(w, "n_av", NORTH, 10.0, 0.0, controller="rl")

        class Plus05:
            def normal(self, mean, std, shape):
                return np.full(shape, 0.5)

        acts = assign_actions((0.8, 0.0), self._queues(w),
                              NoiseConfig(enabled=True), Plus05(), LIMITS)
        assert acts["n_av"] == 1.0

    def test_queue_pops_on_exit(self):
        cfg = RunConfig().env()
        w = World(cfg.net, cfg.idm, cfg.limits, {WEST: PlatoonSpec(size=1)},
                  1e9, make_streams(0), stochastic_speed=False)
        q = RlQueues()
        q.sync(w)
        av = next(iter(w.vehicles.values()))
        assert q.front(WEST) == av.id
        av.progress = cfg.net.routes[WEST].total_length - 1.0
        av.velocity = 10.0
        w.step()
        q.sync(w)
        assert q.front(WEST) is None


class TestReward:
    def _world_with_velocities(self, vels):
        w = empty_world()
        for k, v in enumerate(vels):
            add(w, f"v{k}", WEST, 10.0 + 20.0 * k, v)
        return w

    def test_all_at_v_max(self):
        w = self._world_with_velocities([15.0] * 7)
        assert compute_reward(w, RewardConfig()) == 1.0

    def test_all_stopped(self):
        w = self._world_with_velocities([0.0] * 7)
        assert compute_reward(w, RewardConfig()) == -17.5

    def test_mixed_hand_case(self):
        w = self._world_with_velocities([15.0, 15.0, 15.0, 0.0])
        assert compute_reward(w, RewardConfig()) == -2.0

    def test_empty_system(self):
        assert compute_reward(empty_world(), RewardConfig()) == 0.0

    def test_slow_threshold_strict(self):
        w = self._world_with_velocities([0.3] * 3)
        r = compute_reward(w, RewardConfig())
        # exactly at the threshold: no slow penalty
        base = max(15 * np.sqrt(3) - np.sqrt(3 * 14.7 ** 2), 0) / (15 * np.sqrt(3))
        assert r == pytest.approx(base)

    @given(v=st.floats(0.0, 15.0))
    @settings(max_examples=100, deadline=None)
    def test_single_vehicle_closed_form(self, v):
        w = self._world_with_velocities([v])
        r = compute_reward(w, RewardConfig())
        expect = max(15.0 - abs(v - 15.0), 0.0) / 15.0
        expect -= 1.5 * (v == 0.0) + (v < 0.3)
        assert r == pytest.approx(expect)

    def test_reward_ceiling_on_rollout(self):
        env = RunConfig().env()
        params = P.init_params(rng=np.random.default_rng(3))
        ep, m, _ = run_episode(params, env, seed=4, horizon=300)
        assert np.all(ep.rewards <= 1.0)


class TestRunEpisode:
    def test_horizon_one(self):
        env = RunConfig().env()
        params = P.init_params(rng=np.random.default_rng(0))
        ep, m, _ = run_episode(params, env, seed=0, horizon=1)
        assert ep.observations.shape == (1, 54)
        assert ep.actions.shape == (1, 2)
        assert ep.rewards.shape == (1,)

    def test_same_seed_identical_rewards(self):
        env = RunConfig().env()
        params = P.init_params(rng=np.random.default_rng(1))
        r1 = run_episode(params, env, seed=7, horizon=200)[0].rewards
        r2 = run_episode(params, env, seed=7, horizon=200)[0].rewards
        np.testing.assert_array_equal(r1, r2)

    def test_collision_terminates_training_episode(self):
        env = RunConfig().env()
        params = P.init_params(rng=np.random.default_rng(1))
        found = False
        for seed in range(12):
            ep, m, w = run_episode(params, env, seed=seed, horizon=500)
            assert len(ep.rewards) == m.steps
            if m.terminated_early:
                found = True
                assert m.steps < 500
                assert w.events
        assert found, "no collision in 12 random-policy episodes"

    def test_nan_policy_aborts(self):
        env = RunConfig().env()
        params = P.init_params(rng=np.random.default_rng(1))
        params.weights[0][:] = np.nan
        params._flat = None
        with pytest.raises((ArithmeticError, ValueError)):
            run_episode(params, env, seed=0, horizon=5)

    def test_deterministic_mode_uses_mean(self):
        env = dataclasses.replace(RunConfig().env(), noise=NoiseConfig(enabled=False),
                                  stochastic_speed=False,
                                  idm=IdmParams(accel_noise_std=0.0))
        params = P.init_params(rng=np.random.default_rng(2))
        e1 = run_episode(params, env, seed=1, horizon=50, deterministic=True)[0]
        e2 = run_episode(params, env, seed=2, horizon=50, deterministic=True)[0]
        # every stochastic channel is off and actions are mean-valued, so the
        # seed must not matter at all
        np.testing.assert_array_equal(e1.actions, e2.actions)
