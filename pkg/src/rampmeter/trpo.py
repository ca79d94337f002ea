"""Trust-region policy optimization: rollout collection, linear baseline,
discounted advantages, conjugate-gradient natural steps with KL-constrained
backtracking."""
from __future__ import annotations

import math
import multiprocessing
import os
from dataclasses import dataclass

import numpy as np

from . import policy as policy_mod
from .env import EnvConfig, OBS_DIM, run_episode


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    discount: float = 0.999
    kl_limit: float = 0.01
    batch_size: int = 20000
    horizon: int = 500
    iterations: int = 100
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10
    baseline_ridge: float = 1e-5
    workers: int = 1
    master_seed: int = 0


@dataclass
class TrajectoryBatch:
    episodes: list
    total_steps: int


@dataclass
class CurveRow:
    iteration: int
    mean_return: float
    std_return: float
    mean_kl: float
    steps: int


@dataclass
class TrainResult:
    params: policy_mod.PolicyParameters
    curve: list[CurveRow]


# -- rollout collection --------------------------------------------------------------


def _collect_worker(args):
    layer_sizes, flat, env_cfg, horizon, master_seed, iteration, worker, quota = args
    params = policy_mod.unflatten(layer_sizes, flat)
    episodes, steps, ep = [], 0, 0
    while steps < quota:
        episode, _, _ = run_episode(params, env_cfg,
                                    (master_seed, iteration, worker, ep), horizon)
        episodes.append(episode)
        steps += len(episode.rewards)
        ep += 1
    return episodes


def collect_batch(params: policy_mod.PolicyParameters, env_cfg: EnvConfig,
                  cfg: TrainConfig, iteration: int) -> TrajectoryBatch:
    """Run episodes across workers until at least batch_size steps are in.

    Worker w runs episodes seeded (master_seed, iteration, w, episode_index)
    against a quota of ceil(batch_size / workers) steps, so the batch is
    deterministic for a fixed worker count regardless of scheduling.
    """
    quota = math.ceil(cfg.batch_size / max(cfg.workers, 1))
    tasks = [(params.layer_sizes, params.flat(), env_cfg, cfg.horizon,
              cfg.master_seed, iteration, w, quota) for w in range(max(cfg.workers, 1))]
    if cfg.workers > 1 and os.name == "posix":
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(cfg.workers) as pool:
            per_worker = pool.map(_collect_worker, tasks)
    else:
        per_worker = [_collect_worker(t) for t in tasks]
    episodes = [ep for worker_eps in per_worker for ep in worker_eps]
    return TrajectoryBatch(episodes, sum(len(e.rewards) for e in episodes))


# -- baseline and advantages -----------------------------------------------------------


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def episode_features(obs: np.ndarray, horizon: int) -> np.ndarray:
    """Baseline features per step: obs, obs^2, t/T, (t/T)^2, (t/T)^3, 1."""
    t = np.arange(len(obs))[:, None] / max(horizon, 1)
    return np.hstack([obs, obs * obs, t, t * t, t ** 3, np.ones_like(t)])


class LinearBaseline:
    """Ridge-regularized linear value predictor, refit once per iteration on
    the just-collected batch and used to predict the next one."""

    def __init__(self, ridge: float = 1e-5):
        self.ridge = ridge
        self.coef = None

    def fit(self, features: np.ndarray, targets: np.ndarray) -> None:
        k = features.shape[1]
        gram = features.T @ features + self.ridge * np.eye(k)
        self.coef = np.linalg.solve(gram, features.T @ targets)

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.coef is None:
            return np.zeros(len(features))
        return features @ self.coef


def compute_advantages(batch: TrajectoryBatch, baseline: LinearBaseline,
                       gamma: float, horizon: int):
    """Discounted returns-to-go minus the baseline, normalized to zero mean
    and unit variance over the batch.  Episodes cut short by a collision are
    terminal: no bootstrap value beyond the recorded rewards."""
    returns = [discounted_returns(ep.rewards, gamma) for ep in batch.episodes]
    preds = [baseline.predict(episode_features(ep.observations, horizon))
             for ep in batch.episodes]
    adv = np.concatenate([g - p for g, p in zip(returns, preds)])
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, np.concatenate(returns)


# -- the trust-region step --------------------------------------------------------------


def surrogate_and_kl(params_new, params_old, observations, actions, advantages):
    """Importance-weighted surrogate and mean Gaussian KL(old || new) over the batch."""
    old_means, _ = policy_mod.forward_batch(params_old, observations)
    new_means, _ = policy_mod.forward_batch(params_new, observations)
    lp_old = policy_mod.gaussian_logp(old_means, params_old.log_std, actions)
    lp_new = policy_mod.gaussian_logp(new_means, params_new.log_std, actions)
    surrogate = float(np.mean(np.exp(lp_new - lp_old) * advantages))
    kl = policy_mod.mean_kl(old_means, params_old.log_std, new_means, params_new.log_std)
    return surrogate, kl


def conjugate_gradient(matvec, b: np.ndarray, iters: int, tol: float = 1e-10):
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rdotr = float(r @ r)
    for _ in range(iters):
        if rdotr < tol:
            break
        z = matvec(p)
        pz = float(p @ z)
        if not np.isfinite(pz) or pz <= 0.0:
            return x, False
        alpha = rdotr / pz
        x += alpha * p
        r -= alpha * z
        new_rdotr = float(r @ r)
        p = r + (new_rdotr / rdotr) * p
        rdotr = new_rdotr
    return x, bool(np.all(np.isfinite(x)))


def trpo_step(params_old, observations, actions, advantages, cfg: TrainConfig):
    """One KL-constrained natural-gradient update.

    Returns (params_new, info).  params_new is params_old when no candidate
    step both improves the surrogate and respects the KL limit.
    """
    n = len(observations)
    old_means, acts = policy_mod.forward_batch(params_old, observations)
    lp_old = policy_mod.gaussian_logp(old_means, params_old.log_std, actions)
    g = policy_mod.weighted_logp_grad(params_old, acts, actions, old_means,
                                      advantages / n)
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite policy gradient")
    info = {"accepted": False, "mean_kl": 0.0, "surrogate": 0.0, "backtracks": 0,
            "grad_norm": float(np.linalg.norm(g)), "cg_fallback": False}
    if info["grad_norm"] < 1e-12:
        return params_old, info

    def fvp_damped(v):
        return policy_mod.fisher_vector_product(params_old, acts, v) + cfg.cg_damping * v

    x, ok = conjugate_gradient(fvp_damped, g, cfg.cg_iters)
    if not ok or not np.all(np.isfinite(x)) or float(x @ g) <= 0.0:
        # CG breakdown: fall back to the plain gradient, still scaled to the trust region.
        x = g.copy()
        info["cg_fallback"] = True
    xfx = float(x @ fvp_damped(x))
    if not np.isfinite(xfx) or xfx <= 0.0:
        return params_old, info
    full_step = math.sqrt(2.0 * cfg.kl_limit / xfx) * x

    flat_old = params_old.flat()
    std_old = params_old.log_std
    for i in range(cfg.max_backtracks):
        candidate = policy_mod.unflatten(params_old.layer_sizes,
                                         flat_old + (cfg.backtrack_ratio ** i) * full_step)
        new_means, _ = policy_mod.forward_batch(candidate, observations)
        lp_new = policy_mod.gaussian_logp(new_means, candidate.log_std, actions)
        surrogate = float(np.mean(np.exp(lp_new - lp_old) * advantages))
        kl = policy_mod.mean_kl(old_means, std_old, new_means, candidate.log_std)
        info["backtracks"] = i
        if (np.isfinite(surrogate) and np.isfinite(kl)
                and kl <= cfg.kl_limit and surrogate > 0.0):
            info.update(accepted=True, mean_kl=kl, surrogate=surrogate)
            return candidate, info
    return params_old, info


# -- the training loop --------------------------------------------------------------


def train(env_cfg: EnvConfig, cfg: TrainConfig, out_dir=None,
          progress=None) -> TrainResult:
    """Collect / fit baseline / step, recording undiscounted returns per
    iteration and checkpointing the policy after each update."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, 0xC0FFEE]))
    params = policy_mod.init_params(
        (OBS_DIM,) + policy_mod.DEFAULT_LAYER_SIZES[1:], rng)
    baseline = LinearBaseline(cfg.baseline_ridge)
    curve: list[CurveRow] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for it in range(cfg.iterations):
        batch = collect_batch(params, env_cfg, cfg, it)
        adv, returns = compute_advantages(batch, baseline, cfg.discount, cfg.horizon)
        observations = np.concatenate([ep.observations for ep in batch.episodes])
        actions = np.concatenate([ep.actions for ep in batch.episodes])
        params, info = trpo_step(params, observations, actions, adv, cfg)
        features = np.concatenate([episode_features(ep.observations, cfg.horizon)
                                   for ep in batch.episodes])
        baseline.fit(features, returns)

        ep_returns = np.array([float(ep.rewards.sum()) for ep in batch.episodes])
        row = CurveRow(iteration=it, mean_return=float(ep_returns.mean()),
                       std_return=float(ep_returns.std()),
                       mean_kl=info["mean_kl"], steps=batch.total_steps)
        curve.append(row)
        if out_dir is not None:
            policy_mod.save_params(params, os.path.join(out_dir, f"policy_iter_{it}"))
        if progress is not None:
            progress(row, info)
    if out_dir is not None and cfg.iterations > 0:
        policy_mod.save_params(params, os.path.join(out_dir, "policy_final"))
    return TrainResult(params=params, curve=curve)
