"""Command-line entry point: train / baseline / eval / transfer-eval /
export-plots, plus config loading, seed management, and output orchestration."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import reporting, transfer
from .config import ConfigError, RunConfig, dump_effective, load_config
from .env import run_episode
from .network import NetworkError
from .transfer import CASE_BASELINE, CASE_RL_NOISE_FREE, CASE_RL_NOISE_TRAINED
from .trpo import train

COMMANDS = ("train", "baseline", "eval", "transfer-eval", "export-plots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rampmeter",
        description="Roundabout micro-simulation, policy training, and transfer evaluation.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration (empty file = defaults)")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--policy", help="policy weight file (eval / transfer-eval)")
    parser.add_argument("--policy-noise-free",
                        help="noise-free policy for the transfer-eval comparison case")
    parser.add_argument("--trials", type=int, default=3, help="transfer-eval trials per case")
    parser.add_argument("--noise", choices=("on", "off"),
                        help="training noise regime (overrides the config)")
    parser.add_argument("--sample-actions", action="store_true",
                        help="sample from the policy at evaluation instead of using the mean")
    parser.add_argument("--traj", help="trajectory CSV consumed by export-plots")
    return parser


def _progress_printer(row, info):
    flag = "" if info["accepted"] else "  (step rejected)"
    print(f"iter {row.iteration:3d}  return {row.mean_return:9.2f} "
          f"+- {row.std_return:7.2f}  kl {row.mean_kl:.5f}  steps {row.steps}{flag}")


def dispatch(command: str, cfg: RunConfig, args) -> int:
    out = args.out
    os.makedirs(out, exist_ok=True)
    seed = cfg.master_seed
    dump_effective(cfg, os.path.join(out, "effective_config.json"))
    env_cfg = cfg.env()

    if command == "train":
        result = train(env_cfg, cfg.train, out_dir=out, progress=_progress_printer)
        reporting.write_curve(os.path.join(out, "reward_curve.csv"), result.curve, seed)
        print(f"wrote {len(result.curve)} iterations to {out}/reward_curve.csv; "
              f"final checkpoint {out}/policy_final")
        return 0

    if command in ("baseline", "eval"):
        policy = None
        if command == "eval":
            if not args.policy:
                print("eval needs --policy", file=sys.stderr)
                return 2
            from . import policy as policy_mod
            policy = policy_mod.load_params(args.policy)
        env_cfg = dataclasses.replace(env_cfg, noise=dataclasses.replace(env_cfg.noise,
                                                                         enabled=False))
        _, metrics, world = run_episode(policy, env_cfg, seed, cfg.train.horizon,
                                        deterministic=not args.sample_actions,
                                        record_log=True, terminate_on_collision=False)
        score = transfer.metering_score(world.log, env_cfg.net,
                                        gap_threshold=2 * cfg.idm.s0,
                                        vehicle_length=cfg.vehicle_length,
                                        dt=cfg.limits.dt)
        reporting.write_trajectory(os.path.join(out, "trajectory.csv"), world.log, seed)
        reporting.write_metrics(os.path.join(out, "metrics.csv"), metrics, score, seed)
        print(f"avg velocity {metrics.avg_velocity:.3f} m/s, "
              f"avg travel time {metrics.avg_travel_time:.2f} s, "
              f"max {metrics.max_travel_time:.2f} s, "
              f"collisions {metrics.collisions}, metering score {score:.1f}")
        return 0

    if command == "transfer-eval":
        cases = [(CASE_BASELINE, None)]
        if args.policy_noise_free:
            cases.append((CASE_RL_NOISE_FREE, args.policy_noise_free))
        if args.policy:
            cases.append((CASE_RL_NOISE_TRAINED, args.policy))
        reports = []
        for case, path in cases:
            report, results = transfer.evaluate(case, path, cfg.perturbation,
                                                args.trials, seed, env_cfg,
                                                max_steps=cfg.train.horizon,
                                                sample_actions=args.sample_actions)
            reports.append(report)
            for trial, (_, world) in enumerate(results):
                reporting.write_trajectory(
                    os.path.join(out, f"trajectory_{case.lower()}_{trial}.csv"),
                    world.log, seed)
            if report.collision_trials * 2 > report.trials:
                print(f"WARNING: {case}: collisions in {report.collision_trials} of "
                      f"{report.trials} trials", file=sys.stderr)
        reporting.write_transfer_report(os.path.join(out, "transfer_report.csv"),
                                        reports, seed)
        print(f"perturbation profile: {cfg.perturbation}")
        print(reporting.render_report_table(reports))
        return 0

    if command == "export-plots":
        traj = args.traj or os.path.join(out, "trajectory.csv")
        if not os.path.exists(traj):
            print(f"no trajectory file at {traj} (use --traj)", file=sys.stderr)
            return 2
        reporting.export_space_time(traj, os.path.join(out, "space_time.csv"), seed)
        reporting.export_velocity_profiles(traj, os.path.join(out, "velocity_profile.csv"),
                                           seed)
        print(f"wrote {out}/space_time.csv and {out}/velocity_profile.csv")
        return 0

    raise AssertionError(f"unhandled command {command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = RunConfig()
        if args.seed is not None:
            cfg.master_seed = args.seed
            cfg.train = dataclasses.replace(cfg.train, master_seed=args.seed)
        if args.noise is not None:
            cfg.noise = dataclasses.replace(cfg.noise, enabled=args.noise == "on")
    except (ConfigError, NetworkError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return dispatch(args.command, cfg, args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
