"""CSV writers/readers for every artifact the CLI emits.

Every output file starts with one comment line carrying the tool version and
the master seed, so any file can be traced back to its run.  Floats are
written with repr (shortest round-trip form), which keeps re-runs of the same
seed byte-identical.
"""
from __future__ import annotations

import os

from . import __version__

TRAJECTORY_COLUMNS = ("time", "vehicle_id", "route", "position_1d", "velocity", "controller")
CURVE_COLUMNS = ("iteration", "mean_return", "std_return", "mean_kl", "steps")
METRICS_COLUMNS = ("avg_velocity", "avg_travel_time", "max_travel_time",
                   "collisions", "spawned", "completed", "metering_score")
REPORT_COLUMNS = ("case", "avg_velocity", "avg_time", "max_time", "collisions", "trials")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def header_comment(seed) -> str:
    return f"# rampmeter {__version__} seed={seed}"


def write_csv(path, columns, rows, seed) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_comment(seed) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    """(columns, rows-of-strings), skipping comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#") and ln.strip()]
    columns = tuple(lines[0].split(","))
    return columns, [ln.split(",") for ln in lines[1:]]


def write_trajectory(path, log_rows, seed) -> None:
    write_csv(path, TRAJECTORY_COLUMNS,
              ((r.time, r.vehicle_id, r.route, r.position_1d, r.velocity, r.controller)
               for r in log_rows), seed)


def write_curve(path, curve, seed) -> None:
    write_csv(path, CURVE_COLUMNS,
              ((r.iteration, r.mean_return, r.std_return, r.mean_kl, r.steps)
               for r in curve), seed)


def write_metrics(path, metrics, metering, seed) -> None:
    row = (metrics.avg_velocity, metrics.avg_travel_time, metrics.max_travel_time,
           metrics.collisions, metrics.spawned, metrics.completed, metering)
    write_csv(path, METRICS_COLUMNS, [row], seed)


def write_transfer_report(path, reports, seed) -> None:
    write_csv(path, REPORT_COLUMNS,
              ((r.case, r.avg_velocity, r.avg_travel_time, r.max_travel_time,
                r.collision_count, r.trials) for r in reports), seed)


def render_report_table(reports) -> str:
    head = f"{'case':<18}{'avg vel [m/s]':>14}{'avg time [s]':>14}{'max time [s]':>14}{'collisions':>12}{'trials':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.case:<18}{r.avg_velocity:>14.3f}{r.avg_travel_time:>14.2f}"
                     f"{r.max_travel_time:>14.2f}{r.collision_count:>12d}{r.trials:>8d}")
    return "\n".join(lines)


def export_space_time(trajectory_path, out_path, seed) -> None:
    """Per-vehicle (time, position) series in the merge-aligned frame, ordered
    for direct plotting of space-time diagrams."""
    _, rows = read_csv(trajectory_path)
    rows.sort(key=lambda r: (r[1], float(r[0])))
    write_csv(out_path, ("vehicle_id", "route", "time", "position_1d", "velocity"),
              ((r[1], r[2], r[0], r[3], r[4]) for r in rows), seed)


def export_velocity_profiles(trajectory_path, out_path, seed) -> None:
    """Velocity-vs-time traces of the first vehicle to enter on each route."""
    _, rows = read_csv(trajectory_path)
    first = {}
    for r in rows:
        route = r[2]
        if route not in first:
            first[route] = r[1]
    keep = [r for r in rows if r[1] == first.get(r[2])]
    keep.sort(key=lambda r: (r[2], float(r[0])))
    write_csv(out_path, ("route", "vehicle_id", "time", "velocity"),
              ((r[2], r[1], r[0], r[4]) for r in keep), seed)
