#!/usr/bin/env python3
"""Regenerate data/sample_urban.trace.

Fifty vehicles wander for 130 s at 10-16 m/s between waypoints placed inside
the default Wi-Fi cells, so the whole fleet stays within radio coverage (the
urban stand-in map is fully covered; coverage gaps are the grid map's job).
Deterministic: same seed, same file.
"""

import argparse
import math
import os
import sys

import numpy as np

AP_POSITIONS = [(250.0, 300.0), (600.0, 500.0), (950.0, 300.0)]
RADIUS = 330.0
WAYPOINT_MARGIN = 0.78  # waypoints inside this fraction of the cell radius
PATH_MARGIN = 0.97  # positions must stay inside this fraction of a cell
DURATION = 130.0
STEP = 1.0
VEHICLES = 50


def in_union(p, margin=PATH_MARGIN):
    return any(
        math.dist(p, ap) <= RADIUS * margin for ap in AP_POSITIONS
    )


def waypoint_in(ap, rng):
    angle = rng.uniform(0, 2 * math.pi)
    rad = RADIUS * WAYPOINT_MARGIN * math.sqrt(rng.uniform())
    return (ap[0] + rad * math.cos(angle), ap[1] + rad * math.sin(angle))


def _next_cell(home, step_idx, rng):
    # Mostly roam the home cell with occasional visits to an adjacent one
    # (the outer cells only overlap the middle cell, never each other).
    # Outer homes visit rarely and the middle home often, which keeps the
    # time-averaged per-cell occupancy balanced.
    visit_every = 2 if home == 1 else 5
    if step_idx % visit_every != visit_every - 1:
        return home
    if home == 1:
        return 0 if rng.uniform() < 0.5 else 2
    return 1


def vehicle_path(vid, rng):
    home = vid % len(AP_POSITIONS)
    pos = waypoint_in(AP_POSITIONS[home], rng)
    leg = 0
    cell = _next_cell(home, leg, rng)
    waypoint = waypoint_in(AP_POSITIONS[cell], rng)
    speed = rng.uniform(10.0, 16.0)
    points = [pos]
    t = 0.0
    while t < DURATION:
        t += STEP
        for _ in range(40):
            d = math.dist(pos, waypoint)
            if d < speed * STEP:
                leg += 1
                cell = _next_cell(home, leg, rng)
                waypoint = waypoint_in(AP_POSITIONS[cell], rng)
                speed = rng.uniform(10.0, 16.0)
                continue
            heading = math.atan2(waypoint[1] - pos[1], waypoint[0] - pos[0])
            heading += rng.normal(0.0, 0.08)
            nxt = (
                pos[0] + speed * STEP * math.cos(heading),
                pos[1] + speed * STEP * math.sin(heading),
            )
            if in_union(nxt):
                pos = nxt
                break
            waypoint = waypoint_in(AP_POSITIONS[cell], rng)
        else:
            raise RuntimeError("could not keep the path inside coverage")
        points.append(pos)
    return points


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=2013)
    parser.add_argument(
        "--out",
        default=os.path.join(os.path.dirname(__file__), "..", "data",
                             "sample_urban.trace"),
    )
    args = parser.parse_args()

    rng = np.random.Generator(np.random.Philox(args.seed))
    lines = ["# t vehicle_id x y"]
    for vid in range(VEHICLES):
        vehicle_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(args.seed, spawn_key=(vid,)))
        )
        points = vehicle_path(vid, vehicle_rng)
        for i, (x, y) in enumerate(points):
            lines.append(f"{i * STEP:.1f} {vid} {x:.2f} {y:.2f}")
    out = os.path.abspath(args.out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    print(f"wrote {out}: {VEHICLES} vehicles, {DURATION:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
