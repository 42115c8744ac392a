"""Vehicle position models: a Manhattan grid walk and replay of externally
generated position traces.

Manhattan vehicles move at constant speed along the lines of a rows x cols
block grid, resampling their heading at intersections from the configured
(straight, left, right) probabilities.  Headings that would leave the map get
their probability mass redistributed; when nothing remains the vehicle
reverses, so positions always stay on grid lines.

Trace replay interpolates linearly between records and uses no randomness.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

from .config import MobilityConfig

_EPS = 1e-9


class TraceError(Exception):
    pass


class OutOfSpan(Exception):
    pass


class UnknownVehicle(KeyError):
    pass


@dataclass
class VehicleState:
    x: float
    y: float
    dx: int
    dy: int


def _snap(value: float, block: float) -> float:
    return round(value / block) * block


def _turn_options(dx: int, dy: int):
    # straight, left, right relative to the heading
    return ((dx, dy), (-dy, dx), (dy, -dx))


def manhattan_step(
    state: VehicleState,
    speed: float,
    dt: float,
    cfg: MobilityConfig,
    rng,
) -> VehicleState:
    """Advance one vehicle by speed*dt, turning at intersections."""
    remaining = speed * dt
    block = cfg.block_size
    width, height = cfg.width, cfg.height
    while remaining > _EPS:
        if state.dx != 0:
            along, lo, hi = state.x, 0.0, width
            direction = state.dx
        else:
            along, lo, hi = state.y, 0.0, height
            direction = state.dy
        if direction > 0:
            next_node = math.floor(along / block + _EPS) * block + block
            dist = min(next_node, hi) - along
        else:
            next_node = math.ceil(along / block - _EPS) * block - block
            dist = along - max(next_node, lo)
        if dist > remaining + _EPS:
            step = remaining
            if state.dx != 0:
                state.x += state.dx * step
            else:
                state.y += state.dy * step
            remaining = 0.0
        else:
            if state.dx != 0:
                state.x += state.dx * dist
                state.x = _snap(state.x, block)
            else:
                state.y += state.dy * dist
                state.y = _snap(state.y, block)
            remaining -= dist
            _choose_heading(state, cfg, rng)
    return state


def _choose_heading(state: VehicleState, cfg: MobilityConfig, rng) -> None:
    width, height = cfg.width, cfg.height
    options = _turn_options(state.dx, state.dy)
    probs = cfg.turn_probabilities
    allowed = []
    for (dx, dy), p in zip(options, probs):
        nx, ny = state.x + dx * _EPS * 2, state.y + dy * _EPS * 2
        if -_EPS <= state.x + dx * cfg.block_size <= width + _EPS and (
            -_EPS <= state.y + dy * cfg.block_size <= height + _EPS
        ):
            if 0 - _EPS <= nx <= width + _EPS and 0 - _EPS <= ny <= height + _EPS:
                allowed.append(((dx, dy), p))
    total = sum(p for _, p in allowed)
    if not allowed or total <= 0:
        state.dx, state.dy = -state.dx, -state.dy
        return
    u = rng.random() * total
    acc = 0.0
    for (dx, dy), p in allowed:
        acc += p
        if u <= acc:
            state.dx, state.dy = dx, dy
            return
    state.dx, state.dy = allowed[-1][0]


class ManhattanMobility:
    """Grid walk for a fleet; one RNG substream per vehicle so the fleet
    size never perturbs an individual vehicle's path."""

    def __init__(self, cfg: MobilityConfig, speed: float, vehicle_ids, rng_for):
        self.cfg = cfg
        self.speed = speed
        self._rngs = {vid: rng_for(vid) for vid in vehicle_ids}
        self._states: dict[int, VehicleState] = {}
        self._time = 0.0
        for vid in vehicle_ids:
            self._states[vid] = self._initial_state(self._rngs[vid])

    def _initial_state(self, rng) -> VehicleState:
        cfg = self.cfg
        horizontal = rng.random() < 0.5
        if horizontal:
            line = int(rng.integers(0, cfg.rows + 1)) * cfg.block_size
            offset = float(rng.random()) * cfg.width
            heading = 1 if rng.random() < 0.5 else -1
            return VehicleState(x=offset, y=line, dx=heading, dy=0)
        line = int(rng.integers(0, cfg.cols + 1)) * cfg.block_size
        offset = float(rng.random()) * cfg.height
        heading = 1 if rng.random() < 0.5 else -1
        return VehicleState(x=line, y=offset, dx=0, dy=heading)

    def advance_to(self, t: float) -> None:
        dt = t - self._time
        if dt < 0:
            raise ValueError("mobility cannot run backwards")
        if dt == 0:
            return
        for vid, state in self._states.items():
            manhattan_step(state, self.speed, dt, self.cfg, self._rngs[vid])
        self._time = t

    def position(self, vid: int) -> tuple[float, float]:
        state = self._states[vid]
        return (state.x, state.y)

    def vehicle_ids(self):
        return list(self._states)

    def extent(self) -> tuple[float, float]:
        return (self.cfg.width, self.cfg.height)


class Trace:
    """Parsed position trace: per-vehicle (time, x, y) records."""

    MAX_SPEED = 50.0

    def __init__(self, records: dict[int, list[tuple[float, float, float]]]):
        self.records = records

    @classmethod
    def from_file(cls, path: str) -> "Trace":
        records: dict[int, list[tuple[float, float, float]]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                fields = line.split()
                if len(fields) != 4:
                    raise TraceError(f"line {lineno}: expected 't vid x y'")
                try:
                    t, x, y = float(fields[0]), float(fields[2]), float(fields[3])
                    vid = int(fields[1])
                except ValueError:
                    if lineno == 1:
                        continue  # optional header line
                    raise TraceError(f"line {lineno}: non-numeric record")
                records.setdefault(vid, []).append((t, x, y))
        if not records:
            raise TraceError("trace contains no records")
        trace = cls(records)
        trace.validate()
        return trace

    def validate(self) -> None:
        for vid, recs in self.records.items():
            for i in range(1, len(recs)):
                t0, x0, y0 = recs[i - 1]
                t1, x1, y1 = recs[i]
                if t1 <= t0:
                    raise TraceError(
                        f"vehicle {vid}: times not strictly increasing at t={t1}"
                    )
                speed = math.hypot(x1 - x0, y1 - y0) / (t1 - t0)
                if speed > self.MAX_SPEED:
                    raise TraceError(
                        f"vehicle {vid}: implied speed {speed:.1f} m/s exceeds "
                        f"{self.MAX_SPEED} m/s at t={t1}"
                    )

    def vehicle_ids(self):
        return sorted(self.records)

    def span(self, vid: int) -> tuple[float, float]:
        recs = self.records.get(vid)
        if recs is None:
            raise UnknownVehicle(vid)
        return recs[0][0], recs[-1][0]

    def position(self, vid: int, t: float) -> tuple[float, float]:
        recs = self.records.get(vid)
        if recs is None:
            raise UnknownVehicle(vid)
        times = [r[0] for r in recs]
        if t < times[0] - _EPS or t > times[-1] + _EPS:
            raise OutOfSpan((vid, t))
        i = bisect_right(times, t)
        if i == 0:
            return recs[0][1], recs[0][2]
        if i >= len(recs):
            return recs[-1][1], recs[-1][2]
        t0, x0, y0 = recs[i - 1]
        t1, x1, y1 = recs[i]
        if t1 == t0:
            return x1, y1
        frac = (t - t0) / (t1 - t0)
        return x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)

    def extent(self) -> tuple[float, float]:
        xs = [x for recs in self.records.values() for (_, x, _) in recs]
        ys = [y for recs in self.records.values() for (_, _, y) in recs]
        return max(xs), max(ys)


class TraceMobility:
    """Adapter exposing a trace through the mobility interface."""

    def __init__(self, trace: Trace):
        self.trace = trace
        self._time = 0.0

    def advance_to(self, t: float) -> None:
        self._time = t

    def position(self, vid: int) -> tuple[float, float]:
        lo, hi = self.trace.span(vid)
        t = min(max(self._time, lo), hi)
        return self.trace.position(vid, t)

    def vehicle_ids(self):
        return self.trace.vehicle_ids()

    def extent(self) -> tuple[float, float]:
        return self.trace.extent()
