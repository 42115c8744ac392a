"""Radio coverage, air-link impairments, and access-point selection.

Loss per wireless transmission grows with distance from the access point,
with vehicle speed past a knee, and with channel load past a saturation
point; delay grows with channel contention.  Channel load is tracked per air
channel (one per Wi-Fi access point, one for the whole cellular cell) over a
sliding one-second window.
"""

from __future__ import annotations

import math
from collections import deque

from .config import RadioConfig

_BUCKET = 0.1


class Channel:
    """Offered-bits tracker for one shared air channel."""

    def __init__(self, capacity_bps: float, window: float = 1.0):
        self.capacity_bps = capacity_bps
        self.window = window
        self._window_buckets = max(1, int(round(window / _BUCKET)))
        self._buckets: deque[tuple[int, float]] = deque()
        self._total_bits = 0.0

    def _prune(self, t: float) -> None:
        min_bucket = int(t / _BUCKET) - self._window_buckets - 1
        while self._buckets and self._buckets[0][0] <= min_bucket:
            _, bits = self._buckets.popleft()
            self._total_bits -= bits

    def add_bits(self, t: float, bits: float) -> None:
        self._prune(t)
        bucket = int(t / _BUCKET)
        if self._buckets and self._buckets[-1][0] == bucket:
            idx, old = self._buckets[-1]
            self._buckets[-1] = (idx, old + bits)
        else:
            self._buckets.append((bucket, bits))
        self._total_bits += bits

    def utilization(self, t: float) -> float:
        """Offered load over the trailing complete window (the bucket still
        filling is excluded) as a fraction of capacity."""
        self._prune(t)
        current_bucket = int(t / _BUCKET)
        current_bits = 0.0
        if self._buckets and self._buckets[-1][0] == current_bucket:
            current_bits = self._buckets[-1][1]
        return (self._total_bits - current_bits) / (self.window * self.capacity_bps)


def link_delay(latency: float, capacity_bps: float, size_bits: float) -> float:
    """Fixed link latency plus transmission time."""
    return latency + size_bits / capacity_bps


def coverage_check(
    radio: RadioConfig,
    mn_pos: tuple[float, float],
    ap_pos: tuple[float, float],
) -> bool:
    """Whether the position is inside the access point's coverage.

    Full-map radios (no radius) always cover; disc radios cover up to and
    including the radius.
    """
    if radio.coverage_radius is None:
        return True
    return math.dist(mn_pos, ap_pos) <= radio.coverage_radius


class RadioModel:
    def __init__(self, cfg: RadioConfig, channel: Channel):
        self.cfg = cfg
        self.channel = channel

    def covers(self, mn_pos, ap_pos) -> bool:
        return coverage_check(self.cfg, mn_pos, ap_pos)

    def loss_probability(self, distance: float, speed: float, t: float) -> float:
        cfg = self.cfg
        p = cfg.base_loss
        if cfg.coverage_radius is not None and cfg.distance_loss_coeff:
            p += cfg.distance_loss_coeff * (distance / cfg.coverage_radius) ** 2
        p += cfg.speed_loss_coeff * max(0.0, speed - cfg.speed_loss_knee) / 5.0
        u = self.channel.utilization(t)
        if u > cfg.knee_utilization:
            p += cfg.knee_loss_slope * (u - cfg.knee_utilization)
        return min(max(p, 0.0), 0.95)

    def air_delay(self, size_bits: float, t: float) -> float:
        """Base latency plus transmission time plus contention backoff."""
        cfg = self.cfg
        u = min(self.channel.utilization(t), 0.85)
        delay = cfg.air_latency + size_bits / cfg.capacity_bps
        delay += cfg.contention_linear * u
        delay += cfg.contention_quadratic * u * u / (1.0 - u)
        return delay


def pick_nearest_ap(
    pos: tuple[float, float],
    ap_positions: dict[int, tuple[float, float]],
    radius: float,
    noise_rng=None,
    sigma: float = 0.0,
) -> int | None:
    """Strongest (nearest) in-range access point, with optional measurement
    noise in metres of equivalent distance.  Iteration order is sorted by
    access-point id so draws and ties are reproducible."""
    best = None
    best_metric = float("inf")
    for ap_id in sorted(ap_positions):
        d = math.dist(pos, ap_positions[ap_id])
        if d > radius:
            continue
        metric = d
        if noise_rng is not None and sigma > 0:
            metric += float(noise_rng.normal(0.0, sigma))
        if metric < best_metric:
            best_metric = metric
            best = ap_id
    return best


def in_range_aps(
    pos: tuple[float, float],
    ap_positions: dict[int, tuple[float, float]],
    radius: float,
) -> list[int]:
    return [
        ap_id
        for ap_id in sorted(ap_positions)
        if math.dist(pos, ap_positions[ap_id]) <= radius
    ]
