"""Run metrics: throughput at the sink, loss ratio, delays, and handover
statistics, all recomputable from the raw packet and event logs.

Measurement window: packets whose send time falls in [warmup, duration).
Throughput counts delivered application payload bits only (headers and
tunnel overhead spend link capacity but are not application traffic).

Handover accounting:

* committed exchange procedures count one event each; their duration is the
  procedure time from trigger to commit (the data path keeps flowing through
  the fallback interface meanwhile, so a packet-gap measure would only show
  the message cadence);
* attachment switches in the single-interface scenarios count one event
  each; their duration is the per-terminal packet gap around the switch
  (last delivery via the old attachment to first delivery via the new one);
* re-connections after an outage longer than the configured gap count as
  handovers when the attachment changed, but contribute no duration (the
  outage itself is already visible as disconnected losses);
* events with no packet on either side are indeterminate and excluded from
  the duration mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import CAUSE_DELIVERED, HandoverEvent, RunResult


@dataclass
class RunMetrics:
    scenario: int
    seed: int
    sent: int
    delivered: int
    lost: int
    throughput_kbps: float
    loss_ratio: float
    avg_delay: float | None
    class_delay: dict[str, float | None]
    handover_count: int
    avg_handover_time: float | None
    handover_times: list[float] = field(default_factory=list)

    def metric_values(self) -> dict[str, float | None]:
        out = {
            "throughput_kbps": self.throughput_kbps,
            "loss_ratio": self.loss_ratio,
            "avg_delay": self.avg_delay,
            "handover_count": float(self.handover_count),
            "avg_handover_time": self.avg_handover_time,
        }
        for cls, value in self.class_delay.items():
            out[f"delay_{cls}"] = value
        return out


def _window_mask(result: RunResult) -> np.ndarray:
    return (result.pk_sent >= result.warmup) & (result.pk_sent < result.duration)


def compute_throughput(result: RunResult) -> float:
    """Delivered application bits at the sink over the measurement window,
    in Kbps."""
    mask = _window_mask(result) & result.pk_delivered
    bits = float(result.pk_bits[mask].sum())
    return bits / (result.duration - result.warmup) / 1000.0


def compute_loss_ratio(result: RunResult) -> float:
    mask = _window_mask(result)
    total = int(mask.sum())
    if total == 0:
        return 0.0
    lost = int((mask & ~result.pk_delivered).sum())
    return lost / total


def compute_avg_delay(result: RunResult) -> float | None:
    mask = _window_mask(result) & result.pk_delivered
    if not mask.any():
        return None
    delays = result.pk_tdel[mask] - result.pk_sent[mask]
    return float(delays.mean())


def compute_per_class_delay(
    result: RunResult, flow_class: dict[int, str]
) -> dict[str, float | None]:
    """Mean end-to-end delay of delivered packets per application class;
    classes with no delivered packet get None."""
    out: dict[str, float | None] = {}
    mask = _window_mask(result) & result.pk_delivered
    for flow_id, cls in sorted(flow_class.items()):
        fmask = mask & (result.pk_flow == flow_id)
        if fmask.any():
            out[cls] = float((result.pk_tdel[fmask] - result.pk_sent[fmask]).mean())
        else:
            out[cls] = None
    return out


def attach_switch_duration(
    result: RunResult, event: HandoverEvent, mn_rows: np.ndarray
) -> float | None:
    """Per-terminal packet gap around an attachment switch."""
    delivered = result.pk_delivered[mn_rows]
    rows = mn_rows[delivered]
    if rows.size == 0:
        return None
    poa = result.pk_poa[rows]
    sent = result.pk_sent[rows]
    tdel = result.pk_tdel[rows]
    old_side = (poa == event.old_poa) & (sent < event.t)
    new_side = (poa == event.new_poa) & (sent >= event.t)
    if not old_side.any() or not new_side.any():
        return None
    return max(0.0, float(tdel[new_side].min() - tdel[old_side].max()))


def handover_stats(result: RunResult) -> tuple[int, float | None, list[float]]:
    """(count, mean duration, durations) over the measurement window."""
    by_mn: dict[int, np.ndarray] = {}
    durations: list[float] = []
    count = 0
    for event in result.handovers:
        if event.kind == "initial":
            continue
        if not (result.warmup <= event.t < result.duration):
            continue
        count += 1
        if event.kind == "exchange":
            if event.duration is not None:
                durations.append(event.duration)
        elif event.kind == "attach_switch":
            rows = by_mn.get(event.mn_id)
            if rows is None:
                rows = np.nonzero(result.pk_mn == event.mn_id)[0]
                by_mn[event.mn_id] = rows
            d = attach_switch_duration(result, event, rows)
            if d is not None:
                durations.append(d)
        # "reconnect": counted, no duration
    avg = float(np.mean(durations)) if durations else None
    return count, avg, durations


def compute_metrics(result: RunResult) -> RunMetrics:
    mask = _window_mask(result)
    sent = int(mask.sum())
    delivered = int((mask & result.pk_delivered).sum())
    count, avg_ho, durations = handover_stats(result)
    return RunMetrics(
        scenario=result.scenario,
        seed=result.seed,
        sent=sent,
        delivered=delivered,
        lost=sent - delivered,
        throughput_kbps=compute_throughput(result),
        loss_ratio=compute_loss_ratio(result),
        avg_delay=compute_avg_delay(result),
        class_delay=compute_per_class_delay(result, result.flow_class),
        handover_count=count,
        avg_handover_time=avg_ho,
        handover_times=durations,
    )
