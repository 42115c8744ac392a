import numpy as np
import pytest

from flowmob.config import load_config
from flowmob.engine import HandoverEvent, RunResult
from flowmob.metrics import (
    attach_switch_duration,
    compute_avg_delay,
    compute_metrics,
    compute_per_class_delay,
    compute_throughput,
    handover_stats,
)
from flowmob.runner import run_single
from flowmob.scenarios import ScenarioSpec


def make_result(rows, handovers=(), duration=30.0, warmup=10.0,
                flow_class=None):
    """rows: (mn, flow, t_sent, poa, delivered, t_del, bits)"""
    return RunResult(
        scenario=2,
        seed=1,
        duration=duration,
        warmup=warmup,
        pk_mn=np.array([r[0] for r in rows], dtype=np.int32),
        pk_flow=np.array([r[1] for r in rows], dtype=np.int8),
        pk_sent=np.array([r[2] for r in rows]),
        pk_poa=np.array([r[3] for r in rows], dtype=np.int32),
        pk_delivered=np.array([r[4] for r in rows], dtype=bool),
        pk_tdel=np.array([r[5] for r in rows]),
        pk_cause=np.array([0 if r[4] else 1 for r in rows], dtype=np.int8),
        pk_bits=np.array([r[6] for r in rows], dtype=np.int32),
        handovers=list(handovers),
        flow_class=flow_class or {1: "safety", 2: "comfort", 3: "user"},
    )


class TestThroughput:
    def test_zero_senders(self):
        result = make_result([])
        assert compute_throughput(result) == 0.0

    def test_counts_delivered_payload_bits_in_window(self):
        rows = [
            (0, 1, 5.0, 1, True, 5.01, 1000),    # before warmup: excluded
            (0, 1, 15.0, 1, True, 15.01, 1000),  # counted
            (0, 1, 16.0, 1, False, np.nan, 1000),  # lost: not counted
        ]
        result = make_result(rows)
        assert compute_throughput(result) == pytest.approx(1000 / 20.0 / 1000.0)

    def test_agrees_with_independent_summation(self):
        cfg = load_config(None, {"run": {"vehicle_count": 5, "duration": 30.0}})
        spec = ScenarioSpec(scenario=2, active_senders=5, vehicle_count=5, seeds=1)
        metrics, result = run_single(spec, cfg, 1)
        total = 0.0
        for i in range(len(result.pk_sent)):
            if (result.warmup <= result.pk_sent[i] < result.duration
                    and result.pk_delivered[i]):
                total += float(result.pk_bits[i])
        expected = total / (result.duration - result.warmup) / 1000.0
        assert metrics.throughput_kbps == pytest.approx(expected, rel=0, abs=0)


class TestDelays:
    def test_all_equal_delays(self):
        rows = [(0, f, 12.0 + f, 1, True, 12.0 + f + 0.05, 100) for f in (1, 2, 3)]
        result = make_result(rows)
        per_class = compute_per_class_delay(result, result.flow_class)
        assert per_class == {
            "safety": pytest.approx(0.05),
            "comfort": pytest.approx(0.05),
            "user": pytest.approx(0.05),
        }
        assert compute_avg_delay(result) == pytest.approx(0.05)

    def test_class_without_deliveries_marked_no_data(self):
        rows = [
            (0, 1, 12.0, 1, True, 12.05, 100),
            (0, 2, 12.0, 1, False, np.nan, 100),
        ]
        result = make_result(rows)
        per_class = compute_per_class_delay(result, result.flow_class)
        assert per_class["safety"] == pytest.approx(0.05)
        assert per_class["comfort"] is None
        assert per_class["user"] is None

    def test_no_deliveries_avg_none(self):
        result = make_result([(0, 1, 12.0, 1, False, np.nan, 100)])
        assert compute_avg_delay(result) is None


class TestHandoverAccounting:
    def test_exchange_duration_used_directly(self):
        event = HandoverEvent(t=15.0, mn_id=0, kind="exchange", old_poa=1,
                              new_poa=2, duration=0.04, origin="link_activation")
        result = make_result([], handovers=[event])
        count, avg, durations = handover_stats(result)
        assert count == 1
        assert avg == pytest.approx(0.04)

    def test_attach_switch_uses_packet_gap(self):
        rows = [
            (0, 1, 14.9, 1, True, 15.00, 100),
            (0, 1, 15.2, 2, True, 15.05, 100),
        ]
        event = HandoverEvent(t=15.1, mn_id=0, kind="attach_switch",
                              old_poa=1, new_poa=2)
        result = make_result(rows, handovers=[event])
        count, avg, _ = handover_stats(result)
        assert count == 1
        assert avg == pytest.approx(0.05)

    def test_reconnect_counts_without_duration(self):
        event = HandoverEvent(t=15.0, mn_id=0, kind="reconnect",
                              old_poa=1, new_poa=2)
        result = make_result([], handovers=[event])
        count, avg, _ = handover_stats(result)
        assert count == 1
        assert avg is None

    def test_initial_attachment_not_counted(self):
        event = HandoverEvent(t=15.0, mn_id=0, kind="initial",
                              old_poa=None, new_poa=1)
        result = make_result([], handovers=[event])
        assert handover_stats(result)[0] == 0

    def test_events_outside_window_not_counted(self):
        events = [
            HandoverEvent(t=5.0, mn_id=0, kind="exchange", old_poa=1,
                          new_poa=2, duration=0.1),
            HandoverEvent(t=40.0, mn_id=0, kind="exchange", old_poa=1,
                          new_poa=2, duration=0.1),
        ]
        result = make_result([], handovers=events)
        assert handover_stats(result)[0] == 0

    def test_silent_switch_excluded_from_mean(self):
        event = HandoverEvent(t=15.0, mn_id=0, kind="attach_switch",
                              old_poa=1, new_poa=2)
        result = make_result([], handovers=[event])
        count, avg, _ = handover_stats(result)
        assert count == 1
        assert avg is None

    def test_make_before_break_clamps(self):
        rows = [
            (0, 1, 15.2, 2, True, 15.23, 100),  # new side delivers early
            (0, 1, 15.0, 1, True, 15.30, 100),  # old side delivers late
        ]
        event = HandoverEvent(t=15.1, mn_id=0, kind="attach_switch",
                              old_poa=1, new_poa=2)
        result = make_result(rows, handovers=[event])
        mn_rows = np.arange(2)
        assert attach_switch_duration(result, event, mn_rows) == 0.0


class TestRecomputationFromRawLog:
    def test_metrics_match_independent_recomputation(self):
        cfg = load_config(None, {"run": {"vehicle_count": 5, "duration": 40.0}})
        spec = ScenarioSpec(scenario=3, active_senders=5, vehicle_count=5, seeds=1)
        metrics, result = run_single(spec, cfg, 7)
        w = (result.pk_sent >= result.warmup) & (result.pk_sent < result.duration)
        sent = int(w.sum())
        delivered = int((w & result.pk_delivered).sum())
        assert metrics.sent == sent
        assert metrics.delivered == delivered
        assert metrics.loss_ratio == pytest.approx((sent - delivered) / sent)
        delays = result.pk_tdel[w & result.pk_delivered] - result.pk_sent[w & result.pk_delivered]
        assert metrics.avg_delay == pytest.approx(float(delays.mean()))
        bits = float(result.pk_bits[w & result.pk_delivered].sum())
        assert metrics.throughput_kbps == pytest.approx(bits / 30.0 / 1000.0)
