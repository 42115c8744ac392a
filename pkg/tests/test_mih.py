import copy

import pytest

from flowmob.mih import (
    FlowStatus,
    FlowStatusStore,
    InterfaceEntry,
    InterfaceStatus,
    LinkEventKind,
    MagContainer,
    MihEvent,
    Mihf,
    Scope,
    Thresholds,
    ThresholdVerdict,
    UnauthorizedScope,
    UnknownInterface,
    evaluate_thresholds,
    query_information,
)


class TestFlowStatusStore:
    def test_single_delivered_sample(self):
        store = FlowStatusStore(window=1.0)
        status = store.record_sample(1, True, 0.02, 512, now=0.5)
        assert status.delay == pytest.approx(0.02)
        assert status.packet_loss == 0.0
        assert status.has_data

    def test_loss_ratio_one_in_ten(self):
        store = FlowStatusStore(window=1.0)
        for i in range(9):
            store.record_sample(1, True, 0.01, 512, now=0.1 * i)
        status = store.record_sample(1, False, 0.0, 512, now=0.95)
        assert status.packet_loss == pytest.approx(0.1)

    def test_throughput_13_messages_of_64_bytes(self):
        # 13 delivered 64-byte messages inside a 1 s window: 13*64*8 bps.
        store = FlowStatusStore(window=1.0)
        for i in range(13):
            status = store.record_sample(1, True, 0.005, 64 * 8, now=0.07 * i)
        assert status.throughput == pytest.approx(6656.0)

    def test_window_expiry_reports_no_data(self):
        store = FlowStatusStore(window=1.0)
        store.record_sample(1, True, 0.01, 512, now=0.0)
        status = store.status(1, now=1.5)
        assert not status.has_data
        assert status.throughput == 0.0

    def test_lost_samples_do_not_count_toward_throughput(self):
        store = FlowStatusStore(window=1.0)
        store.record_sample(1, True, 0.01, 1000, now=0.0)
        status = store.record_sample(1, False, 0.0, 1000, now=0.1)
        assert status.throughput == pytest.approx(1000.0)

    def test_negative_delay_rejected(self):
        store = FlowStatusStore()
        with pytest.raises(ValueError):
            store.record_sample(1, True, -0.1, 10, now=0.0)


class TestThresholds:
    def test_loss_above_upper(self):
        status = FlowStatus(1, packet_loss=0.5, delay=0.01, throughput=100,
                            has_data=True)
        th = Thresholds(loss_upper=0.1)
        result = evaluate_thresholds(status, th)
        assert result.verdict is ThresholdVerdict.ABOVE_UPPER
        assert result.metric == "packet_loss"

    def test_all_within_bounds(self):
        status = FlowStatus(1, packet_loss=0.01, delay=0.01, throughput=100,
                            has_data=True)
        th = Thresholds(loss_upper=0.1, delay_upper=0.5)
        assert evaluate_thresholds(status, th).verdict is ThresholdVerdict.WITHIN_BOUNDS

    def test_delay_below_lower(self):
        status = FlowStatus(1, packet_loss=0.01, delay=0.001, throughput=100,
                            has_data=True)
        th = Thresholds(loss_upper=0.1, delay_lower=0.005)
        result = evaluate_thresholds(status, th)
        assert result.verdict is ThresholdVerdict.BELOW_LOWER
        assert result.metric == "delay"

    def test_precedence_loss_over_delay(self):
        status = FlowStatus(1, packet_loss=0.9, delay=9.0, throughput=0,
                            has_data=True)
        th = Thresholds(loss_upper=0.1, delay_upper=0.5)
        assert evaluate_thresholds(status, th).metric == "packet_loss"

    def test_no_data_is_within_bounds(self):
        status = FlowStatus(1, has_data=False)
        th = Thresholds(loss_upper=0.0, delay_upper=0.0)
        assert evaluate_thresholds(status, th).verdict is ThresholdVerdict.WITHIN_BOUNDS

    def test_pure_function(self):
        status = FlowStatus(1, packet_loss=0.2, has_data=True)
        th = Thresholds(loss_upper=0.1)
        assert evaluate_thresholds(status, th) == evaluate_thresholds(status, th)

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ValueError):
            Thresholds(loss_lower=0.5, loss_upper=0.1)


def make_mihf():
    mihf = Mihf("mn1", "mn")
    mihf.register_interface(InterfaceEntry(1, "lte"))
    mihf.register_interface(InterfaceEntry(2, "wifi"))
    return mihf


class TestLinkEvents:
    def test_link_up_activates_and_notifies(self):
        mihf = make_mihf()
        seen = []
        mihf.subscribe(seen.append)
        n = mihf.on_link_event(
            MihEvent(LinkEventKind.LINK_UP, 2, 1.0, {"poa": 3})
        )
        assert n == 1
        assert mihf.interfaces[2].status is InterfaceStatus.ACTIVE
        assert mihf.interfaces[2].poa == 3
        assert len(seen) == 1

    def test_link_down_clears_poa(self):
        mihf = make_mihf()
        mihf.on_link_event(MihEvent(LinkEventKind.LINK_UP, 2, 1.0, {"poa": 3}))
        mihf.on_link_event(MihEvent(LinkEventKind.LINK_DOWN, 2, 2.0))
        assert mihf.interfaces[2].status is InterfaceStatus.INACTIVE
        assert mihf.interfaces[2].poa is None

    def test_unregistered_interface_raises(self):
        mihf = make_mihf()
        with pytest.raises(UnknownInterface):
            mihf.on_link_event(MihEvent(LinkEventKind.LINK_UP, 9, 1.0))

    def test_subscribers_notified_in_registration_order(self):
        mihf = make_mihf()
        order = []
        mihf.subscribe(lambda e: order.append("a"))
        mihf.subscribe(lambda e: order.append("b"))
        mihf.on_link_event(MihEvent(LinkEventKind.LINK_UP, 1, 0.0))
        assert order == ["a", "b"]

    def test_status_only_changes_via_events(self):
        mihf = make_mihf()
        mihf.flow_store.record_sample(1, True, 0.01, 100, now=0.0)
        assert mihf.interfaces[1].status is InterfaceStatus.INACTIVE


class TestQueryInformation:
    def containers(self):
        return {
            i: MagContainer(i, f"addr{i}", (0.0, 0.0), 330.0, "wifi",
                            subnet_info=[f"HNP{i}"])
            for i in (1, 2, 3, 100)
        }

    def test_domain_wide_for_anchor(self):
        lma = Mihf("lma", "lma")
        snapshot = query_information(
            Scope.DOMAIN_WIDE, "lma", lma, self.containers()
        )
        assert set(snapshot) == {1, 2, 3, 100}

    def test_local_links_for_gateway(self):
        mag = Mihf("mag1", "mag")
        mag.register_interface(InterfaceEntry(1, "wifi"))
        snapshot = query_information(Scope.LOCAL_LINKS, "mag", mag)
        assert set(snapshot["interfaces"]) == {1}

    def test_terminal_cannot_ask_domain_wide(self):
        mn = make_mihf()
        with pytest.raises(UnauthorizedScope):
            query_information(Scope.DOMAIN_WIDE, "mn", mn, {})

    def test_snapshot_isolation(self):
        containers = self.containers()
        lma = Mihf("lma", "lma")
        snapshot = query_information(Scope.DOMAIN_WIDE, "lma", lma, containers)
        containers[1].subnet_info.append("HNP99")
        assert snapshot[1].subnet_info == ["HNP1"]

    def test_local_snapshot_isolation(self):
        mn = make_mihf()
        mn.flow_store.record_sample(1, True, 0.01, 100, now=0.0)
        snapshot = query_information(Scope.LOCAL_LINKS, "mn", mn, now=0.0)
        before = copy.deepcopy(snapshot["flow_statuses"][1])
        mn.flow_store.record_sample(1, False, 0.0, 100, now=0.1)
        assert snapshot["flow_statuses"][1] == before
