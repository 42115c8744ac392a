"""Message-sequence tests for the five flow-handover procedures, plus the
candidate-choice rule, abort atomicity, and the handover gap measure.

Controllers talk over a scripted fabric that delivers messages in send
order; each procedure must emit exactly its expected message kinds.
"""

import copy
from collections import deque
from itertools import count

import pytest

from flowmob.entities import (
    EmptyCandidates,
    ExchangeOrigin,
    ExchangeRecord,
    ExchangeState,
    LmaController,
    MagController,
    MnController,
    TargetUnreachable,
    measure_handover,
    mn_candidate_choice,
)
from flowmob.flows import fallback_flow_table
from flowmob.mih import FlowStatus, InterfaceEntry, InterfaceStatus, MagContainer
from flowmob.pmip import MessageKind


class FakeTimer:
    def __init__(self, fn, args):
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True

    def fire(self):
        if not self.cancelled:
            self.fn(*self.args)


class FakeFabric:
    exchange_timeout = 0.5
    debounce_interval = 1.0
    volunteer_cooldown = 5.0
    absorb_margin = 0.2
    domain_breach_windows = 2

    def __init__(self):
        self.t = 0.0
        self.queue = deque()
        self.sent = []
        self.timers = []
        self.transitions = []
        self.committed = []
        self.aborted = []
        self._ids = count(1)
        self.nodes = {}
        self.candidates = []
        self.utilizations = {}
        self.reachable = set()
        self.iface_map = {}
        self.lma = None

    def now(self):
        return self.t

    def next_exchange_id(self):
        return next(self._ids)

    def send(self, msg):
        self.sent.append(msg)
        self.queue.append(msg)

    def timer(self, delay, fn, *args):
        timer = FakeTimer(fn, args)
        self.timers.append(timer)
        return timer

    def log_transition(self, entity, exchange_id, step):
        self.transitions.append((entity, exchange_id, step))

    def on_exchange_committed(self, record):
        self.committed.append(record)
        if self.lma is not None:
            self.lma.release(record.mn_id, record.flow_ids)

    def on_exchange_aborted(self, record):
        self.aborted.append(record)
        if self.lma is not None:
            self.lma.release(record.mn_id, record.flow_ids)

    def candidate_mags(self, mn_id, flow_id, exclude):
        return [c for c in self.candidates if c.poa_id != exclude]

    def mag_utilization(self, mag_id):
        return self.utilizations.get(mag_id, 0.0)

    def mn_reachable_mags(self, mn_id):
        return set(self.reachable)

    def iface_for_mag(self, mn_id, mag_id):
        return self.iface_map.get(mag_id)

    def pick_relief_target(self, mag_id, flow_id):
        return None

    def deliver_all(self):
        while self.queue:
            msg = self.queue.popleft()
            self.t += 0.001
            node = self.nodes.get(msg.dst)
            if node is not None:
                node.handle_message(msg)

    def kinds_since(self, start):
        return [m.kind for m in self.sent[start:]]


def container(poa_id, flow_id=1, loss=0.0, delay=0.0, throughput=0.0):
    return MagContainer(
        poa_id=poa_id,
        link_addr=f"addr{poa_id}",
        location=(0.0, 0.0),
        channel_range=330.0,
        system_info="wifi",
        subnet_info=["HNP1"],
        flow_statuses={
            flow_id: FlowStatus(flow_id, throughput=throughput,
                                packet_loss=loss, delay=delay, has_data=True)
        },
    )


def make_net():
    """Terminal mn7 attached at wifi gateway 1 and cellular gateway 100."""
    fabric = FakeFabric()
    lma = LmaController(fabric)
    fabric.lma = lma
    mag1 = MagController(1, fabric)
    mag2 = MagController(2, fabric)
    mag100 = MagController(100, fabric)
    mn = MnController(7, fallback_flow_table(), fabric)
    mn.mihf.register_interface(
        InterfaceEntry(1, "lte", poa=100, status=InterfaceStatus.ACTIVE)
    )
    mn.mihf.register_interface(
        InterfaceEntry(2, "wifi", poa=1, status=InterfaceStatus.ACTIVE)
    )
    fabric.nodes = {"lma": lma, "mag1": mag1, "mag2": mag2, "mag100": mag100,
                    "mn7": mn}
    fabric.iface_map = {1: 2, 2: 2, 100: 1}
    fabric.reachable = {1, 100}
    # attach at both gateways and establish the flows
    mag1.on_attach(7, 2, hint_flows=())
    mag100.on_attach(7, 1, hint_flows=())
    fabric.deliver_all()
    for flow in (1,):
        lma.bindings.establish_flow(7, flow, 100)
    for flow in (2, 3):
        lma.bindings.establish_flow(7, flow, 1)
        mn.homed_poa[flow] = 1
    mn.homed_poa[1] = 100
    fabric.sent.clear()
    return fabric, lma, mag1, mag2, mag100, mn


@pytest.fixture
def net():
    return make_net()


def snapshot_state(lma, mn, mags):
    return copy.deepcopy(
        {
            "bces": lma.bindings.bces,
            "flow_hnp": lma.bindings.flow_hnp,
            "flow_bind": lma.bindings.flow_bind,
            "bindings": mn.bindings,
            "homed": mn.homed_poa,
            "attachments": [m.bindings.attachments for m in mags],
        }
    )


class TestActivationSequence:
    """Interface-activation handover: PBU with hint, PBA with the flow's
    existing prefix, terminal notified."""

    def test_message_kinds(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        hnp_before = lma.bindings.flow_hnp[(7, 2)]
        record = ExchangeRecord(
            exchange_id=fabric.next_exchange_id(), mn_id=7, flow_ids=(2, 3),
            origin=ExchangeOrigin.LINK_ACTIVATION, start_time=fabric.now(),
            trigger_time=fabric.now(), old_attachment=1, target=2,
        )
        record.advance(ExchangeState.COMMITTING)
        mn.pending[2] = record
        mn.pending[3] = record
        mag2.on_attach(7, 2, hint_flows=(2, 3), exchange_context={
            "exchange_id": record.exchange_id,
            "origin": "link_activation",
            "trigger_time": record.trigger_time,
            "old_attachment": 1,
        })
        fabric.deliver_all()
        assert fabric.kinds_since(0) == [
            MessageKind.PBU, MessageKind.PBA, MessageKind.MN_NOTIFY,
        ]
        assert record.state is ExchangeState.COMMITTED
        # prefix continuity: same prefix, now also on gateway 2's entry
        assert lma.bindings.flow_hnp[(7, 2)] == hnp_before
        assert hnp_before in lma.bindings.bces[(7, 2)].hnp_list
        assert mn.homed_poa[2] == 2 and mn.homed_poa[3] == 2

    def test_attach_without_hint_sends_no_notify(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        mag2.on_attach(8, 2, hint_flows=())
        fabric.deliver_all()
        assert fabric.kinds_since(0) == [MessageKind.PBU, MessageKind.PBA]


class TestMnInitiatedSequence:
    """Terminal-initiated handover: request up, candidates down, commit to
    the chosen gateway, binding update, ack."""

    EXPECTED = [
        MessageKind.FLOW_MOVE_REQUEST,     # mn -> serving gateway
        MessageKind.FLOW_MOVE_REQUEST,     # gateway -> anchor
        MessageKind.FLOW_MOVE_CANDIDATES,  # anchor -> gateway
        MessageKind.FLOW_MOVE_CANDIDATES,  # gateway -> mn
        MessageKind.FLOW_MOVE_COMMIT,      # mn -> chosen gateway
        MessageKind.PBU,                   # chosen gateway -> anchor
        MessageKind.PBA,                   # anchor -> chosen gateway
        MessageKind.FLOW_MOVE_ACK,         # chosen gateway -> mn
    ]

    def test_message_kinds_and_rebinding(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = [container(100, flow_id=3, loss=0.01)]
        record = mn.on_flow_degraded(3, "delay")
        fabric.deliver_all()
        assert fabric.kinds_since(0) == self.EXPECTED
        assert record.state is ExchangeState.COMMITTED
        assert mn.bindings[3] == 1  # cellular interface
        assert lma.bindings.flow_bind[(7, 3)] == lma.bindings.bces[(7, 100)].bind_id
        assert fabric.committed[-1] is record

    def test_empty_candidates_aborts_without_changes(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = []
        before = snapshot_state(lma, mn, [mag1, mag2, mag100])
        record = mn.on_flow_degraded(3, "delay")
        fabric.deliver_all()
        assert record.state is ExchangeState.ABORTED
        assert snapshot_state(lma, mn, [mag1, mag2, mag100]) == before
        assert fabric.aborted == [record]

    def test_timeout_aborts(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = [container(100)]
        record = mn.on_flow_degraded(3, "delay")
        before = snapshot_state(lma, mn, [mag1, mag2, mag100])
        # anchor never answers: fire the guard timer instead of delivering
        fabric.queue.clear()
        fabric.timers[-1].fire()
        assert record.state is ExchangeState.ABORTED
        assert snapshot_state(lma, mn, [mag1, mag2, mag100]) == before

    def test_second_exchange_rejected_while_in_flight(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = [container(100)]
        first = mn.on_flow_degraded(3, "delay")
        assert first is not None
        assert mn.on_flow_degraded(3, "delay") is None
        fabric.deliver_all()
        assert first.state is ExchangeState.COMMITTED

    def test_debounce_after_commit(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = [container(100)]
        mn.on_flow_degraded(3, "delay")
        fabric.deliver_all()
        assert mn.on_flow_degraded(3, "delay") is None  # debounced
        fabric.t += 2.0
        fabric.candidates = [container(1)]
        assert mn.on_flow_degraded(3, "delay") is not None


class TestCandidateChoice:
    def test_single_candidate(self):
        assert mn_candidate_choice([container(5)], "packet_loss") == 5

    def test_argmin_of_violated_metric(self):
        cands = [container(3, loss=0.08), container(4, loss=0.02)]
        assert mn_candidate_choice(cands, "packet_loss") == 4

    def test_tie_breaks_to_lower_id(self):
        cands = [container(3, loss=0.05), container(2, loss=0.05)]
        assert mn_candidate_choice(cands, "packet_loss") == 2

    def test_empty_raises(self):
        with pytest.raises(EmptyCandidates):
            mn_candidate_choice([], "packet_loss")

    def test_exhaustive_comparison_oracle(self):
        # two-candidate scenario: the rule must agree with trying both
        for metric, key in (
            ("packet_loss", lambda c: c.flow_statuses[1].packet_loss),
            ("delay", lambda c: c.flow_statuses[1].delay),
        ):
            for a, b in [(0.01, 0.03), (0.03, 0.01), (0.02, 0.02)]:
                cands = [
                    container(9, loss=a, delay=a),
                    container(4, loss=b, delay=b),
                ]
                best = min(cands, key=lambda c: (key(c), c.poa_id))
                assert mn_candidate_choice(cands, metric) == best.poa_id

    def test_throughput_prefers_higher(self):
        cands = [container(3, throughput=100.0), container(4, throughput=900.0)]
        assert mn_candidate_choice(cands, "throughput") == 4


class TestMagInitiatedSequence:
    """Gateway-initiated handover, both directions."""

    EXPECTED = [
        MessageKind.FLOW_MOVE_REQUEST,     # gateway -> anchor
        MessageKind.FLOW_MOVE_CANDIDATES,  # anchor -> gateway
        MessageKind.FLOW_MOVE_COMMIT,      # gateway -> peer gateway
        MessageKind.PBU,                   # receiving gateway -> anchor
        MessageKind.PBA,                   # anchor -> receiving gateway
        MessageKind.MN_NOTIFY,             # receiving gateway -> terminal
    ]

    def test_overload_moves_flow_and_notifies_last(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = [container(100, flow_id=2)]
        record = mag1.on_threshold_violation(7, 2, "above_upper")
        fabric.deliver_all()
        assert fabric.kinds_since(0) == self.EXPECTED
        assert fabric.sent[-1].kind is MessageKind.MN_NOTIFY
        assert mn.bindings[2] == 1  # moved to the cellular interface
        assert lma.bindings.flow_bind[(7, 2)] == lma.bindings.bces[(7, 100)].bind_id
        assert record.exchange_id == fabric.committed[-1].exchange_id

    def test_volunteer_accepted_same_kinds(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        # flow 1 currently at the cellular gateway; wifi gateway 1 is idle
        fabric.utilizations = {100: 0.6, 1: 0.05}
        fabric.lma.containers = {100: container(100, flow_id=1)}
        record = mag1.on_threshold_violation(7, 1, "below_lower")
        fabric.deliver_all()
        assert fabric.kinds_since(0) == self.EXPECTED
        assert record.target == 1
        assert lma.bindings.flow_bind[(7, 1)] == lma.bindings.bces[(7, 1)].bind_id

    def test_volunteer_declined_no_state_change(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.utilizations = {100: 0.1, 1: 0.05}  # donor not busy enough
        fabric.lma.containers = {100: container(100, flow_id=1)}
        before = snapshot_state(lma, mn, [mag1, mag2, mag100])
        record = mag1.on_threshold_violation(7, 1, "below_lower")
        fabric.deliver_all()
        assert fabric.kinds_since(0) == [
            MessageKind.FLOW_MOVE_REQUEST, MessageKind.FLOW_MOVE_CANDIDATES,
        ]
        assert record.state is ExchangeState.ABORTED
        assert snapshot_state(lma, mn, [mag1, mag2, mag100]) == before

    def test_overload_with_no_candidate_keeps_flow(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = []
        before = snapshot_state(lma, mn, [mag1, mag2, mag100])
        record = mag1.on_threshold_violation(7, 2, "above_upper")
        fabric.deliver_all()
        assert record.state is ExchangeState.ABORTED
        assert snapshot_state(lma, mn, [mag1, mag2, mag100]) == before

    def test_volunteer_rate_limited(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.utilizations = {100: 0.6, 1: 0.05}
        fabric.lma.containers = {100: container(100, flow_id=1)}
        assert mag1.on_threshold_violation(7, 1, "below_lower") is not None
        fabric.deliver_all()
        fabric.t += 1.0  # inside the cooldown
        assert mag1.on_threshold_violation(7, 1, "below_lower") is None


class TestLmaInitiatedSequence:
    def test_case_target_already_holds_prefix(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        # re-home flow 2's prefix onto the cellular entry first
        lma.bindings.rehome_flow(7, 2, 100)
        lma.bindings.flow_bind[(7, 2)] = lma.bindings.bces[(7, 1)].bind_id
        fabric.sent.clear()
        record = lma.initiate_flow_move(7, 2, 100)
        fabric.deliver_all()
        assert fabric.kinds_since(0) == [MessageKind.MN_NOTIFY]
        assert record.state is ExchangeState.COMMITTED
        assert lma.bindings.flow_bind[(7, 2)] == lma.bindings.bces[(7, 100)].bind_id

    def test_case_target_lacks_prefix_provisions_first(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        hnp = lma.bindings.flow_hnp[(7, 2)]
        assert hnp not in lma.bindings.bces[(7, 100)].hnp_list
        record = lma.initiate_flow_move(7, 2, 100)
        fabric.deliver_all()
        assert fabric.kinds_since(0) == [
            MessageKind.FLOW_MOVE_COMMIT,
            MessageKind.FLOW_MOVE_ACK,
            MessageKind.MN_NOTIFY,
        ]
        assert hnp in lma.bindings.bces[(7, 100)].hnp_list
        assert lma.bindings.flow_hnp[(7, 2)] == hnp
        assert record.state is ExchangeState.COMMITTED

    def test_unreachable_target_rejected(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        before = snapshot_state(lma, mn, [mag1, mag2, mag100])
        with pytest.raises(TargetUnreachable):
            lma.initiate_flow_move(7, 2, 2)  # not attached at gateway 2
        assert snapshot_state(lma, mn, [mag1, mag2, mag100]) == before


class TestSingleWriterPerFlow:
    def test_first_to_reach_anchor_wins(self, net):
        fabric, lma, mag1, mag2, mag100, mn = net
        fabric.candidates = [container(100, flow_id=2)]
        first = mag1.on_threshold_violation(7, 2, "above_upper")
        second_mn = mn.on_flow_degraded(2, "packet_loss")
        fabric.deliver_all()
        assert first.exchange_id in [r.exchange_id for r in fabric.committed]
        assert second_mn.state is ExchangeState.ABORTED


class TestMeasureHandover:
    def committed(self, old=1, new=2, flows=(2,)):
        record = ExchangeRecord(
            exchange_id=1, mn_id=7, flow_ids=flows,
            origin=ExchangeOrigin.MN_INITIATED, start_time=0.0,
            old_attachment=old, target=new,
        )
        record.advance(ExchangeState.COMMITTING)
        record.advance(ExchangeState.COMMITTED)
        return record

    def test_simple_gap(self):
        log = [
            (9.9, 2, 1, True, 10.000),
            (10.1, 2, 2, True, 10.050),
        ]
        assert measure_handover(self.committed(), log) == pytest.approx(0.050)

    def test_make_before_break_clamps_to_zero(self):
        log = [
            (9.9, 2, 2, True, 9.95),   # new attachment delivers first
            (9.95, 2, 1, True, 10.0),  # old still delivering
        ]
        assert measure_handover(self.committed(), log) == 0.0

    def test_silent_flow_is_indeterminate(self):
        log = [(9.9, 2, 1, True, 10.0)]
        assert measure_handover(self.committed(), log) is None

    def test_uncommitted_exchange_rejected(self):
        record = ExchangeRecord(
            exchange_id=1, mn_id=7, flow_ids=(2,),
            origin=ExchangeOrigin.MN_INITIATED, start_time=0.0,
        )
        with pytest.raises(Exception):
            measure_handover(record, [])


class TestStateOrder:
    def test_states_advance_monotonically(self):
        record = ExchangeRecord(
            exchange_id=1, mn_id=7, flow_ids=(1,),
            origin=ExchangeOrigin.MN_INITIATED, start_time=0.0,
        )
        record.advance(ExchangeState.AWAITING_CANDIDATES)
        record.advance(ExchangeState.COMMITTING)
        record.advance(ExchangeState.COMMITTED)
        with pytest.raises(Exception):
            record.advance(ExchangeState.REQUESTED)
