"""Terminal, gateway, and anchor state machines for flow handover.

Five procedures move flows between attachments:

* interface activation: the attach binding update carries a hint naming the
  flows expected on the new attachment, the anchor re-homes their prefixes,
  and the terminal is notified (message kinds PBU, PBA, MN_NOTIFY);
* terminal-initiated: the terminal asks its serving gateway for candidates,
  the anchor answers through that gateway, the terminal commits to its pick,
  the chosen gateway updates the binding with the anchor and acknowledges
  (FLOW_MOVE_REQUEST x2, FLOW_MOVE_CANDIDATES x2, FLOW_MOVE_COMMIT, PBU,
  PBA, FLOW_MOVE_ACK);
* gateway-initiated, overloaded or idle: the gateway asks the anchor for a
  peer, informs the chosen peer, the receiving gateway updates the binding
  and notifies the terminal (FLOW_MOVE_REQUEST, FLOW_MOVE_CANDIDATES,
  FLOW_MOVE_COMMIT, PBU, PBA, MN_NOTIFY);
* anchor-initiated: when the target gateway already holds the flow's prefix
  a single notification suffices; otherwise the anchor provisions the prefix
  first (FLOW_MOVE_COMMIT, FLOW_MOVE_ACK, MN_NOTIFY).

State changes are applied only on commit, so an aborted procedure leaves
bindings untouched.  At most one procedure per flow is in flight; the anchor
serialises concurrent initiators and later ones abort.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

from .flows import FlowTable, select_attachment
from .mih import MagContainer, Mihf
from .pmip import LmaBindings, MagBindings, MessageKind, NoBinding, PmipMessage


class ExchangeOrigin(Enum):
    LINK_ACTIVATION = "link_activation"
    MN_INITIATED = "mn_initiated"
    MAG_INITIATED_UPPER = "mag_initiated_upper"
    MAG_INITIATED_LOWER = "mag_initiated_lower"
    LMA_INITIATED = "lma_initiated"


class ExchangeState(Enum):
    REQUESTED = "requested"
    AWAITING_CANDIDATES = "awaiting_candidates"
    COMMITTING = "committing"
    COMMITTED = "committed"
    ABORTED = "aborted"


class ExchangeError(Exception):
    pass


class EmptyCandidates(ExchangeError):
    pass


class TargetUnreachable(ExchangeError):
    pass


_STATE_ORDER = {
    ExchangeState.REQUESTED: 0,
    ExchangeState.AWAITING_CANDIDATES: 1,
    ExchangeState.COMMITTING: 2,
    ExchangeState.COMMITTED: 3,
    ExchangeState.ABORTED: 3,
}


@dataclass
class ExchangeRecord:
    exchange_id: int
    mn_id: int
    flow_ids: tuple[int, ...]
    origin: ExchangeOrigin
    start_time: float
    target: int | None = None
    state: ExchangeState = ExchangeState.REQUESTED
    trigger_time: float = 0.0
    commit_time: float | None = None
    old_attachment: int | None = None

    def advance(self, new_state: ExchangeState) -> None:
        if _STATE_ORDER[new_state] < _STATE_ORDER[self.state]:
            raise ExchangeError(
                f"exchange {self.exchange_id}: cannot go {self.state} -> {new_state}"
            )
        self.state = new_state

    @property
    def terminal(self) -> bool:
        return self.state in (ExchangeState.COMMITTED, ExchangeState.ABORTED)


def mn_candidate_choice(candidates: list[MagContainer], violated_metric: str) -> int:
    """Pick the gateway whose advertised state looks best for the violated
    metric: lowest loss or delay, highest throughput.  Ties go to the lower
    gateway id."""
    if not candidates:
        raise EmptyCandidates()

    def metric_of(container: MagContainer) -> float:
        statuses = container.flow_statuses.values()
        if not statuses:
            return 0.0
        if violated_metric == "throughput":
            return -max(s.throughput for s in statuses)
        if violated_metric == "delay":
            return min(s.delay for s in statuses)
        return min(s.packet_loss for s in statuses)

    best = min(candidates, key=lambda c: (metric_of(c), c.poa_id))
    return best.poa_id


def measure_handover(exchange: ExchangeRecord, packet_log) -> float | None:
    """Data-path gap of a committed exchange, from the packet log.

    Rows are (t_sent, flow_id, attachment, delivered, t_delivered).  The gap
    is the first delivery via the new attachment minus the last delivery via
    the old one, clamped at zero (an overlap means make-before-break).
    Returns None when either side carried no packet.
    """
    if exchange.state is not ExchangeState.COMMITTED:
        raise ExchangeError("handover can only be measured on a committed exchange")
    old_last = None
    new_first = None
    flows = set(exchange.flow_ids)
    for t_sent, flow_id, attachment, delivered, t_delivered in packet_log:
        if flow_id not in flows or not delivered:
            continue
        if attachment == exchange.old_attachment:
            if old_last is None or t_delivered > old_last:
                old_last = t_delivered
        elif attachment == exchange.target:
            if new_first is None or t_delivered < new_first:
                new_first = t_delivered
    if old_last is None or new_first is None:
        return None
    return max(0.0, new_first - old_last)


class MnController:
    """Terminal side: flow bindings, per-flow exchange guard, candidate
    choice, and commit application."""

    def __init__(self, mn_id: int, flow_table: FlowTable, fabric, window: float = 1.0):
        self.mn_id = mn_id
        self.flow_table = flow_table
        self.fabric = fabric
        self.mihf = Mihf(f"mn{mn_id}", "mn", window)
        # flow -> interface currently bound; flow -> gateway its prefix homes at
        self.bindings: dict[int, int] = {
            e.flow_id: e.preference[0] for e in flow_table.entries
        }
        self.homed_poa: dict[int, int | None] = {
            e.flow_id: None for e in flow_table.entries
        }
        self.pending: dict[int, ExchangeRecord] = {}
        self.debounce_until: dict[int, float] = {}
        self._timers: dict[int, object] = {}

    # --- data-plane helpers -------------------------------------------------

    def data_interface(self, flow_id: int) -> int | None:
        """Interface carrying the flow right now: its binding when that link
        is up, otherwise the first active interface in its preference list."""
        active = self.mihf.active_map()
        bound = self.bindings.get(flow_id)
        if bound is not None and active.get(bound, False):
            return bound
        return select_attachment(flow_id, self.flow_table, active)

    def flows_for_attachment(self, interface_id: int, poa: int) -> tuple[int, ...]:
        """Flows expected to hand over onto this fresh attachment: those the
        attachment would start carrying whose prefix homes elsewhere."""
        moving = []
        for entry in self.flow_table.entries:
            if interface_id not in entry.preference:
                continue
            bound = self.bindings[entry.flow_id]
            if bound == interface_id:
                will_use = True
            else:
                bound_rank = (
                    entry.preference.index(bound)
                    if bound in entry.preference
                    else len(entry.preference)
                )
                will_use = entry.preference.index(interface_id) < bound_rank
            if will_use and self.homed_poa[entry.flow_id] != poa:
                moving.append(entry.flow_id)
        return tuple(moving)

    def flow_busy(self, flow_id: int) -> bool:
        record = self.pending.get(flow_id)
        if record is not None and not record.terminal:
            return True
        return self.fabric.now() < self.debounce_until.get(flow_id, 0.0)

    # --- terminal-initiated procedure ---------------------------------------

    def on_flow_degraded(self, flow_id: int, violated_metric: str) -> ExchangeRecord | None:
        """Start the terminal-initiated exchange for a flow whose measured
        state broke its requirements.  Returns the record, or None when the
        flow already has an exchange in flight or is debounced."""
        if self.flow_busy(flow_id):
            return None
        iface = self.data_interface(flow_id)
        entry = self.mihf.interfaces.get(iface) if iface is not None else None
        if entry is None or entry.poa is None:
            return None
        now = self.fabric.now()
        record = ExchangeRecord(
            exchange_id=self.fabric.next_exchange_id(),
            mn_id=self.mn_id,
            flow_ids=(flow_id,),
            origin=ExchangeOrigin.MN_INITIATED,
            start_time=now,
            trigger_time=now,
            old_attachment=entry.poa,
        )
        record.advance(ExchangeState.AWAITING_CANDIDATES)
        self.pending[flow_id] = record
        self.fabric.log_transition(f"mn{self.mn_id}", record.exchange_id, "request")
        self.fabric.send(
            PmipMessage(
                kind=MessageKind.FLOW_MOVE_REQUEST,
                src=f"mn{self.mn_id}",
                dst=f"mag{entry.poa}",
                mn_id=self.mn_id,
                flow_ids=(flow_id,),
                payload={
                    "exchange_id": record.exchange_id,
                    "violated_metric": violated_metric,
                    "origin": "mn",
                },
            )
        )
        self._timers[record.exchange_id] = self.fabric.timer(
            self.fabric.exchange_timeout, self._on_timeout, record
        )
        return record

    def _on_timeout(self, record: ExchangeRecord) -> None:
        if record.terminal:
            return
        self._abort(record, "timeout")

    def _abort(self, record: ExchangeRecord, reason: str) -> None:
        record.advance(ExchangeState.ABORTED)
        for flow_id in record.flow_ids:
            if self.pending.get(flow_id) is record:
                del self.pending[flow_id]
        self.fabric.log_transition(
            f"mn{self.mn_id}", record.exchange_id, f"abort:{reason}"
        )
        self.fabric.on_exchange_aborted(record)

    def handle_message(self, msg: PmipMessage) -> None:
        if msg.kind is MessageKind.FLOW_MOVE_CANDIDATES:
            self._on_candidates(msg)
        elif msg.kind is MessageKind.FLOW_MOVE_ACK:
            self._on_ack(msg)
        elif msg.kind is MessageKind.MN_NOTIFY:
            self._on_notify(msg)

    def _on_candidates(self, msg: PmipMessage) -> None:
        record = self._record_for(msg)
        if record is None or record.state is not ExchangeState.AWAITING_CANDIDATES:
            return
        candidates: list[MagContainer] = msg.payload.get("candidates", [])
        if not candidates:
            self._cancel_timer(record)
            self._abort(record, "no_candidate")
            return
        choice = mn_candidate_choice(candidates, msg.payload.get("violated_metric", "packet_loss"))
        record.target = choice
        record.advance(ExchangeState.COMMITTING)
        self.fabric.log_transition(f"mn{self.mn_id}", record.exchange_id, "commit")
        self.fabric.send(
            PmipMessage(
                kind=MessageKind.FLOW_MOVE_COMMIT,
                src=f"mn{self.mn_id}",
                dst=f"mag{choice}",
                mn_id=self.mn_id,
                flow_ids=record.flow_ids,
                payload={"exchange_id": record.exchange_id, "origin": "mn"},
            )
        )

    def _on_ack(self, msg: PmipMessage) -> None:
        record = self._record_for(msg)
        if record is None or record.terminal:
            return
        self._cancel_timer(record)
        self._apply_commit(record, record.target)

    def _on_notify(self, msg: PmipMessage) -> None:
        """Network-side procedures (activation, gateway- or anchor-initiated)
        end with a notify; apply the new binding."""
        target_mag = msg.payload.get("mag_id")
        exchange_id = msg.payload.get("exchange_id")
        record = None
        for rec in self.pending.values():
            if rec.exchange_id == exchange_id:
                record = rec
                break
        if record is None:
            record = ExchangeRecord(
                exchange_id=exchange_id if exchange_id is not None else -1,
                mn_id=self.mn_id,
                flow_ids=msg.flow_ids,
                origin=ExchangeOrigin(msg.payload.get("origin", "lma_initiated")),
                start_time=self.fabric.now(),
                trigger_time=msg.payload.get("trigger_time", self.fabric.now()),
                old_attachment=msg.payload.get("old_attachment"),
            )
        self._apply_commit(record, target_mag)

    def _apply_commit(self, record: ExchangeRecord, target_mag: int | None) -> None:
        iface = self.fabric.iface_for_mag(self.mn_id, target_mag)
        for flow_id in record.flow_ids:
            if iface is not None:
                self.bindings[flow_id] = iface
            self.homed_poa[flow_id] = target_mag
            self.pending.pop(flow_id, None)
            self.debounce_until[flow_id] = (
                self.fabric.now() + self.fabric.debounce_interval
            )
        record.target = target_mag
        record.commit_time = self.fabric.now()
        record.advance(ExchangeState.COMMITTED)
        self.fabric.log_transition(
            f"mn{self.mn_id}", record.exchange_id, "committed"
        )
        self.fabric.on_exchange_committed(record)

    def _record_for(self, msg: PmipMessage) -> ExchangeRecord | None:
        exchange_id = msg.payload.get("exchange_id")
        for record in self.pending.values():
            if record.exchange_id == exchange_id:
                return record
        return None

    def _cancel_timer(self, record: ExchangeRecord) -> None:
        timer = self._timers.pop(record.exchange_id, None)
        if timer is not None:
            timer.cancel()


class MagController:
    """Gateway side: attachment signalling plus the gateway-initiated
    exchange (offload when overloaded, volunteer when idle)."""

    def __init__(self, mag_id: int, fabric, window: float = 1.0):
        self.mag_id = mag_id
        self.fabric = fabric
        self.bindings = MagBindings(mag_id)
        self.mihf = Mihf(f"mag{mag_id}", "mag", window)
        self.pending: dict[int, ExchangeRecord] = {}
        self.last_volunteer_time = float("-inf")
        # exchange_id -> context for procedures this gateway relays
        self._relay: dict[int, dict] = {}

    # --- attachment ----------------------------------------------------------

    def on_attach(
        self,
        mn_id: int,
        interface_id: int,
        hint_flows: tuple[int, ...] = (),
        exchange_context: dict | None = None,
    ) -> PmipMessage:
        pbu = self.bindings.on_attach(
            mn_id, interface_id, self.fabric.now(), hint_flows
        )
        if exchange_context:
            pbu.payload.update(exchange_context)
        self.fabric.send(pbu)
        return pbu

    def handle_message(self, msg: PmipMessage) -> None:
        if msg.kind is MessageKind.PBA:
            self._on_pba(msg)
        elif msg.kind is MessageKind.FLOW_MOVE_REQUEST:
            self._forward_mn_request(msg)
        elif msg.kind is MessageKind.FLOW_MOVE_CANDIDATES:
            self._on_candidates(msg)
        elif msg.kind is MessageKind.FLOW_MOVE_COMMIT:
            self._on_commit(msg)

    def _on_pba(self, msg: PmipMessage) -> None:
        self.bindings.on_pba(msg)
        exchange_id = msg.payload.get("exchange_id")
        if exchange_id is None:
            return
        if msg.payload.get("ack_via_relay") and exchange_id in self._relay:
            # Binding updated on behalf of a terminal-initiated commit.
            ctx = self._relay.pop(exchange_id)
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.FLOW_MOVE_ACK,
                    src=f"mag{self.mag_id}",
                    dst=f"mn{msg.mn_id}",
                    mn_id=msg.mn_id,
                    flow_ids=ctx["flow_ids"],
                    payload={"exchange_id": exchange_id, "mag_id": self.mag_id},
                )
            )
        elif msg.flow_ids:
            # Completing a flow re-homing: tell the terminal.
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.MN_NOTIFY,
                    src=f"mag{self.mag_id}",
                    dst=f"mn{msg.mn_id}",
                    mn_id=msg.mn_id,
                    flow_ids=msg.flow_ids,
                    payload={
                        "exchange_id": exchange_id,
                        "mag_id": self.mag_id,
                        "origin": msg.payload.get("origin", "link_activation"),
                        "trigger_time": msg.payload.get("trigger_time"),
                        "old_attachment": msg.payload.get("old_attachment"),
                    },
                )
            )

    # --- relaying the terminal-initiated procedure ---------------------------

    def _forward_mn_request(self, msg: PmipMessage) -> None:
        if msg.payload.get("origin") == "mn" and msg.src.startswith("mn"):
            forwarded = PmipMessage(
                kind=MessageKind.FLOW_MOVE_REQUEST,
                src=f"mag{self.mag_id}",
                dst="lma",
                mn_id=msg.mn_id,
                flow_ids=msg.flow_ids,
                payload=dict(msg.payload, via_mag=self.mag_id),
            )
            self.fabric.send(forwarded)

    def _on_candidates(self, msg: PmipMessage) -> None:
        if msg.payload.get("origin") == "mn":
            # Pass the anchor's answer down to the terminal.
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.FLOW_MOVE_CANDIDATES,
                    src=f"mag{self.mag_id}",
                    dst=f"mn{msg.mn_id}",
                    mn_id=msg.mn_id,
                    flow_ids=msg.flow_ids,
                    payload=dict(msg.payload),
                )
            )
            return
        # Answer to this gateway's own request.
        record = self.pending.get(msg.payload.get("exchange_id"))
        if record is None or record.terminal:
            return
        candidates: list[MagContainer] = msg.payload.get("candidates", [])
        if not candidates:
            record.advance(ExchangeState.ABORTED)
            self.pending.pop(record.exchange_id, None)
            self.fabric.log_transition(
                f"mag{self.mag_id}", record.exchange_id, "abort:declined"
            )
            self.fabric.on_exchange_aborted(record)
            return
        peer = candidates[0].poa_id
        record.advance(ExchangeState.COMMITTING)
        self.pending.pop(record.exchange_id, None)
        if record.origin is ExchangeOrigin.MAG_INITIATED_UPPER:
            # Chosen peer will receive the flow and runs the binding update.
            record.target = peer
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.FLOW_MOVE_COMMIT,
                    src=f"mag{self.mag_id}",
                    dst=f"mag{peer}",
                    mn_id=record.mn_id,
                    flow_ids=record.flow_ids,
                    payload={
                        "exchange_id": record.exchange_id,
                        "origin": "mag_initiated_upper",
                        "trigger_time": record.trigger_time,
                        "old_attachment": record.old_attachment,
                    },
                )
            )
        else:
            # Volunteer absorbs the flow: inform the donor, then update the
            # binding here.
            record.target = self.mag_id
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.FLOW_MOVE_COMMIT,
                    src=f"mag{self.mag_id}",
                    dst=f"mag{peer}",
                    mn_id=record.mn_id,
                    flow_ids=record.flow_ids,
                    payload={
                        "exchange_id": record.exchange_id,
                        "origin": "mag_initiated_lower",
                        "informational": True,
                    },
                )
            )
            self._update_binding_for(record)

    def _on_commit(self, msg: PmipMessage) -> None:
        origin = msg.payload.get("origin")
        exchange_id = msg.payload.get("exchange_id")
        if msg.payload.get("informational"):
            return  # donor in the volunteer case: nothing to do here
        if origin == "mn":
            # Terminal picked this gateway: update the binding, then ack.
            try:
                pbu = self.bindings.refresh(msg.mn_id, self.fabric.now())
            except NoBinding:
                return  # terminal detached meanwhile; its timer aborts
            self._relay[exchange_id] = {"flow_ids": msg.flow_ids}
            pbu.flow_ids = msg.flow_ids
            pbu.payload.update(
                {"exchange_id": exchange_id, "origin": "mn", "ack_via_relay": True}
            )
            # Re-homing request: the anchor moves the flows' prefixes here.
            pbu.payload["rehome"] = True
            self.fabric.send(pbu)
        elif origin == "mag_initiated_upper":
            record = ExchangeRecord(
                exchange_id=exchange_id,
                mn_id=msg.mn_id,
                flow_ids=msg.flow_ids,
                origin=ExchangeOrigin.MAG_INITIATED_UPPER,
                start_time=self.fabric.now(),
                trigger_time=msg.payload.get("trigger_time", self.fabric.now()),
                old_attachment=msg.payload.get("old_attachment"),
                target=self.mag_id,
            )
            record.advance(ExchangeState.COMMITTING)
            self._update_binding_for(record)
        elif origin == "lma":
            # Anchor provisions a prefix here (target lacked it).
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.FLOW_MOVE_ACK,
                    src=f"mag{self.mag_id}",
                    dst="lma",
                    mn_id=msg.mn_id,
                    flow_ids=msg.flow_ids,
                    payload=dict(msg.payload),
                )
            )

    def _update_binding_for(self, record: ExchangeRecord) -> None:
        try:
            pbu = self.bindings.refresh(record.mn_id, self.fabric.now())
        except NoBinding:
            return  # terminal detached meanwhile
        pbu.flow_ids = record.flow_ids
        pbu.payload.update(
            {
                "exchange_id": record.exchange_id,
                "origin": record.origin.value,
                "trigger_time": record.trigger_time,
                "old_attachment": record.old_attachment,
                "rehome": True,
            }
        )
        self.fabric.send(pbu)

    # --- gateway-initiated trigger -------------------------------------------

    def on_threshold_violation(
        self, mn_id: int, flow_id: int, direction: str
    ) -> ExchangeRecord | None:
        """Ask the anchor to move a flow off (overloaded) or onto (idle)
        this gateway.  Volunteer requests are rate limited."""
        now = self.fabric.now()
        if direction == "below_lower":
            if now - self.last_volunteer_time < self.fabric.volunteer_cooldown:
                return None
            self.last_volunteer_time = now
            origin = ExchangeOrigin.MAG_INITIATED_LOWER
        else:
            origin = ExchangeOrigin.MAG_INITIATED_UPPER
        record = ExchangeRecord(
            exchange_id=self.fabric.next_exchange_id(),
            mn_id=mn_id,
            flow_ids=(flow_id,),
            origin=origin,
            start_time=now,
            trigger_time=now,
            old_attachment=self.mag_id if origin is ExchangeOrigin.MAG_INITIATED_UPPER else None,
        )
        record.advance(ExchangeState.AWAITING_CANDIDATES)
        self.pending[record.exchange_id] = record
        self.fabric.log_transition(
            f"mag{self.mag_id}", record.exchange_id, f"request:{direction}"
        )
        self.fabric.send(
            PmipMessage(
                kind=MessageKind.FLOW_MOVE_REQUEST,
                src=f"mag{self.mag_id}",
                dst="lma",
                mn_id=mn_id,
                flow_ids=(flow_id,),
                payload={
                    "exchange_id": record.exchange_id,
                    "origin": record.origin.value,
                    "direction": direction,
                },
            )
        )
        return record


class LmaController:
    """Anchor side: binding cache, candidate search, per-flow serialisation
    of concurrent procedures, and the anchor-initiated exchange."""

    def __init__(self, fabric, lifetime: float = 300.0, window: float = 1.0):
        self.fabric = fabric
        self.bindings = LmaBindings(lifetime)
        self.mihf = Mihf("lma", "lma", window)
        self.containers: dict[int, MagContainer] = {}
        # (mn_id, flow_id) -> (exchange_id, deadline): first writer wins.
        self._busy: dict[tuple[int, int], tuple[int, float]] = {}
        self._breach_streak: dict[int, int] = {}
        self._own_exchanges: dict[int, ExchangeRecord] = {}

    def _claim(self, mn_id: int, flow_ids, exchange_id: int) -> bool:
        now = self.fabric.now()
        for flow_id in flow_ids:
            held = self._busy.get((mn_id, flow_id))
            if held is not None and held[1] > now and held[0] != exchange_id:
                return False
        deadline = now + 2.0 * self.fabric.exchange_timeout
        for flow_id in flow_ids:
            self._busy[(mn_id, flow_id)] = (exchange_id, deadline)
        return True

    def release(self, mn_id: int, flow_ids) -> None:
        for flow_id in flow_ids:
            self._busy.pop((mn_id, flow_id), None)

    def handle_message(self, msg: PmipMessage) -> None:
        if msg.kind is MessageKind.PBU:
            self._on_pbu(msg)
        elif msg.kind is MessageKind.FLOW_MOVE_REQUEST:
            self._on_request(msg)
        elif msg.kind is MessageKind.FLOW_MOVE_ACK:
            self._on_provision_ack(msg)

    def _on_pbu(self, msg: PmipMessage) -> None:
        # Flow hints in the binding update re-home the named flows' prefixes
        # onto this binding (handle_pbu does the bookkeeping).
        if msg.payload.get("rehome"):
            self.release(msg.mn_id, msg.flow_ids)
        pba = self.bindings.handle_pbu(msg, self.fabric.now())
        for key in ("exchange_id", "origin", "trigger_time", "old_attachment",
                    "ack_via_relay"):
            if key in msg.payload:
                pba.payload[key] = msg.payload[key]
        self.fabric.send(pba)

    def _on_request(self, msg: PmipMessage) -> None:
        exchange_id = msg.payload["exchange_id"]
        origin = msg.payload.get("origin")
        flow_ids = msg.flow_ids
        reply_to = msg.src if origin != "mn" else f"mag{msg.payload['via_mag']}"
        if not self._claim(msg.mn_id, flow_ids, exchange_id):
            candidates = []
        elif origin == "mn":
            exclude = msg.payload.get("via_mag")
            candidates = self.fabric.candidate_mags(msg.mn_id, flow_ids[0], exclude)
        elif origin == "mag_initiated_upper":
            candidates = self.fabric.candidate_mags(
                msg.mn_id, flow_ids[0], int(msg.src.removeprefix("mag"))
            )[:1]
        else:  # volunteer
            candidates = self._absorb_decision(msg)
        if not candidates:
            self.release(msg.mn_id, flow_ids)
        self.fabric.log_transition(
            "lma", exchange_id, f"candidates:{len(candidates)}"
        )
        self.fabric.send(
            PmipMessage(
                kind=MessageKind.FLOW_MOVE_CANDIDATES,
                src="lma",
                dst=reply_to,
                mn_id=msg.mn_id,
                flow_ids=flow_ids,
                payload={
                    "exchange_id": exchange_id,
                    "origin": origin,
                    "violated_metric": msg.payload.get("violated_metric"),
                    "candidates": candidates,
                },
            )
        )

    def _absorb_decision(self, msg: PmipMessage) -> list[MagContainer]:
        """The idle gateway volunteers; accept only when the donor is
        markedly busier, otherwise decline with an empty list."""
        volunteer = int(msg.src.removeprefix("mag"))
        flow_id = msg.flow_ids[0]
        bind = self.bindings.flow_bind.get((msg.mn_id, flow_id))
        donor_bce = self.bindings.bce_for_bind(bind) if bind is not None else None
        if donor_bce is None or donor_bce.serving_mag == volunteer:
            return []
        donor_u = self.fabric.mag_utilization(donor_bce.serving_mag)
        volunteer_u = self.fabric.mag_utilization(volunteer)
        if donor_u - volunteer_u < self.fabric.absorb_margin:
            return []
        if volunteer not in self.fabric.mn_reachable_mags(msg.mn_id):
            return []
        container = self.containers.get(donor_bce.serving_mag)
        if container is None:
            return []
        return [container]

    def _on_provision_ack(self, msg: PmipMessage) -> None:
        # Anchor-initiated, prefix now provisioned at the target gateway.
        exchange_id = msg.payload.get("exchange_id")
        target = int(msg.src.removeprefix("mag"))
        for flow_id in msg.flow_ids:
            self.bindings.rehome_flow(msg.mn_id, flow_id, target)
            self.release(msg.mn_id, (flow_id,))
        record = self._own_exchanges.pop(exchange_id, None)
        if record is not None:
            record.commit_time = self.fabric.now()
            record.advance(ExchangeState.COMMITTED)
        self.fabric.log_transition("lma", exchange_id, "provisioned")
        self._notify_mn(msg.mn_id, msg.flow_ids, target, msg.payload)

    def initiate_flow_move(
        self, mn_id: int, flow_id: int, target_mag: int
    ) -> ExchangeRecord:
        """Anchor decides to move a flow.  One notification when the target
        gateway already holds the flow's prefix; provision first otherwise.
        Raises :class:`TargetUnreachable` when the terminal has no interface
        toward the target."""
        if target_mag not in self.fabric.mn_reachable_mags(mn_id):
            raise TargetUnreachable(target_mag)
        record = ExchangeRecord(
            exchange_id=self.fabric.next_exchange_id(),
            mn_id=mn_id,
            flow_ids=(flow_id,),
            origin=ExchangeOrigin.LMA_INITIATED,
            start_time=self.fabric.now(),
            trigger_time=self.fabric.now(),
            target=target_mag,
            old_attachment=self._current_mag(mn_id, flow_id),
        )
        if not self._claim(mn_id, (flow_id,), record.exchange_id):
            record.advance(ExchangeState.ABORTED)
            self.fabric.on_exchange_aborted(record)
            return record
        bce = self.bindings.bces.get((mn_id, target_mag))
        hnp = self.bindings.flow_hnp.get((mn_id, flow_id))
        payload = {
            "exchange_id": record.exchange_id,
            "origin": "lma_initiated",
            "trigger_time": record.trigger_time,
            "old_attachment": record.old_attachment,
        }
        if bce is not None and hnp is not None and hnp in bce.hnp_list:
            # Target already holds the prefix: rewire and notify.
            record.advance(ExchangeState.COMMITTING)
            self.bindings.flow_bind[(mn_id, flow_id)] = bce.bind_id
            self.release(mn_id, (flow_id,))
            record.commit_time = self.fabric.now()
            record.advance(ExchangeState.COMMITTED)
            self.fabric.log_transition("lma", record.exchange_id, "rewire")
            self._notify_mn(mn_id, (flow_id,), target_mag, payload)
        else:
            record.advance(ExchangeState.COMMITTING)
            self._own_exchanges[record.exchange_id] = record
            self.fabric.log_transition("lma", record.exchange_id, "provision")
            self.fabric.send(
                PmipMessage(
                    kind=MessageKind.FLOW_MOVE_COMMIT,
                    src="lma",
                    dst=f"mag{target_mag}",
                    mn_id=mn_id,
                    flow_ids=(flow_id,),
                    payload=dict(payload, origin="lma", hnp=hnp,
                                 final_origin="lma_initiated"),
                )
            )
        return record

    def _current_mag(self, mn_id: int, flow_id: int) -> int | None:
        bind = self.bindings.flow_bind.get((mn_id, flow_id))
        bce = self.bindings.bce_for_bind(bind) if bind is not None else None
        return bce.serving_mag if bce else None

    def _notify_mn(self, mn_id, flow_ids, target_mag, context) -> None:
        self.fabric.send(
            PmipMessage(
                kind=MessageKind.MN_NOTIFY,
                src="lma",
                dst=f"mn{mn_id}",
                mn_id=mn_id,
                flow_ids=tuple(flow_ids),
                payload={
                    "exchange_id": context.get("exchange_id"),
                    "origin": context.get("final_origin", context.get("origin", "lma_initiated")),
                    "mag_id": target_mag,
                    "trigger_time": context.get("trigger_time"),
                    "old_attachment": context.get("old_attachment"),
                },
            )
        )

    # --- anchor's own monitoring ---------------------------------------------

    def observe_domain(self, loss_upper: float) -> list[tuple[int, int, int]]:
        """Track per-gateway aggregate breaches; after two consecutive
        breached windows, propose (mn, flow, target) moves for the busiest
        flow of the breached gateway."""
        proposals = []
        for mag_id, container in sorted(self.containers.items()):
            statuses = [s for s in container.flow_statuses.values() if s.has_data]
            if not statuses:
                self._breach_streak[mag_id] = 0
                continue
            agg_loss = sum(s.packet_loss for s in statuses) / len(statuses)
            if agg_loss > loss_upper:
                self._breach_streak[mag_id] = self._breach_streak.get(mag_id, 0) + 1
            else:
                self._breach_streak[mag_id] = 0
                continue
            if self._breach_streak[mag_id] >= self.fabric.domain_breach_windows:
                self._breach_streak[mag_id] = 0
                busiest = max(statuses, key=lambda s: s.throughput)
                move = self.fabric.pick_relief_target(mag_id, busiest.flow_id)
                if move is not None:
                    proposals.append(move)
        return proposals
