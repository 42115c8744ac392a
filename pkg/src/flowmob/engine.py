"""Full simulation assembly: topology, radios, attachment management,
traffic, message transport, and per-run logs.

One run is a pure function of (scenario spec, config, seed).  The event loop
is single threaded; controllers exchange messages only through scheduled
deliveries, and all random draws come from named per-vehicle substreams.

Uplink data takes:  vehicle -> air link -> gateway -> (tunnel over the
backbone) -> anchor -> wired sink.  Per-packet delay is the sum of per-link
latencies and transmission times plus air contention; losses are drawn per
transmission from the radio model.  A packet sent while its chosen
attachment is down is lost with cause "disconnected".
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, SimConfig
from .entities import (
    ExchangeOrigin,
    ExchangeRecord,
    ExchangeState,
    LmaController,
    MagController,
    MnController,
    TargetUnreachable,
)
from .flows import Transport, classify_packet
from .mih import (
    FlowStatus,
    InterfaceEntry,
    InterfaceStatus,
    LinkEventKind,
    MagContainer,
    MihEvent,
    Thresholds,
    ThresholdVerdict,
    evaluate_thresholds,
)
from .mobility import ManhattanMobility, Trace, TraceMobility
from .pmip import PmipMessage
from .radio import Channel, RadioModel, in_range_aps, link_delay, pick_nearest_ap
from .scenarios import IFACE_LTE, IFACE_WIFI, LTE_MAG_ID, ScenarioSpec
from .sim import Scheduler, substream

CAUSE_DELIVERED = 0
CAUSE_RADIO = 1
CAUSE_DISCONNECTED = 2


class SimInvariantError(Exception):
    """A run violated one of its structural invariants."""


@dataclass
class HandoverEvent:
    t: float
    mn_id: int
    kind: str  # "exchange", "attach_switch", "reconnect", "initial"
    old_poa: int | None
    new_poa: int | None
    duration: float | None = None
    origin: str = ""


@dataclass
class RunResult:
    scenario: int
    seed: int
    duration: float
    warmup: float
    # parallel packet columns
    pk_mn: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    pk_flow: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int8))
    pk_sent: np.ndarray = field(default_factory=lambda: np.empty(0))
    pk_poa: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    pk_delivered: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    pk_tdel: np.ndarray = field(default_factory=lambda: np.empty(0))
    pk_cause: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int8))
    pk_bits: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    handovers: list[HandoverEvent] = field(default_factory=list)
    messages: list[tuple] = field(default_factory=list)
    transitions: list[tuple] = field(default_factory=list)
    bce_dump: list[str] = field(default_factory=list)
    flow_class: dict[int, str] = field(default_factory=dict)
    events_processed: int = 0

    def packet_trace_lines(self) -> list[str]:
        lines = []
        for i in range(len(self.pk_sent)):
            disp = ("delivered", "radio_loss", "disconnected")[self.pk_cause[i]]
            tdel = f"{self.pk_tdel[i]:.6f}" if self.pk_delivered[i] else "-"
            lines.append(
                f"{self.pk_sent[i]:.6f} {i} mn={self.pk_mn[i]} "
                f"flow={self.pk_flow[i]} poa={self.pk_poa[i]} {disp} {tdel}"
            )
        return lines


class _VehicleRt:
    __slots__ = (
        "vid", "active", "pos", "prev_pos", "speed_est", "mn",
        "wifi_assoc", "wifi_attach_pending", "lte_attached",
        "lte_attach_pending", "current_iface", "data_poa",
        "data_poa_down_t", "going_down", "loss_rng", "assoc_rng",
    )

    def __init__(self, vid: int):
        self.vid = vid
        self.active = False
        self.pos = (0.0, 0.0)
        self.prev_pos = (0.0, 0.0)
        self.speed_est = 0.0
        self.mn: MnController | None = None
        self.wifi_assoc: int | None = None  # attached AP id
        self.wifi_attach_pending = None  # (ap_id, handle, trigger_t)
        self.lte_attached = False
        self.lte_attach_pending = False
        self.current_iface: int | None = None  # single-interface scenarios
        self.data_poa: int | None = None
        self.data_poa_down_t: float = 0.0
        self.going_down = False
        self.loss_rng = None
        self.assoc_rng = None


class Simulation:
    """One deterministic run."""

    def __init__(
        self,
        spec: ScenarioSpec,
        cfg: SimConfig,
        seed: int,
        bce_dump_interval: float | None = None,
    ):
        spec.validate()
        cfg.validate()
        self.spec = spec
        self.cfg = cfg
        self.seed = seed
        self.policy = spec.policy()
        self.duration = spec.duration if spec.duration is not None else cfg.run.duration
        self.warmup = spec.warmup if spec.warmup is not None else cfg.run.warmup
        self.sched = Scheduler()
        self._exchange_ids = itertools.count(1)
        self._bce_dump_interval = bce_dump_interval

        # Fabric knobs read by the controllers.
        self.exchange_timeout = cfg.exchange.timeout
        self.debounce_interval = cfg.exchange.debounce_windows * cfg.thresholds.window
        self.volunteer_cooldown = (
            cfg.exchange.volunteer_cooldown_windows * cfg.thresholds.window
        )
        self.absorb_margin = 0.2
        self.domain_breach_windows = cfg.exchange.domain_breach_windows

        # Radio channels and models.
        self.lte_channel = Channel(cfg.lte.capacity_bps, cfg.thresholds.window)
        self.lte_radio = RadioModel(cfg.lte, self.lte_channel)
        self.wifi_ap_pos = {
            i + 1: pos for i, pos in enumerate(cfg.topology.wifi_ap_positions)
        }
        self.wifi_channels = {
            ap: Channel(cfg.wifi.capacity_bps, cfg.thresholds.window)
            for ap in self.wifi_ap_pos
        }
        self.wifi_radios = {
            ap: RadioModel(cfg.wifi, self.wifi_channels[ap])
            for ap in self.wifi_ap_pos
        }

        # Controllers.
        self.lma = LmaController(self, cfg.pmip.bce_lifetime, cfg.thresholds.window)
        self.mags: dict[int, MagController] = {
            ap: MagController(ap, self, cfg.thresholds.window) for ap in self.wifi_ap_pos
        }
        self.mags[LTE_MAG_ID] = MagController(LTE_MAG_ID, self, cfg.thresholds.window)

        # Application classes map onto flows through packet classification.
        self.flow_class: dict[int, str] = {}
        for cls, port in sorted(cfg.traffic.ports.items(),
                                key=lambda kv: cfg.traffic.periods[kv[0]]):
            flow_id = classify_packet(Transport.UDP, port, self.policy.flow_table)
            if flow_id is None:
                raise ConfigError(
                    f"traffic port {port} for class {cls} matches no flow"
                )
            if flow_id >= 16:
                raise ConfigError("flow ids must be below 16")
            self.flow_class[flow_id] = cls

        # Mobility.
        if spec.trace_path is not None:
            trace = Trace.from_file(spec.trace_path)
            self.mobility = TraceMobility(trace)
            all_ids = self.mobility.vehicle_ids()
            if spec.active_senders > len(all_ids):
                raise ConfigError(
                    f"trace has {len(all_ids)} vehicles, "
                    f"{spec.active_senders} senders requested"
                )
        else:
            all_ids = list(range(spec.vehicle_count))
            self.mobility = ManhattanMobility(
                cfg.mobility,
                spec.speed,
                all_ids,
                lambda vid: substream(seed, vid, "mobility"),
            )
        active_ids = all_ids[: spec.active_senders]

        self.vehicles: dict[int, _VehicleRt] = {}
        for vid in active_ids:
            veh = _VehicleRt(vid)
            veh.active = True
            veh.loss_rng = substream(seed, vid, "loss")
            veh.assoc_rng = substream(seed, vid, "assoc")
            veh.pos = self.mobility_position(vid, 0.0)
            veh.prev_pos = veh.pos
            veh.speed_est = spec.speed if spec.trace_path is None else 0.0
            veh.mn = MnController(vid, self.policy.flow_table, self,
                                  cfg.thresholds.window)
            veh.mn.mihf.register_interface(InterfaceEntry(IFACE_LTE, "lte"))
            veh.mn.mihf.register_interface(InterfaceEntry(IFACE_WIFI, "wifi"))
            self.vehicles[vid] = veh

        # Per-flow acceptable bounds, from the class each flow carries.
        self._flow_thresholds = {
            flow_id: Thresholds(
                loss_upper=cfg.thresholds.loss_upper,
                delay_upper=cfg.thresholds.delay_upper[cls],
                throughput_lower=cfg.thresholds.throughput_lower,
            )
            for flow_id, cls in self.flow_class.items()
        }

        # Logs.
        self._pk_mn: list[int] = []
        self._pk_flow: list[int] = []
        self._pk_sent: list[float] = []
        self._pk_poa: list[int] = []
        self._pk_delivered: list[bool] = []
        self._pk_tdel: list[float] = []
        self._pk_cause: list[int] = []
        self._pk_bits: list[int] = []
        self.handovers: list[HandoverEvent] = []
        self.messages: list[tuple] = []
        self.transitions: list[tuple] = []
        self.bce_dump: list[str] = []
        self._violation_streak: dict[tuple[int, int], int] = {}

        # Tunnelled gateway-to-anchor legs carry the extra encapsulation
        # bytes; the anchor-to-sink leg does not.
        topo = cfg.topology
        tunnel_bits = 8.0 * (
            cfg.traffic.payload_bytes
            + cfg.traffic.header_bytes
            + cfg.traffic.tunnel_overhead_bytes
        )
        sink_bits = 8.0 * (cfg.traffic.payload_bytes + cfg.traffic.header_bytes)
        self._gw_leg_delay = topo.gateway_hops * link_delay(
            topo.wired_latency, topo.wired_capacity_bps, tunnel_bits
        )
        self._sink_leg_delay = topo.sink_hops * link_delay(
            topo.wired_latency, topo.wired_capacity_bps, sink_bits
        )

    # ------------------------------------------------------------------ fabric

    def now(self) -> float:
        return self.sched.now

    def next_exchange_id(self) -> int:
        return next(self._exchange_ids)

    def timer(self, delay: float, fn, *args):
        return self.sched.schedule_in(delay, fn, *args, kind="timer")

    def log_transition(self, entity: str, exchange_id, step: str) -> None:
        self.transitions.append((self.sched.now, entity, exchange_id, step))

    def send(self, msg: PmipMessage) -> None:
        latency = self._control_latency(msg.src, msg.dst)
        self.messages.append(
            (
                self.sched.now,
                msg.kind.value,
                msg.src,
                msg.dst,
                msg.mn_id,
                msg.flow_ids,
                msg.payload.get("exchange_id"),
            )
        )
        self.sched.schedule_in(latency, self._dispatch, msg, kind="control")

    def _dispatch(self, msg: PmipMessage) -> None:
        if msg.dst == "lma":
            self.lma.handle_message(msg)
        elif msg.dst.startswith("mag"):
            mag = self.mags.get(int(msg.dst.removeprefix("mag")))
            if mag is not None:
                mag.handle_message(msg)
        elif msg.dst.startswith("mn"):
            veh = self.vehicles.get(int(msg.dst.removeprefix("mn")))
            if veh is not None and veh.mn is not None:
                veh.mn.handle_message(msg)

    def _air_latency_to_mag(self, mag_id: int) -> float:
        if mag_id == LTE_MAG_ID:
            return self.cfg.lte.air_latency
        return self.cfg.wifi.air_latency

    def _control_latency(self, src: str, dst: str) -> float:
        gw = self.cfg.topology.gateway_hops * self.cfg.topology.wired_latency
        if {src[:2], dst[:2]} == {"ma", "lm"}:
            return gw
        if src.startswith("mag") and dst.startswith("mag"):
            return 2 * gw
        if src.startswith("mn") and dst.startswith("mag"):
            return self._air_latency_to_mag(int(dst.removeprefix("mag")))
        if src.startswith("mag") and dst.startswith("mn"):
            return self._air_latency_to_mag(int(src.removeprefix("mag")))
        if src == "lma" and dst.startswith("mn"):
            veh = self.vehicles.get(int(dst.removeprefix("mn")))
            mag = self._serving_mag_for_notify(veh)
            return gw + self._air_latency_to_mag(mag)
        if src.startswith("mn") and dst == "lma":
            return gw + self.cfg.lte.air_latency
        return gw

    def _serving_mag_for_notify(self, veh: _VehicleRt | None) -> int:
        if veh is None:
            return LTE_MAG_ID
        if veh.lte_attached:
            return LTE_MAG_ID
        if veh.wifi_assoc is not None:
            return veh.wifi_assoc
        return LTE_MAG_ID

    def iface_for_mag(self, mn_id: int, mag_id: int | None) -> int | None:
        veh = self.vehicles.get(mn_id)
        if veh is None or mag_id is None:
            return None
        if mag_id == LTE_MAG_ID:
            return IFACE_LTE if veh.lte_attached else None
        return IFACE_WIFI if veh.wifi_assoc == mag_id else None

    def mn_reachable_mags(self, mn_id: int) -> set[int]:
        veh = self.vehicles.get(mn_id)
        if veh is None:
            return set()
        reachable = set()
        if veh.lte_attached:
            reachable.add(LTE_MAG_ID)
        if veh.wifi_assoc is not None:
            reachable.add(veh.wifi_assoc)
        return reachable

    def mag_utilization(self, mag_id: int) -> float:
        if mag_id == LTE_MAG_ID:
            return self.lte_channel.utilization(self.sched.now)
        return self.wifi_channels[mag_id].utilization(self.sched.now)

    def candidate_mags(self, mn_id: int, flow_id: int, exclude) -> list[MagContainer]:
        """Gateways able to take the flow: reachable through an attached
        interface, not the excluded one, with channel headroom."""
        out = []
        for mag_id in sorted(self.mn_reachable_mags(mn_id)):
            if mag_id == exclude:
                continue
            if self.mag_utilization(mag_id) >= self.cfg.exchange.mag_offload_utilization:
                continue
            out.append(self._build_container(mag_id, flow_id))
        return out

    def pick_relief_target(self, mag_id: int, agg_flow_id: int):
        """For the anchor's own trigger: the busiest (mn, flow) on the
        breached gateway and the least-utilised other gateway it can reach."""
        mag = self.mags[mag_id]
        best_key, best_thr = None, -1.0
        for key in list(mag.mihf.flow_store._samples):
            mn_id, flow_id = divmod(key, 16)
            if flow_id != agg_flow_id:
                continue
            status = mag.mihf.flow_store.status(key, self.sched.now)
            if status.has_data and status.throughput > best_thr:
                best_thr = status.throughput
                best_key = (mn_id, flow_id)
        if best_key is None:
            return None
        mn_id, flow_id = best_key
        others = [m for m in self.mn_reachable_mags(mn_id) if m != mag_id]
        if not others:
            return None
        target = min(others, key=lambda m: (self.mag_utilization(m), m))
        return (mn_id, flow_id, target)

    def _build_container(self, mag_id: int, flow_id: int | None = None) -> MagContainer:
        if mag_id == LTE_MAG_ID:
            pos = self.cfg.topology.lte_ap_position
            radius = None
            tech = "lte"
            radio = self.lte_radio
        else:
            pos = self.wifi_ap_pos[mag_id]
            radius = self.cfg.wifi.coverage_radius
            tech = "wifi"
            radio = self.wifi_radios[mag_id]
        mag = self.mags[mag_id]
        now = self.sched.now
        statuses: dict[int, FlowStatus] = {}
        agg: dict[int, list] = {}
        for key in list(mag.mihf.flow_store._samples):
            _, fid = divmod(key, 16)
            status = mag.mihf.flow_store.status(key, now)
            if status.has_data:
                agg.setdefault(fid, []).append(status)
        for fid, parts in sorted(agg.items()):
            statuses[fid] = FlowStatus(
                fid,
                throughput=sum(p.throughput for p in parts),
                packet_loss=sum(p.packet_loss for p in parts) / len(parts),
                delay=sum(p.delay for p in parts) / len(parts),
                window=self.cfg.thresholds.window,
                has_data=True,
            )
        if flow_id is not None and flow_id not in statuses:
            # No measurement for this flow here: advertise the channel state.
            bits = 8.0 * (self.cfg.traffic.payload_bytes + self.cfg.traffic.header_bytes)
            statuses[flow_id] = FlowStatus(
                flow_id,
                throughput=0.0,
                packet_loss=radio.loss_probability(0.0, 0.0, now),
                delay=radio.air_delay(bits, now),
                window=self.cfg.thresholds.window,
                has_data=True,
            )
        subnets = sorted(
            {
                hnp
                for (mn, mg), bce in self.lma.bindings.bces.items()
                if mg == mag_id
                for hnp in bce.hnp_list
            }
        )
        return MagContainer(
            poa_id=mag_id,
            link_addr=f"02:00:00:00:00:{mag_id:02x}",
            location=pos,
            channel_range=radius,
            system_info=tech,
            subnet_info=subnets,
            flow_statuses=statuses,
            ip_addr=f"10.0.{mag_id}.1",
        )

    def on_exchange_committed(self, record: ExchangeRecord) -> None:
        if record.old_attachment is None:
            kind = "initial"
        elif record.old_attachment == record.target:
            return
        else:
            kind = "exchange"
        duration = None
        if kind == "exchange" and record.commit_time is not None:
            duration = max(0.0, record.commit_time - record.trigger_time)
        self.handovers.append(
            HandoverEvent(
                t=self.sched.now,
                mn_id=record.mn_id,
                kind=kind,
                old_poa=record.old_attachment,
                new_poa=record.target,
                duration=duration,
                origin=record.origin.value,
            )
        )

    def on_exchange_aborted(self, record: ExchangeRecord) -> None:
        self.lma.release(record.mn_id, record.flow_ids)

    # ------------------------------------------------------------ attachments

    def _begin_attach(self, veh: _VehicleRt, iface: int, ap_id: int, trigger_t: float):
        delay = (
            self.cfg.lte.attach_delay if iface == IFACE_LTE else self.cfg.wifi.attach_delay
        )
        handle = self.sched.schedule_in(
            delay, self._attach_complete, veh, iface, ap_id, trigger_t, kind="attach"
        )
        if iface == IFACE_WIFI:
            veh.wifi_attach_pending = (ap_id, handle, trigger_t)
        else:
            veh.lte_attach_pending = True

    def _attach_complete(self, veh: _VehicleRt, iface: int, ap_id: int, trigger_t: float):
        if iface == IFACE_WIFI:
            veh.wifi_attach_pending = None
            if ap_id not in in_range_aps(
                veh.pos, self.wifi_ap_pos, self.cfg.wifi.coverage_radius
            ):
                return
            veh.wifi_assoc = ap_id
            veh.going_down = False
        else:
            veh.lte_attach_pending = False
            veh.lte_attached = True
        hint: tuple[int, ...] = ()
        context = None
        if veh.mn is not None:
            if self.policy.machinery:
                hint = veh.mn.flows_for_attachment(iface, ap_id)
                if hint:
                    record = ExchangeRecord(
                        exchange_id=self.next_exchange_id(),
                        mn_id=veh.vid,
                        flow_ids=hint,
                        origin=ExchangeOrigin.LINK_ACTIVATION,
                        start_time=self.sched.now,
                        trigger_time=trigger_t,
                        old_attachment=veh.mn.homed_poa[hint[0]],
                        target=ap_id,
                    )
                    record.advance(ExchangeState.COMMITTING)
                    for fid in hint:
                        veh.mn.pending[fid] = record
                    context = {
                        "exchange_id": record.exchange_id,
                        "origin": "link_activation",
                        "trigger_time": trigger_t,
                        "old_attachment": record.old_attachment,
                    }
            veh.mn.mihf.on_link_event(
                MihEvent(
                    LinkEventKind.LINK_UP, iface, self.sched.now, {"poa": ap_id}
                )
            )
        self.mags[ap_id].on_attach(veh.vid, iface, hint, context)
        if not self.policy.multihomed:
            self._record_attach_handover(veh, ap_id)
            veh.current_iface = iface
            veh.data_poa = ap_id

    def _record_attach_handover(self, veh: _VehicleRt, new_poa: int) -> None:
        old = veh.data_poa
        if old is None:
            kind = "initial"
        elif old == new_poa:
            return
        else:
            gap = self.sched.now - veh.data_poa_down_t
            kind = "attach_switch" if gap <= self.cfg.exchange.reconnect_gap else "reconnect"
        self.handovers.append(
            HandoverEvent(
                t=self.sched.now,
                mn_id=veh.vid,
                kind=kind,
                old_poa=old,
                new_poa=new_poa,
                origin="attach",
            )
        )

    def _detach(self, veh: _VehicleRt, iface: int) -> None:
        if iface == IFACE_WIFI:
            ap = veh.wifi_assoc
            if ap is None:
                return
            veh.wifi_assoc = None
            self.mags[ap].bindings.detach(veh.vid)
            self.sched.schedule_in(
                self.cfg.topology.gateway_hops * self.cfg.topology.wired_latency,
                self.lma.bindings.remove_binding,
                veh.vid,
                ap,
                kind="control",
            )
            if veh.mn is not None:
                veh.mn.mihf.on_link_event(
                    MihEvent(LinkEventKind.LINK_DOWN, IFACE_WIFI, self.sched.now)
                )
        else:
            if not veh.lte_attached:
                return
            veh.lte_attached = False
            self.mags[LTE_MAG_ID].bindings.detach(veh.vid)
            self.sched.schedule_in(
                self.cfg.topology.gateway_hops * self.cfg.topology.wired_latency,
                self.lma.bindings.remove_binding,
                veh.vid,
                LTE_MAG_ID,
                kind="control",
            )
            if veh.mn is not None:
                veh.mn.mihf.on_link_event(
                    MihEvent(LinkEventKind.LINK_DOWN, IFACE_LTE, self.sched.now)
                )
        if not self.policy.multihomed and veh.data_poa is not None:
            veh.data_poa_down_t = self.sched.now
            veh.current_iface = None

    # ------------------------------------------------------------- association

    def _association_tick(self, veh: _VehicleRt) -> None:
        policy = self.policy
        if not policy.wifi_enabled:
            return
        radius = self.cfg.wifi.coverage_radius
        in_range = in_range_aps(veh.pos, self.wifi_ap_pos, radius)
        if veh.wifi_attach_pending is not None:
            ap_id, handle, _ = veh.wifi_attach_pending
            if ap_id not in in_range:
                handle.cancel()
                veh.wifi_attach_pending = None
            return
        if veh.lte_attach_pending:
            return
        if policy.association == "sticky":
            if veh.wifi_assoc is not None and veh.wifi_assoc not in in_range:
                self._detach(veh, IFACE_WIFI)
            if veh.wifi_assoc is None:
                if in_range:
                    target = pick_nearest_ap(veh.pos, self.wifi_ap_pos, radius)
                    self._begin_attach(veh, IFACE_WIFI, target, self.sched.now)
            else:
                self._update_going_down(veh)
            return
        # naive: always chase the strongest (noisy) access point
        target = pick_nearest_ap(
            veh.pos,
            self.wifi_ap_pos,
            radius,
            veh.assoc_rng,
            self.cfg.association.rssi_noise_sigma,
        )
        if veh.wifi_assoc is not None:
            if veh.wifi_assoc not in in_range:
                self._detach(veh, IFACE_WIFI)
                if policy.lte_enabled:
                    self._begin_attach(veh, IFACE_LTE, LTE_MAG_ID, self.sched.now)
                elif target is not None:
                    self._begin_attach(veh, IFACE_WIFI, target, self.sched.now)
            elif target is not None and target != veh.wifi_assoc:
                self._detach(veh, IFACE_WIFI)
                self._begin_attach(veh, IFACE_WIFI, target, self.sched.now)
            else:
                self._update_going_down(veh)
        else:
            if target is not None:
                # Entering coverage: vertical switch back to Wi-Fi when the
                # cellular leg was in use.
                if veh.current_iface == IFACE_LTE:
                    self._detach(veh, IFACE_LTE)
                self._begin_attach(veh, IFACE_WIFI, target, self.sched.now)

    def _update_going_down(self, veh: _VehicleRt) -> None:
        if veh.wifi_assoc is None or veh.mn is None:
            return
        radius = self.cfg.wifi.coverage_radius
        d = math.dist(veh.pos, self.wifi_ap_pos[veh.wifi_assoc])
        if d > 0.9 * radius and not veh.going_down:
            veh.going_down = True
            veh.mn.mihf.on_link_event(
                MihEvent(
                    LinkEventKind.LINK_GOING_DOWN,
                    IFACE_WIFI,
                    self.sched.now,
                    {"distance": d},
                )
            )
        elif d < 0.85 * radius:
            veh.going_down = False

    # ---------------------------------------------------------------- mobility

    def mobility_position(self, vid: int, t: float) -> tuple[float, float]:
        self.mobility.advance_to(t)
        return self.mobility.position(vid)

    def _position_tick(self) -> None:
        t = self.sched.now
        self.mobility.advance_to(t)
        dt = self.cfg.mobility.update_interval
        for veh in self.vehicles.values():
            veh.prev_pos = veh.pos
            veh.pos = self.mobility.position(veh.vid)
            if self.spec.trace_path is not None:
                veh.speed_est = math.dist(veh.pos, veh.prev_pos) / dt
            self._association_tick(veh)
        if t + dt <= self.duration:
            self.sched.schedule_in(dt, self._position_tick, kind="position")

    # ----------------------------------------------------------------- traffic

    def _data_attachment(self, veh: _VehicleRt, flow_id: int) -> int | None:
        """POA carrying this flow's next packet, or None when dark."""
        if self.policy.multihomed:
            iface = veh.mn.data_interface(flow_id)
            if iface == IFACE_LTE and veh.lte_attached:
                return LTE_MAG_ID
            if iface == IFACE_WIFI and veh.wifi_assoc is not None:
                return veh.wifi_assoc
            return None
        if veh.current_iface == IFACE_LTE and veh.lte_attached:
            return LTE_MAG_ID
        if veh.current_iface == IFACE_WIFI and veh.wifi_assoc is not None:
            return veh.wifi_assoc
        return None

    def _send_packet(self, vid: int, flow_id: int, period: float) -> None:
        t = self.sched.now
        if t < self.duration:
            self.sched.schedule_in(period, self._send_packet, vid, flow_id, period,
                                   kind="traffic")
        veh = self.vehicles[vid]
        u = float(veh.loss_rng.random())  # one draw per send, used or not
        poa = self._data_attachment(veh, flow_id)
        payload_bits = self.cfg.traffic.payload_bytes * 8
        if poa is None:
            self._log_packet(vid, flow_id, t, -1, False, math.nan,
                             CAUSE_DISCONNECTED, payload_bits)
            self._feed_stores(veh, None, flow_id, False, 0.0, payload_bits, t)
            return
        if poa == LTE_MAG_ID:
            radio = self.lte_radio
            channel = self.lte_channel
            ap_pos = self.cfg.topology.lte_ap_position
        else:
            radio = self.wifi_radios[poa]
            channel = self.wifi_channels[poa]
            ap_pos = self.wifi_ap_pos[poa]
        air_bits = (self.cfg.traffic.payload_bytes + self.cfg.traffic.header_bytes) * 8
        distance = math.dist(veh.pos, ap_pos)
        p_loss = radio.loss_probability(distance, veh.speed_est, t)
        air_delay = radio.air_delay(air_bits, t)
        channel.add_bits(t, air_bits)
        if u < p_loss:
            self._log_packet(vid, flow_id, t, poa, False, math.nan,
                             CAUSE_RADIO, payload_bits)
            self._feed_stores(veh, poa, flow_id, False, 0.0, payload_bits, t)
            return
        delay = air_delay + self._gw_leg_delay + self._sink_leg_delay
        self.sched.schedule_in(
            delay, self._deliver, vid, flow_id, t, poa, delay, payload_bits,
            kind="delivery",
        )
        bce = self.lma.bindings.bces.get((vid, poa))
        if bce is not None:
            bce.refreshed_at = t
            if (vid, flow_id) not in self.lma.bindings.flow_hnp:
                self.lma.bindings.establish_flow(vid, flow_id, poa)

    def _deliver(self, vid, flow_id, t_sent, poa, delay, payload_bits) -> None:
        self._log_packet(vid, flow_id, t_sent, poa, True, t_sent + delay,
                         CAUSE_DELIVERED, payload_bits)
        veh = self.vehicles[vid]
        self._feed_stores(veh, poa, flow_id, True, delay, payload_bits,
                          self.sched.now)

    def _feed_stores(self, veh, poa, flow_id, delivered, delay, bits, now) -> None:
        if not self.policy.machinery:
            return
        veh.mn.mihf.flow_store.record_sample(flow_id, delivered, delay, bits, now)
        if poa is not None:
            key = veh.vid * 16 + flow_id
            self.mags[poa].mihf.flow_store.record_sample(
                key, delivered, delay, bits, now
            )

    def _log_packet(self, mn, flow, t_sent, poa, delivered, t_del, cause, bits):
        self._pk_mn.append(mn)
        self._pk_flow.append(flow)
        self._pk_sent.append(t_sent)
        self._pk_poa.append(poa)
        self._pk_delivered.append(delivered)
        self._pk_tdel.append(t_del)
        self._pk_cause.append(cause)
        self._pk_bits.append(bits)

    # ---------------------------------------------------------------- monitors

    def _monitor_tick(self) -> None:
        now = self.sched.now
        window = self.cfg.thresholds.window
        # Terminal-side requirement checks; a flow must breach its bounds in
        # consecutive windows before an exchange is requested, so one lost
        # packet in a small window does not trigger a move.
        need = self.cfg.exchange.mn_violation_windows
        for veh in self.vehicles.values():
            if veh.mn is None:
                continue
            for flow_id in veh.mn.flow_table.flow_ids():
                if flow_id not in self._flow_thresholds or veh.mn.flow_busy(flow_id):
                    continue
                status = veh.mn.mihf.flow_store.status(flow_id, now)
                result = evaluate_thresholds(status, self._flow_thresholds[flow_id])
                key = (veh.vid, flow_id)
                if result.verdict is ThresholdVerdict.WITHIN_BOUNDS:
                    self._violation_streak.pop(key, None)
                    continue
                streak = self._violation_streak.get(key, 0) + 1
                if streak >= need:
                    self._violation_streak.pop(key, None)
                    veh.mn.on_flow_degraded(flow_id, result.metric)
                else:
                    self._violation_streak[key] = streak
        # Gateway-side utilization checks.
        for mag_id in sorted(self.mags):
            u = self.mag_utilization(mag_id)
            mag = self.mags[mag_id]
            if u > self.cfg.exchange.mag_offload_utilization:
                pick = self._busiest_flow_at(mag_id)
                if pick is not None:
                    mag.on_threshold_violation(pick[0], pick[1], "above_upper")
            elif 0.0 < u < self.cfg.exchange.mag_absorb_utilization:
                pick = self._busiest_flow_elsewhere(mag_id)
                if pick is not None:
                    mag.on_threshold_violation(pick[0], pick[1], "below_lower")
        # Anchor-side view refresh and autonomous trigger.
        self.lma.containers = {
            mag_id: self._build_container(mag_id) for mag_id in sorted(self.mags)
        }
        for mn_id, flow_id, target in self.lma.observe_domain(
            self.cfg.thresholds.loss_upper
        ):
            try:
                self.lma.initiate_flow_move(mn_id, flow_id, target)
            except TargetUnreachable:
                pass
        if now + window <= self.duration:
            self.sched.schedule_in(window, self._monitor_tick, kind="monitor")

    def _busiest_flow_at(self, mag_id: int):
        mag = self.mags[mag_id]
        best, best_thr = None, -1.0
        now = self.sched.now
        for key in list(mag.mihf.flow_store._samples):
            status = mag.mihf.flow_store.status(key, now)
            if status.has_data and status.throughput > best_thr:
                best_thr = status.throughput
                best = divmod(key, 16)
        return best

    def _busiest_flow_elsewhere(self, mag_id: int):
        candidates = []
        for other_id in sorted(self.mags):
            if other_id == mag_id:
                continue
            pick = self._busiest_flow_at(other_id)
            if pick is not None:
                mn_id, flow_id = pick
                if mag_id in self.mn_reachable_mags(mn_id):
                    candidates.append(pick)
        return candidates[0] if candidates else None

    def _bce_dump_tick(self) -> None:
        self.bce_dump.extend(self.lma.bindings.dump_lines(self.sched.now))
        if self.sched.now + self._bce_dump_interval <= self.duration:
            self.sched.schedule_in(self._bce_dump_interval, self._bce_dump_tick,
                                   kind="debug")

    def _expiry_tick(self) -> None:
        self.lma.bindings.expire(self.sched.now)
        if self.sched.now + 30.0 <= self.duration:
            self.sched.schedule_in(30.0, self._expiry_tick, kind="timer")

    # -------------------------------------------------------------------- run

    def _initial_attachments(self) -> None:
        policy = self.policy
        for veh in self.vehicles.values():
            in_range = (
                in_range_aps(veh.pos, self.wifi_ap_pos, self.cfg.wifi.coverage_radius)
                if policy.wifi_enabled
                else []
            )
            if policy.initial == "lte":
                self._begin_attach(veh, IFACE_LTE, LTE_MAG_ID, 0.0)
            elif policy.initial == "wifi":
                if in_range:
                    target = pick_nearest_ap(
                        veh.pos, self.wifi_ap_pos, self.cfg.wifi.coverage_radius
                    )
                    self._begin_attach(veh, IFACE_WIFI, target, 0.0)
            elif policy.initial == "wifi_else_lte":
                if in_range:
                    target = pick_nearest_ap(
                        veh.pos, self.wifi_ap_pos, self.cfg.wifi.coverage_radius
                    )
                    self._begin_attach(veh, IFACE_WIFI, target, 0.0)
                else:
                    self._begin_attach(veh, IFACE_LTE, LTE_MAG_ID, 0.0)
            else:  # both
                self._begin_attach(veh, IFACE_LTE, LTE_MAG_ID, 0.0)
                if in_range:
                    target = pick_nearest_ap(
                        veh.pos, self.wifi_ap_pos, self.cfg.wifi.coverage_radius
                    )
                    self._begin_attach(veh, IFACE_WIFI, target, 0.0)

    def _schedule_traffic(self) -> None:
        for veh in self.vehicles.values():
            rng = substream(self.seed, veh.vid, "traffic")
            for flow_id, cls in sorted(self.flow_class.items()):
                period = self.cfg.traffic.periods[cls]
                phase = float(rng.random()) * period
                self.sched.schedule(phase, self._send_packet, veh.vid, flow_id,
                                    period, kind="traffic")

    def run(self) -> RunResult:
        self._initial_attachments()
        self._schedule_traffic()
        self.sched.schedule(0.0, self._position_tick, kind="position")
        if self.policy.machinery:
            self.sched.schedule(
                self.cfg.thresholds.window, self._monitor_tick, kind="monitor"
            )
        if self._bce_dump_interval:
            self.sched.schedule(
                self._bce_dump_interval, self._bce_dump_tick, kind="debug"
            )
        self.sched.schedule(30.0, self._expiry_tick, kind="timer")
        drain = 2.0
        self.sched.run_until(self.duration + drain)
        self._check_invariants()
        return self._result()

    def _check_invariants(self) -> None:
        delivered = sum(1 for d in self._pk_delivered if d)
        lost = sum(
            1 for c in self._pk_cause if c in (CAUSE_RADIO, CAUSE_DISCONNECTED)
        )
        if delivered + lost != len(self._pk_sent):
            raise SimInvariantError("packet conservation violated")
        bind_ids = [bce.bind_id for bce in self.lma.bindings.bces.values()]
        if len(bind_ids) != len(set(bind_ids)):
            raise SimInvariantError("duplicate bind ids in the binding cache")
        tunnels = [bce.tunnel_id for bce in self.lma.bindings.bces.values()]
        if len(tunnels) != len(set(tunnels)):
            raise SimInvariantError("tunnel shared between binding cache entries")
        for mag in self.mags.values():
            if mag.bindings.pending_pbus:
                raise SimInvariantError(
                    f"gateway {mag.mag_id} has unanswered binding updates"
                )
        if self.spec.scenario == 0:
            if any(ev.kind != "initial" for ev in self.handovers):
                raise SimInvariantError("scenario 0 must not hand over")

    def _result(self) -> RunResult:
        return RunResult(
            scenario=self.spec.scenario,
            seed=self.seed,
            duration=self.duration,
            warmup=self.warmup,
            pk_mn=np.asarray(self._pk_mn, dtype=np.int32),
            pk_flow=np.asarray(self._pk_flow, dtype=np.int8),
            pk_sent=np.asarray(self._pk_sent, dtype=np.float64),
            pk_poa=np.asarray(self._pk_poa, dtype=np.int32),
            pk_delivered=np.asarray(self._pk_delivered, dtype=bool),
            pk_tdel=np.asarray(self._pk_tdel, dtype=np.float64),
            pk_cause=np.asarray(self._pk_cause, dtype=np.int8),
            pk_bits=np.asarray(self._pk_bits, dtype=np.int32),
            handovers=self.handovers,
            messages=self.messages,
            transitions=self.transitions,
            bce_dump=self.bce_dump,
            flow_class=dict(self.flow_class),
            events_processed=self.sched.processed,
        )
