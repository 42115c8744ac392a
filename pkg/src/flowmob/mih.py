"""Media-independent handover services: link events, measured flow state,
and scoped information queries.

Each node (terminal, gateway, anchor) owns one :class:`Mihf` holding its
interface table and windowed per-flow measurements.  Subscribers register for
link events and are notified synchronously in registration order, which keeps
runs reproducible.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum


class LinkEventKind(Enum):
    LINK_UP = "link_up"
    LINK_DOWN = "link_down"
    LINK_PARAMETERS_REPORT = "link_parameters_report"
    LINK_GOING_DOWN = "link_going_down"


class InterfaceStatus(Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


class UnknownInterface(KeyError):
    pass


class UnauthorizedScope(Exception):
    pass


class Scope(Enum):
    LOCAL_LINKS = "local_links"
    DOMAIN_WIDE = "domain_wide"


@dataclass
class InterfaceEntry:
    """One network interface: technology, assigned prefixes, serving point
    of attachment, and link status."""

    interface_id: int
    technology: str
    hnp_list: list[str] = field(default_factory=list)
    poa: int | None = None
    status: InterfaceStatus = InterfaceStatus.INACTIVE

    def __post_init__(self):
        if len(set(self.hnp_list)) != len(self.hnp_list):
            raise ValueError("hnp_list entries must be unique")


@dataclass
class MihEvent:
    kind: LinkEventKind
    interface_id: int
    timestamp: float
    payload: object = None


@dataclass
class FlowStatus:
    """Windowed measurements for one flow.

    ``has_data`` distinguishes "nothing measured inside the window" from a
    measured zero, so threshold checks can skip silent flows.
    """

    flow_id: int
    throughput: float = 0.0
    packet_loss: float = 0.0
    delay: float = 0.0
    window: float = 1.0
    has_data: bool = False


class FlowStatusStore:
    """Sliding-window sample store producing :class:`FlowStatus` values."""

    def __init__(self, window: float = 1.0):
        self.window = window
        self._samples: dict[int, list[tuple[float, bool, float, int]]] = {}

    def record_sample(
        self, flow_id: int, delivered: bool, delay: float, bits: int, now: float
    ) -> FlowStatus:
        """Add one outcome sample and return the refreshed status.

        ``delay`` is meaningful only when ``delivered``; lost samples carry
        their attempted size so throughput reflects delivered bits only.
        """
        if delivered and delay < 0:
            raise ValueError("delivered sample must have non-negative delay")
        samples = self._samples.setdefault(flow_id, [])
        samples.append((now, delivered, delay, bits))
        return self.status(flow_id, now)

    def _pruned(self, flow_id: int, now: float):
        samples = self._samples.get(flow_id, [])
        cutoff = now - self.window
        while samples and samples[0][0] < cutoff:
            samples.pop(0)
        return samples

    def status(self, flow_id: int, now: float) -> FlowStatus:
        samples = self._pruned(flow_id, now)
        if not samples:
            return FlowStatus(flow_id, window=self.window, has_data=False)
        delivered = [s for s in samples if s[1]]
        lost = len(samples) - len(delivered)
        bits = sum(s[3] for s in delivered)
        mean_delay = (
            sum(s[2] for s in delivered) / len(delivered) if delivered else 0.0
        )
        return FlowStatus(
            flow_id,
            throughput=bits / self.window,
            packet_loss=lost / len(samples),
            delay=mean_delay,
            window=self.window,
            has_data=True,
        )

    def statuses(self, now: float) -> dict[int, FlowStatus]:
        return {fid: self.status(fid, now) for fid in list(self._samples)}


@dataclass
class MagContainer:
    """Gateway-side information container advertised to the anchor: location,
    reachable prefixes, and the gateway's measured flow state."""

    poa_id: int
    link_addr: str
    location: tuple[float, float]
    channel_range: float | None
    system_info: str
    subnet_info: list[str] = field(default_factory=list)
    flow_statuses: dict[int, FlowStatus] = field(default_factory=dict)
    ip_addr: str = ""


@dataclass
class Thresholds:
    """Per-metric acceptable bands for one flow."""

    loss_lower: float = 0.0
    loss_upper: float = 1.0
    delay_lower: float = 0.0
    delay_upper: float = float("inf")
    throughput_lower: float = 0.0
    throughput_upper: float = float("inf")

    def __post_init__(self):
        if self.loss_lower > self.loss_upper:
            raise ValueError("loss bounds inverted")
        if self.delay_lower > self.delay_upper:
            raise ValueError("delay bounds inverted")
        if self.throughput_lower > self.throughput_upper:
            raise ValueError("throughput bounds inverted")


class ThresholdVerdict(Enum):
    WITHIN_BOUNDS = "within_bounds"
    ABOVE_UPPER = "above_upper"
    BELOW_LOWER = "below_lower"


@dataclass(frozen=True)
class ThresholdResult:
    verdict: ThresholdVerdict
    metric: str | None = None


def evaluate_thresholds(status: FlowStatus, th: Thresholds) -> ThresholdResult:
    """Compare a measured status against its bounds.

    Upper violations win over lower ones; among metrics the precedence is
    packet_loss, then delay, then throughput.  Silent flows are within
    bounds by definition.
    """
    if not status.has_data:
        return ThresholdResult(ThresholdVerdict.WITHIN_BOUNDS)
    if status.packet_loss > th.loss_upper:
        return ThresholdResult(ThresholdVerdict.ABOVE_UPPER, "packet_loss")
    if status.delay > th.delay_upper:
        return ThresholdResult(ThresholdVerdict.ABOVE_UPPER, "delay")
    if status.throughput > th.throughput_upper:
        return ThresholdResult(ThresholdVerdict.ABOVE_UPPER, "throughput")
    if status.packet_loss < th.loss_lower:
        return ThresholdResult(ThresholdVerdict.BELOW_LOWER, "packet_loss")
    if status.delay < th.delay_lower:
        return ThresholdResult(ThresholdVerdict.BELOW_LOWER, "delay")
    if status.throughput < th.throughput_lower:
        return ThresholdResult(ThresholdVerdict.BELOW_LOWER, "throughput")
    return ThresholdResult(ThresholdVerdict.WITHIN_BOUNDS)


class Mihf:
    """Per-node handover function: interface table, flow measurements, and
    synchronous event fan-out to registered subscribers."""

    def __init__(self, owner_id: str, role: str, window: float = 1.0):
        self.owner_id = owner_id
        self.role = role  # "mn", "mag", or "lma"
        self.interfaces: dict[int, InterfaceEntry] = {}
        self.flow_store = FlowStatusStore(window)
        self._subscribers: list = []
        self._last_event_time = float("-inf")

    def register_interface(self, entry: InterfaceEntry) -> None:
        self.interfaces[entry.interface_id] = entry

    def subscribe(self, callback) -> None:
        self._subscribers.append(callback)

    def on_link_event(self, event: MihEvent) -> int:
        """Apply a link event to the interface table and notify subscribers.

        Returns the number of notifications delivered.  Raises
        :class:`UnknownInterface` for events about unregistered interfaces.
        """
        entry = self.interfaces.get(event.interface_id)
        if entry is None:
            raise UnknownInterface(event.interface_id)
        if event.timestamp < self._last_event_time:
            raise ValueError("link events must be time-ordered")
        self._last_event_time = event.timestamp
        if event.kind is LinkEventKind.LINK_UP:
            entry.status = InterfaceStatus.ACTIVE
            if event.payload is not None and isinstance(event.payload, dict):
                poa = event.payload.get("poa")
                if poa is not None:
                    entry.poa = poa
        elif event.kind is LinkEventKind.LINK_DOWN:
            entry.status = InterfaceStatus.INACTIVE
            entry.poa = None
        for callback in self._subscribers:
            callback(event)
        return len(self._subscribers)

    def active_map(self) -> dict[int, bool]:
        return {
            iid: entry.status is InterfaceStatus.ACTIVE
            for iid, entry in self.interfaces.items()
        }


def query_information(
    scope: Scope,
    requester_role: str,
    local: Mihf,
    domain_containers: dict[int, MagContainer] | None = None,
    now: float = 0.0,
):
    """Scoped snapshot of handover information state.

    Terminals and gateways see their own links and measurements; only the
    anchor may ask for the domain-wide gateway containers.  Snapshots are
    deep copies, so later mutation of live state never changes them.
    """
    if scope is Scope.DOMAIN_WIDE:
        if requester_role != "lma":
            raise UnauthorizedScope(requester_role)
        return copy.deepcopy(domain_containers or {})
    return {
        "interfaces": copy.deepcopy(local.interfaces),
        "flow_statuses": copy.deepcopy(local.flow_store.statuses(now)),
    }
