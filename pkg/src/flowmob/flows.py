"""Flow classification and interface preference tables.

A flow is identified by a 2-tuple of transport protocol and destination port
range.  Each table entry carries a priority and an ordered preference list of
attachment identifiers (interface ids on a terminal, gateway binding ids on
the network side).  Tables with pairwise disjoint port ranges classify any
packet to at most one flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class Transport(Enum):
    UDP = "udp"
    TCP = "tcp"
    ANY = "any"


class FlowTableError(Exception):
    """Invalid flow table contents."""


class UnknownFlow(KeyError):
    """Flow id not present in the table."""


@dataclass(frozen=True)
class FlowDescriptor:
    """Transport plus closed destination-port interval."""

    transport: Transport
    port_lo: int
    port_hi: int

    def __post_init__(self):
        if not (0 < self.port_lo <= self.port_hi <= 65535):
            raise FlowTableError(
                f"bad port range {self.port_lo}-{self.port_hi}"
            )

    def matches(self, transport: Transport, dest_port: int) -> bool:
        if self.transport is not Transport.ANY and transport is not Transport.ANY:
            if self.transport is not transport:
                return False
        return self.port_lo <= dest_port <= self.port_hi

    def overlaps(self, other: "FlowDescriptor") -> bool:
        return self.port_lo <= other.port_hi and other.port_lo <= self.port_hi


@dataclass(frozen=True)
class AppClass:
    """Application class with its messaging cadence."""

    kind: str
    message_period: float
    payload_size: int

    def __post_init__(self):
        if self.message_period <= 0:
            raise FlowTableError("message_period must be positive")
        if self.payload_size <= 0:
            raise FlowTableError("payload_size must be positive")


# Canonical class periods: hazard messaging every 0.1 s, traffic-efficiency
# messaging every 0.5 s, infotainment every 1 s.
DEFAULT_CLASSES = (
    AppClass("safety", 0.1, 67),
    AppClass("comfort", 0.5, 67),
    AppClass("user", 1.0, 67),
)

CLASS_OF_FLOW = {1: "safety", 2: "comfort", 3: "user"}


@dataclass(frozen=True)
class FlowBindingEntry:
    flow_id: int
    priority: int
    descriptor: FlowDescriptor
    preference: tuple[int, ...]

    def __post_init__(self):
        if self.flow_id <= 0:
            raise FlowTableError("flow_id must be positive")
        if self.priority <= 0:
            raise FlowTableError("priority must be positive")
        if len(self.preference) == 0:
            raise FlowTableError("preference list must be non-empty")
        if len(set(self.preference)) != len(self.preference):
            raise FlowTableError("preference list must be duplicate-free")


@dataclass
class FlowTable:
    entries: list[FlowBindingEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.flow_id in seen:
                raise FlowTableError(f"duplicate flow id {entry.flow_id}")
            seen.add(entry.flow_id)
        for i, a in enumerate(self.entries):
            for b in self.entries[i + 1 :]:
                if a.descriptor.overlaps(b.descriptor):
                    raise FlowTableError(
                        f"flows {a.flow_id} and {b.flow_id} have overlapping ports"
                    )

    def entry(self, flow_id: int) -> FlowBindingEntry:
        for e in self.entries:
            if e.flow_id == flow_id:
                return e
        raise UnknownFlow(flow_id)

    def flow_ids(self) -> list[int]:
        return [e.flow_id for e in self.entries]


def classify_packet(
    transport: Transport, dest_port: int, table: FlowTable
) -> int | None:
    """Return the flow id matching (transport, dest_port), or None.

    Disjoint port ranges guarantee at most one match.
    """
    for entry in table.entries:
        if entry.descriptor.matches(transport, dest_port):
            return entry.flow_id
    return None


def select_attachment(
    flow_id: int, table: FlowTable, statuses: dict[int, bool]
) -> int | None:
    """First attachment in the flow's preference list whose status is active.

    ``statuses`` maps attachment id to True (active) / False.  Returns None
    when every listed attachment is inactive or unknown.
    """
    entry = table.entry(flow_id)
    for attachment in entry.preference:
        if statuses.get(attachment, False):
            return attachment
    return None


def default_flow_table() -> FlowTable:
    """The three-class table: one safety flow preferring attachment 1 with
    fallback to 2, and comfort/user flows pinned to attachment 2."""
    return FlowTable(
        [
            FlowBindingEntry(1, 1, FlowDescriptor(Transport.ANY, 5001, 5100), (1, 2)),
            FlowBindingEntry(2, 2, FlowDescriptor(Transport.ANY, 5101, 5200), (2,)),
            FlowBindingEntry(3, 2, FlowDescriptor(Transport.ANY, 5201, 5300), (2,)),
        ]
    )


def fallback_flow_table() -> FlowTable:
    """Variant of the default table where comfort and user flows fall back to
    attachment 1 when attachment 2 is down (used by the flow-mobility
    scenario so those flows survive coverage gaps)."""
    return FlowTable(
        [
            FlowBindingEntry(1, 1, FlowDescriptor(Transport.ANY, 5001, 5100), (1, 2)),
            FlowBindingEntry(2, 2, FlowDescriptor(Transport.ANY, 5101, 5200), (2, 1)),
            FlowBindingEntry(3, 2, FlowDescriptor(Transport.ANY, 5201, 5300), (2, 1)),
        ]
    )


def table_from_config(entries: list[dict]) -> FlowTable:
    """Build a table from configuration rows (flow_id, priority, transport,
    port_lo, port_hi, preference)."""
    built = []
    for row in entries:
        try:
            built.append(
                FlowBindingEntry(
                    flow_id=int(row["flow_id"]),
                    priority=int(row["priority"]),
                    descriptor=FlowDescriptor(
                        Transport(str(row.get("transport", "any")).lower()),
                        int(row["port_lo"]),
                        int(row["port_hi"]),
                    ),
                    preference=tuple(int(p) for p in row["preference"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise FlowTableError(f"bad flow table row {row!r}: {exc}") from exc
    return FlowTable(built)
