"""Evaluation scenarios.

* 0: cellular only; a single attachment for the whole run, no handover.
* 1: Wi-Fi only; horizontal handover between access points, dark outside
  coverage.
* 2: both radios, multihomed, full flow-mobility machinery; the safety flow
  prefers the cellular interface, comfort and user flows prefer Wi-Fi with
  cellular fallback.
* 3: both radios but one interface at a time, starting on Wi-Fi, switching
  vertically on coverage changes.

Scenarios 1 and 3 re-evaluate the strongest access point at every check
(naive selection, which flaps near cell edges); scenario 2 keeps its access
point while it stays in range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ConfigError
from .flows import (
    FlowBindingEntry,
    FlowDescriptor,
    FlowTable,
    Transport,
    fallback_flow_table,
)

IFACE_LTE = 1
IFACE_WIFI = 2
LTE_MAG_ID = 100


def _single_iface_table(iface: int) -> FlowTable:
    return FlowTable(
        [
            FlowBindingEntry(1, 1, FlowDescriptor(Transport.ANY, 5001, 5100), (iface,)),
            FlowBindingEntry(2, 2, FlowDescriptor(Transport.ANY, 5101, 5200), (iface,)),
            FlowBindingEntry(3, 2, FlowDescriptor(Transport.ANY, 5201, 5300), (iface,)),
        ]
    )


@dataclass
class ScenarioPolicy:
    lte_enabled: bool
    wifi_enabled: bool
    multihomed: bool
    association: str  # "naive" or "sticky"
    machinery: bool
    initial: str  # "lte", "wifi", "wifi_else_lte", "both"
    flow_table: FlowTable


def scenario_policy(scenario: int) -> ScenarioPolicy:
    if scenario == 0:
        return ScenarioPolicy(True, False, False, "naive", False, "lte",
                              _single_iface_table(IFACE_LTE))
    if scenario == 1:
        return ScenarioPolicy(False, True, False, "naive", False, "wifi",
                              _single_iface_table(IFACE_WIFI))
    if scenario == 2:
        return ScenarioPolicy(True, True, True, "sticky", True, "both",
                              fallback_flow_table())
    if scenario == 3:
        return ScenarioPolicy(True, True, False, "naive", False, "wifi_else_lte",
                              fallback_flow_table())
    raise ConfigError(f"unknown scenario {scenario}")


@dataclass
class ScenarioSpec:
    """One experiment cell: scenario, offered load, mobility, and seeds."""

    scenario: int = 2
    active_senders: int = 50
    speed: float = 10.0
    map: str = "manhattan"  # or "trace:<path>"
    seeds: int = 10
    seed_base: int = 1
    duration: float | None = None
    warmup: float | None = None
    vehicle_count: int = 50

    def validate(self) -> None:
        if self.scenario not in (0, 1, 2, 3):
            raise ConfigError(f"scenario must be 0..3, got {self.scenario}")
        if not 1 <= self.active_senders <= self.vehicle_count:
            raise ConfigError("active_senders must be in [1, vehicle_count]")
        if self.speed <= 0:
            raise ConfigError("speed must be positive")
        if self.map != "manhattan" and not self.map.startswith("trace:"):
            raise ConfigError("map must be 'manhattan' or 'trace:<path>'")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")

    @property
    def trace_path(self) -> str | None:
        if self.map.startswith("trace:"):
            return self.map.split(":", 1)[1]
        return None

    def seed_list(self) -> list[int]:
        return [self.seed_base + i for i in range(self.seeds)]

    def policy(self) -> ScenarioPolicy:
        return scenario_policy(self.scenario)

    def label(self) -> str:
        map_label = "manhattan" if self.map == "manhattan" else "trace"
        return (
            f"s{self.scenario}-{map_label}-a{self.active_senders}"
            f"-v{self.speed:g}"
        )
