"""Configuration tree for the simulator.

Every model default lives here as a dataclass field so that a YAML file can
override any of them.  Files are plain nested mappings mirroring the dataclass
names, e.g.::

    radio:
      wifi:
        coverage_radius: 300.0
    traffic:
      payload_bytes: 67

Unknown keys raise :class:`ConfigError` rather than being silently ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml


class ConfigError(Exception):
    """Invalid configuration file or value."""


@dataclass
class RadioConfig:
    """One radio technology (air interface) of the access network."""

    technology: str = "wifi"
    # None means the whole map is covered (cellular); metres otherwise.
    coverage_radius: float | None = 330.0
    air_latency: float = 0.002
    capacity_bps: float = 300_000.0
    attach_delay: float = 0.030
    base_loss: float = 0.001
    distance_loss_coeff: float = 0.015
    speed_loss_coeff: float = 0.06
    speed_loss_knee: float = 20.0
    # Congestion: loss ramps above knee_utilization, contention slows the air
    # link as offered load approaches capacity.
    knee_utilization: float = 0.95
    knee_loss_slope: float = 0.50
    contention_linear: float = 0.008
    contention_quadratic: float = 0.030

    def validate(self) -> None:
        if self.coverage_radius is not None and self.coverage_radius <= 0:
            raise ConfigError("coverage_radius must be positive or null")
        if self.capacity_bps <= 0:
            raise ConfigError("capacity_bps must be positive")
        if not 0.0 <= self.base_loss <= 1.0:
            raise ConfigError("base_loss must be a probability")


def _default_lte() -> RadioConfig:
    return RadioConfig(
        technology="lte",
        coverage_radius=None,
        air_latency=0.010,
        capacity_bps=2_000_000.0,
        attach_delay=0.050,
        base_loss=0.002,
        distance_loss_coeff=0.0,
        knee_utilization=0.26,
        knee_loss_slope=0.30,
        contention_linear=0.0,
        contention_quadratic=0.010,
    )


@dataclass
class TopologyConfig:
    """Fixed infrastructure: one sink, a small wired backbone, four gateways."""

    wifi_ap_positions: list[tuple[float, float]] = field(
        default_factory=lambda: [(250.0, 300.0), (600.0, 500.0), (950.0, 300.0)]
    )
    lte_ap_position: tuple[float, float] = (600.0, 400.0)
    wired_latency: float = 0.002
    wired_capacity_bps: float = 100_000_000.0
    # Hops from a gateway to the anchor and from the anchor to the sink.
    gateway_hops: int = 2
    sink_hops: int = 1

    def validate(self) -> None:
        if len(self.wifi_ap_positions) < 1:
            raise ConfigError("need at least one wifi access point")
        if self.wired_latency < 0:
            raise ConfigError("wired_latency must be >= 0")


@dataclass
class MobilityConfig:
    rows: int = 4
    cols: int = 6
    block_size: float = 200.0
    turn_probabilities: tuple[float, float, float] = (0.5, 0.25, 0.25)
    update_interval: float = 0.5

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid must have at least one row and column")
        if self.block_size <= 0:
            raise ConfigError("block_size must be positive")
        if abs(sum(self.turn_probabilities) - 1.0) > 1e-9:
            raise ConfigError("turn_probabilities must sum to 1")
        if self.update_interval <= 0:
            raise ConfigError("update_interval must be positive")

    @property
    def width(self) -> float:
        return self.cols * self.block_size

    @property
    def height(self) -> float:
        return self.rows * self.block_size


@dataclass
class TrafficConfig:
    """Per-class message generation parameters.

    Classes send fixed-size datagrams at fixed periods toward the wired sink;
    destination ports place each class inside its flow-table range.
    """

    payload_bytes: int = 67
    header_bytes: int = 40
    tunnel_overhead_bytes: int = 40
    periods: dict[str, float] = field(
        default_factory=lambda: {"safety": 0.1, "comfort": 0.5, "user": 1.0}
    )
    ports: dict[str, int] = field(
        default_factory=lambda: {"safety": 5001, "comfort": 5101, "user": 5201}
    )

    def validate(self) -> None:
        if self.payload_bytes <= 0:
            raise ConfigError("payload_bytes must be positive")
        for name, period in self.periods.items():
            if period <= 0:
                raise ConfigError(f"period for class {name} must be positive")


@dataclass
class ThresholdConfig:
    """Acceptable bounds on measured flow state, per application class."""

    loss_upper: float = 0.05
    delay_upper: dict[str, float] = field(
        default_factory=lambda: {"safety": 0.1, "comfort": 0.5, "user": 1.0}
    )
    throughput_lower: float = 0.0
    window: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.loss_upper <= 1.0:
            raise ConfigError("loss_upper must be a probability")
        if self.window <= 0:
            raise ConfigError("window must be positive")


@dataclass
class ExchangeConfig:
    """Timers and damping for the flow handover procedures."""

    timeout: float = 0.5
    debounce_windows: int = 1
    volunteer_cooldown_windows: int = 5
    domain_breach_windows: int = 2
    # Gateway utilization above which it asks to offload a flow, below which
    # it may volunteer to absorb one.
    mag_offload_utilization: float = 0.90
    mag_absorb_utilization: float = 0.0
    # Consecutive breached windows before the terminal asks to move a flow.
    mn_violation_windows: int = 2
    reconnect_gap: float = 1.0

    def validate(self) -> None:
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")


@dataclass
class PmipConfig:
    bce_lifetime: float = 300.0

    def validate(self) -> None:
        if self.bce_lifetime <= 0:
            raise ConfigError("bce_lifetime must be positive")


@dataclass
class AssociationConfig:
    """Access-point selection behaviour of the terminal radios.

    ``naive`` re-evaluates the strongest access point at every check and
    follows it immediately; ``sticky`` keeps the current one while it stays in
    range.  ``rssi_noise_sigma`` (metres of equivalent distance error) makes
    the naive policy flap near cell boundaries.
    """

    rssi_noise_sigma: float = 12.0
    check_interval: float = 0.5

    def validate(self) -> None:
        if self.rssi_noise_sigma < 0:
            raise ConfigError("rssi_noise_sigma must be >= 0")


@dataclass
class RunConfig:
    duration: float = 120.0
    warmup: float = 10.0
    vehicle_count: int = 50

    def validate(self) -> None:
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if not 0 <= self.warmup < self.duration:
            raise ConfigError("warmup must lie inside the run")
        if self.vehicle_count < 1:
            raise ConfigError("vehicle_count must be positive")


@dataclass
class SimConfig:
    """Root of the configuration tree."""

    lte: RadioConfig = field(default_factory=_default_lte)
    wifi: RadioConfig = field(default_factory=RadioConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    exchange: ExchangeConfig = field(default_factory=ExchangeConfig)
    pmip: PmipConfig = field(default_factory=PmipConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    run: RunConfig = field(default_factory=RunConfig)
    # Optional flow table override; entries mirror the flow-table columns
    # (flow_id, priority, transport, port_lo, port_hi, preference).
    flow_table: list[dict] | None = None
    # Optional sweep grid override (see runner.DEFAULT_SWEEP for the keys).
    sweep: dict | None = None

    def validate(self) -> None:
        for child in (
            self.lte,
            self.wifi,
            self.topology,
            self.mobility,
            self.traffic,
            self.thresholds,
            self.exchange,
            self.pmip,
            self.association,
            self.run,
        ):
            child.validate()


_TUPLE_FIELDS = {"turn_probabilities", "lte_ap_position"}


def _apply(obj, data: dict, path: str) -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {path}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be a mapping")
            _apply(current, value, f"{path}{key}.")
        elif key == "wifi_ap_positions":
            setattr(obj, key, [tuple(float(c) for c in p) for p in value])
        elif key in _TUPLE_FIELDS:
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)


def load_config(path: str | None = None, overrides: dict | None = None) -> SimConfig:
    """Build a :class:`SimConfig` from defaults, an optional YAML file, and
    an optional override mapping (applied last)."""
    cfg = SimConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        _apply(cfg, data, "")
    if overrides:
        _apply(cfg, overrides, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: SimConfig) -> dict:
    """Plain-dict form of the tree (YAML-dumpable, round-trips via load)."""
    return dataclasses.asdict(cfg)
