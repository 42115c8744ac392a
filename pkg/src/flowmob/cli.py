"""Command line entry points.

    flowmob-sim run --scenario 2 --active 30 --speed 10 --map manhattan \
        --seeds 10 --out results/
    flowmob-sim sweep --config sweep.yaml --out results/
    flowmob-sim validate-trace data/sample_urban.trace

Exit codes: 0 success, 2 configuration error, 3 runtime invariant violation.
"""

from __future__ import annotations

import sys

import click

from .config import ConfigError, load_config
from .engine import SimInvariantError
from .flows import FlowTableError, table_from_config
from .mobility import Trace, TraceError
from .runner import (
    emit_results,
    run_experiment,
    run_single,
    sweep_specs,
    write_debug_log,
)
from .scenarios import ScenarioSpec


@click.group()
def main() -> None:
    """Flow-mobility simulator for multi-radio vehicular networks."""


def _load_cfg(config_path):
    try:
        cfg = load_config(config_path)
        if cfg.flow_table is not None:
            table_from_config(cfg.flow_table)  # validate early
        return cfg
    except (ConfigError, FlowTableError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)


def _echo_aggregates(exp) -> None:
    click.echo(f"cell {exp.spec.label()} ({exp.spec.seeds} seeds)")
    for name, agg in exp.aggregates.items():
        if agg.mean is None:
            click.echo(f"  {name:20s} n/a")
        elif agg.ci_low is None:
            click.echo(f"  {name:20s} {agg.mean:.6f}")
        else:
            click.echo(
                f"  {name:20s} {agg.mean:.6f} "
                f"[{agg.ci_low:.6f}, {agg.ci_high:.6f}]"
            )


@main.command()
@click.option("--scenario", type=click.IntRange(0, 3), required=True)
@click.option("--active", "active", type=int, default=50, show_default=True)
@click.option("--speed", type=float, default=10.0, show_default=True)
@click.option("--map", "map_", default="manhattan", show_default=True,
              help="'manhattan' or 'trace:<path>'")
@click.option("--seeds", type=int, default=10, show_default=True)
@click.option("--seed-base", type=int, default=1, show_default=True)
@click.option("--duration", type=float, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--debug-log", "debug_log", type=click.Path(), default=None,
              help="write transitions/messages/binding dump of the first seed")
@click.option("--packet-trace", is_flag=True, default=False,
              help="also write per-run packet traces to --out")
def run(scenario, active, speed, map_, seeds, seed_base, duration,
        config_path, out_dir, jobs, debug_log, packet_trace) -> None:
    """Run one experiment cell and print aggregate metrics."""
    cfg = _load_cfg(config_path)
    spec = ScenarioSpec(
        scenario=scenario, active_senders=active, speed=speed, map=map_,
        seeds=seeds, seed_base=seed_base, duration=duration,
    )
    try:
        spec.validate()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    try:
        if debug_log is not None:
            _, first = run_single(
                spec, cfg, spec.seed_base, bce_dump_interval=1.0
            )
            write_debug_log(first, debug_log)
        keep = packet_trace
        exp = run_experiment(spec, cfg, jobs=jobs, keep_results=keep)
    except TraceError as exc:
        click.echo(f"trace error: {exc}", err=True)
        sys.exit(2)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except SimInvariantError as exc:
        click.echo(f"invariant violation: {exc}", err=True)
        sys.exit(3)
    _echo_aggregates(exp)
    if out_dir is not None:
        paths = emit_results([exp], out_dir,
                             packet_traces=exp.results if packet_trace else None)
        click.echo(f"wrote {paths['csv']}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default="results")
@click.option("--jobs", type=int, default=1, show_default=True)
def sweep(config_path, out_dir, jobs) -> None:
    """Run the full evaluation grid (both maps, all loads and speeds)."""
    cfg = _load_cfg(config_path)
    sweep_cfg = getattr(cfg, "sweep", None)
    specs = sweep_specs(sweep_cfg)
    experiments = []
    try:
        for spec in specs:
            exp = run_experiment(spec, cfg, jobs=jobs)
            experiments.append(exp)
            agg = exp.aggregates["throughput_kbps"]
            click.echo(f"{spec.label():32s} throughput={agg.mean:.2f} Kbps")
    except TraceError as exc:
        click.echo(f"trace error: {exc}", err=True)
        sys.exit(2)
    except SimInvariantError as exc:
        click.echo(f"invariant violation: {exc}", err=True)
        sys.exit(3)
    paths = emit_results(experiments, out_dir)
    click.echo(f"wrote {paths['csv']} and {paths['summary']}")


@main.command("validate-trace")
@click.argument("path", type=click.Path(exists=True))
def validate_trace(path) -> None:
    """Check a mobility trace file (t vehicle_id x y per line)."""
    try:
        trace = Trace.from_file(path)
    except TraceError as exc:
        click.echo(f"invalid trace: {exc}", err=True)
        sys.exit(2)
    ids = trace.vehicle_ids()
    spans = [trace.span(v) for v in ids]
    t_lo = min(s[0] for s in spans)
    t_hi = max(s[1] for s in spans)
    extent = trace.extent()
    click.echo(
        f"ok: {len(ids)} vehicles, t=[{t_lo:g}, {t_hi:g}] s, "
        f"extent {extent[0]:.0f} x {extent[1]:.0f} m"
    )


if __name__ == "__main__":
    main()
