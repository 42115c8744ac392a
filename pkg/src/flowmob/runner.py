"""Multi-seed experiment runner and result files.

Each (scenario, load, speed, map) cell runs one deterministic simulation per
seed; aggregates are the across-seed mean with a Student-t 95% confidence
interval (n-1 degrees of freedom).  Cells with a single seed report no
interval.  Results land in a CSV (one row per cell and metric) and a JSON
summary; identical seeds and config reproduce the files byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import SimConfig, config_to_dict, load_config
from .engine import RunResult, Simulation
from .metrics import RunMetrics, compute_metrics
from .scenarios import ScenarioSpec

METRIC_NAMES = (
    "throughput_kbps",
    "loss_ratio",
    "avg_delay",
    "delay_safety",
    "delay_comfort",
    "delay_user",
    "handover_count",
    "avg_handover_time",
)


@dataclass
class Aggregate:
    mean: float | None
    ci_low: float | None
    ci_high: float | None
    n: int


@dataclass
class ExperimentResult:
    spec: ScenarioSpec
    per_seed: list[RunMetrics]
    aggregates: dict[str, Aggregate]
    results: list[RunResult] = field(default_factory=list)


def t_aggregate(values: list[float]) -> Aggregate:
    """Mean with a two-sided 95% t interval; no interval for n < 2."""
    n = len(values)
    if n == 0:
        return Aggregate(None, None, None, 0)
    mean = float(np.mean(values))
    if n == 1:
        return Aggregate(mean, None, None, 1)
    half = float(
        stats.t.ppf(0.975, n - 1) * np.std(values, ddof=1) / np.sqrt(n)
    )
    return Aggregate(mean, mean - half, mean + half, n)


def run_single(
    spec: ScenarioSpec, cfg: SimConfig, seed: int,
    bce_dump_interval: float | None = None,
) -> tuple[RunMetrics, RunResult]:
    sim = Simulation(spec, cfg, seed, bce_dump_interval=bce_dump_interval)
    result = sim.run()
    return compute_metrics(result), result


def _run_cell(args) -> RunMetrics:
    spec_dict, cfg_dict, seed = args
    spec = ScenarioSpec(**spec_dict)
    cfg = load_config(None, cfg_dict)
    metrics, _ = run_single(spec, cfg, seed)
    return metrics


def run_experiment(
    spec: ScenarioSpec,
    cfg: SimConfig,
    jobs: int = 1,
    keep_results: bool = False,
) -> ExperimentResult:
    """Run all seeds of one cell and aggregate."""
    spec.validate()
    seeds = spec.seed_list()
    per_seed: list[RunMetrics] = []
    results: list[RunResult] = []
    if jobs > 1 and len(seeds) > 1 and not keep_results:
        args = [(dataclasses.asdict(spec), config_to_dict(cfg), s) for s in seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_cell, args))
    else:
        for seed in seeds:
            metrics, result = run_single(spec, cfg, seed)
            per_seed.append(metrics)
            if keep_results:
                results.append(result)
    aggregates: dict[str, Aggregate] = {}
    for name in METRIC_NAMES:
        values = [
            m.metric_values().get(name)
            for m in per_seed
        ]
        values = [v for v in values if v is not None]
        aggregates[name] = t_aggregate(values)
    return ExperimentResult(spec, per_seed, aggregates, results)


DEFAULT_SWEEP = {
    "scenarios": [0, 1, 2, 3],
    "seeds": 10,
    "seed_base": 1,
    "manhattan": {
        "loads": [10, 20, 30, 40, 50],
        "load_speed": 10.0,
        "speeds": [5.0, 10.0, 15.0, 20.0, 25.0],
        "speed_load": 30,
    },
    "trace": {
        "path": "data/sample_urban.trace",
        "loads": [10, 20, 30, 40, 50],
    },
}


def sweep_specs(sweep_cfg: dict | None = None) -> list[ScenarioSpec]:
    """Expand a sweep description into the grid of scenario specs."""
    sc = dict(DEFAULT_SWEEP)
    if sweep_cfg:
        for key, value in sweep_cfg.items():
            if isinstance(value, dict) and isinstance(sc.get(key), dict):
                sc[key] = {**sc[key], **value}
            else:
                sc[key] = value
    specs = []
    seeds = sc["seeds"]
    seed_base = sc["seed_base"]
    man = sc.get("manhattan") or {}
    for scenario in sc["scenarios"]:
        for load in man.get("loads", []):
            specs.append(
                ScenarioSpec(
                    scenario=scenario, active_senders=load,
                    speed=man["load_speed"], map="manhattan",
                    seeds=seeds, seed_base=seed_base,
                )
            )
        for speed in man.get("speeds", []):
            specs.append(
                ScenarioSpec(
                    scenario=scenario, active_senders=man["speed_load"],
                    speed=speed, map="manhattan",
                    seeds=seeds, seed_base=seed_base,
                )
            )
        trace = sc.get("trace") or {}
        if trace.get("path"):
            for load in trace.get("loads", []):
                specs.append(
                    ScenarioSpec(
                        scenario=scenario, active_senders=load,
                        speed=10.0, map=f"trace:{trace['path']}",
                        seeds=seeds, seed_base=seed_base,
                    )
                )
    # Drop duplicate cells (the load and speed axes share one point).
    seen = set()
    unique = []
    for spec in specs:
        key = (spec.scenario, spec.active_senders, spec.speed, spec.map)
        if key not in seen:
            seen.add(key)
            unique.append(spec)
    return unique


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def result_rows(experiments: list[ExperimentResult]) -> list[dict]:
    rows = []
    for exp in experiments:
        map_label = "manhattan" if exp.spec.map == "manhattan" else "trace"
        for metric in METRIC_NAMES:
            agg = exp.aggregates[metric]
            if exp.spec.scenario == 0 and metric in (
                "handover_count", "avg_handover_time",
            ):
                # No handover happens; report the metric as not applicable.
                rows.append(
                    {
                        "scenario": exp.spec.scenario,
                        "map": map_label,
                        "active": exp.spec.active_senders,
                        "speed": exp.spec.speed,
                        "metric": metric,
                        "mean": None,
                        "ci_low": None,
                        "ci_high": None,
                        "n": agg.n,
                    }
                )
                continue
            rows.append(
                {
                    "scenario": exp.spec.scenario,
                    "map": map_label,
                    "active": exp.spec.active_senders,
                    "speed": exp.spec.speed,
                    "metric": metric,
                    "mean": agg.mean,
                    "ci_low": agg.ci_low,
                    "ci_high": agg.ci_high,
                    "n": agg.n,
                }
            )
    rows.sort(
        key=lambda r: (r["map"], r["scenario"], r["active"], r["speed"], r["metric"])
    )
    return rows


def emit_results(
    experiments: list[ExperimentResult], out_dir: str,
    packet_traces: list[RunResult] | None = None,
) -> dict[str, str]:
    """Write results.csv and summary.json (and optional per-run packet
    traces); returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    rows = result_rows(experiments)
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("scenario,map,active,speed,metric,mean,ci_low,ci_high,n\n")
        for r in rows:
            fh.write(
                f"{r['scenario']},{r['map']},{r['active']},{r['speed']:g},"
                f"{r['metric']},{_fmt(r['mean'])},{_fmt(r['ci_low'])},"
                f"{_fmt(r['ci_high'])},{r['n']}\n"
            )
    summary = {
        "cells": [
            {
                "scenario": exp.spec.scenario,
                "map": "manhattan" if exp.spec.map == "manhattan" else "trace",
                "active": exp.spec.active_senders,
                "speed": exp.spec.speed,
                "seeds": exp.spec.seeds,
                "metrics": {
                    name: dataclasses.asdict(agg)
                    for name, agg in exp.aggregates.items()
                },
            }
            for exp in experiments
        ]
    }
    json_path = os.path.join(out_dir, "summary.json")
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths = {"csv": csv_path, "summary": json_path}
    if packet_traces:
        for result in packet_traces:
            trace_path = os.path.join(
                out_dir, f"packets_s{result.scenario}_seed{result.seed}.txt"
            )
            with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("\n".join(result.packet_trace_lines()))
                fh.write("\n")
            paths[f"packets_s{result.scenario}_seed{result.seed}"] = trace_path
    return paths


def load_results_csv(path: str) -> list[dict]:
    """Read back a results.csv written by :func:`emit_results`."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = dict(zip(header, parts))
            row["scenario"] = int(row["scenario"])
            row["active"] = int(row["active"])
            row["speed"] = float(row["speed"])
            for key in ("mean", "ci_low", "ci_high"):
                row[key] = float(row[key]) if row[key] != "" else None
            row["n"] = int(row["n"])
            rows.append(row)
    return rows


def write_debug_log(result: RunResult, path: str) -> None:
    """Structured per-run log: state-machine transitions, control messages,
    and the final binding-cache dump, one record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, entity, exchange_id, step in result.transitions:
            fh.write(f"T {t:.6f} {entity} exch={exchange_id} {step}\n")
        for t, kind, src, dst, mn, flows, exchange_id in result.messages:
            flow_str = "/".join(str(f) for f in flows) or "-"
            fh.write(
                f"M {t:.6f} {kind} {src}->{dst} mn={mn} flows={flow_str} "
                f"exch={exchange_id}\n"
            )
        for line in result.bce_dump:
            fh.write(f"B {line}\n")
