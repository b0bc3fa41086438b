"""Experiment orchestration: dispatch, output files, sweeps.

Every run writes four artifacts into its output directory: the fully resolved
config echo (config.txt), metrics.csv, trace.jsonl, and summary.json.
Re-running the echoed config with the same seed reproduces metrics and trace
byte for byte on the sim backend.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import replace

from .config import (
    ASYNC,
    BACKEND_CONCURRENT,
    BACKEND_SIM,
    SERIAL,
    SERIAL_STALE,
    SYNC,
    ConfigError,
    ExperimentConfig,
    format_config,
    override,
)
from .metrics import (
    ConvergenceCriterion,
    epochs_to_epsilon,
    epochs_to_own_convergence,
    time_to_epsilon,
    write_metrics_csv,
)
from .results import RunOutput
from .simulate import run_sim
from .staleness import run_serial


def run_experiment(
    cfg: ExperimentConfig,
    seed: int | None = None,
    out_dir: str | None = None,
    on_iteration=None,
) -> RunOutput:
    """Run one experiment per the config; optionally persist its artifacts."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if cfg.backend == BACKEND_CONCURRENT:
        if cfg.protocol not in (ASYNC, SYNC):
            raise ConfigError("concurrent backend handles async and sync only")
        from .concurrent import run_concurrent

        out = run_concurrent(cfg)
    elif cfg.protocol in (SERIAL, SERIAL_STALE):
        out = run_serial(cfg)
    else:
        out = run_sim(cfg, on_iteration=on_iteration)
    _attach_convergence(cfg, out)
    if out_dir is not None:
        write_outputs(cfg, out, out_dir)
    return out


def _attach_convergence(cfg: ExperimentConfig, out: RunOutput) -> None:
    conv = cfg.convergence
    if math.isnan(conv.epsilon):
        return
    crit = ConvergenceCriterion(conv.epsilon, conv.patience, conv.direction)
    epochs = epochs_to_epsilon(out.rows, crit)
    seconds = time_to_epsilon(out.rows, crit)
    out.summary["convergence_epsilon"] = conv.epsilon
    out.summary["epochs_to_epsilon"] = epochs if epochs is not None else "not-reached"
    out.summary["time_to_epsilon"] = seconds if seconds is not None else "not-reached"


def write_outputs(cfg: ExperimentConfig, out: RunOutput, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    write_metrics_csv(out.rows, os.path.join(out_dir, "metrics.csv"))
    out.trace.to_jsonl(os.path.join(out_dir, "trace.jsonl"))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(out.summary, fh, indent=2)
        fh.write("\n")


SWEEP_HEADER = "value,seed,status,final_metric,epochs_to_converge,selected"


def sweep(
    cfg: ExperimentConfig,
    param: str,
    values: list[str],
    restarts: int = 1,
    out_dir: str | None = None,
) -> list[dict]:
    """One run per axis value (times `restarts` seeds); per-value best kept.

    Returns one record per run; `selected` marks the best-final-metric restart
    for each value.  Individual failures are recorded and the sweep continues.
    epochs_to_converge uses the configured criterion when one is set, else
    each run's own plateau.
    """
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    records: list[dict] = []
    for value in values:
        variant = override(cfg, param, value)
        group: list[dict] = []
        for r in range(restarts):
            run_seed = variant.seed + 7919 * r
            rec: dict = {"value": value, "seed": run_seed}
            try:
                out = run_experiment(variant, seed=run_seed)
                rec["status"] = out.summary["status"]
                rec["final_metric"] = out.summary["final_test_metric"]
                rec["epochs_to_converge"] = _epochs_to_converge(variant, out)
            except Exception as exc:  # keep sweeping; record the failure
                rec["status"] = f"error: {exc}"
                rec["final_metric"] = math.nan
                rec["epochs_to_converge"] = math.nan
            rec["selected"] = False
            group.append(rec)
        finite = [g for g in group if isinstance(g["final_metric"], float) and not math.isnan(g["final_metric"])]
        if finite:
            best = min(finite, key=lambda g: g["final_metric"])
            best["selected"] = True
        records.extend(group)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
            fh.write(format_sweep_csv(records))
    return records


def _epochs_to_converge(cfg: ExperimentConfig, out: RunOutput) -> float:
    conv = cfg.convergence
    if not math.isnan(conv.epsilon):
        crit = ConvergenceCriterion(conv.epsilon, conv.patience, conv.direction)
        epochs = epochs_to_epsilon(out.rows, crit)
    else:
        epochs = epochs_to_own_convergence(out.rows)
    return math.nan if epochs is None else epochs


def format_sweep_csv(records: list[dict]) -> str:
    lines = [SWEEP_HEADER]
    for r in records:
        metric = r["final_metric"]
        epochs = r["epochs_to_converge"]
        lines.append(
            f"{r['value']},{r['seed']},{r['status']},"
            f"{metric!r},{epochs!r},{str(r['selected']).lower()}"
        )
    return "\n".join(lines) + "\n"
