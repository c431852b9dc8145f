"""Experiment harness: run, compare, timeline inspection, parameter sweeps.

This layer owns everything above a single simulated run: dataset and stage
construction from a config, learning-rate decay across epochs, eval metrics
on the held-out split, multi-config comparison, and sweeps with per-value
aggregates. File writers live here too so the CLI and tests share one
formatting path; a rerun of the same config produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, ExperimentConfig, canonical_json, config_from_dict, config_hash
from .data import BatchStream, Dataset, generate_dataset
from .linalg import RngStream, loss_and_grad
from .optim import OptimizerState
from .runtime import (
    STRATEGY_SCHEDULE,
    RunReport,
    build_timeline,
    execute,
    memory_peaks,
    staleness_and_inconsistency,
)
from .schedule import bubble_ratio, makespan, steady_state_window, timeline_json_obj
from .stages import build_layers, build_stages, network_forward


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    report: RunReport
    eval_loss: float
    eval_accuracy: Optional[float]
    # live stage models, for callers that inspect final parameters directly
    stages: Optional[list] = None

    @property
    def final_loss(self) -> float:
        return self.report.losses[-1]

    @property
    def last_epoch_loss(self) -> float:
        steps = self.config.steps_per_epoch
        tail = self.report.losses[-steps:]
        return sum(tail) / len(tail)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    return generate_dataset(
        d.kind,
        d.n_samples,
        d.seed,
        input_dim=d.input_dim,
        target_dim=d.target_dim,
        n_classes=d.n_classes,
        noise=d.noise,
    )


def run_experiment(cfg: ExperimentConfig, seed_override: Optional[int] = None) -> RunResult:
    seed = cfg.seed if seed_override is None else seed_override
    dataset = build_dataset(cfg)
    data = BatchStream(dataset, cfg.training.batch_size)

    layers = build_layers(cfg.model.layer_dims, cfg.model.activations)
    stages = build_stages(layers, cfg.depth, RngStream(seed).substream("params"))
    rule = cfg.optimizer.to_rule()
    opts = [OptimizerState(rule, st.param_names) for st in stages]

    tl = build_timeline(
        cfg.strategy, cfg.depth, cfg.n_batches, micro_per_mini=cfg.schedule.micro_per_mini
    )
    report = execute(
        tl, stages, opts, cfg.strategy, data, dataset.loss_kind, cfg.lr_for_mb
    )
    report.seed = seed
    report.config_echo = cfg.model_dump(mode="json")

    pred = network_forward(stages, [st.params for st in stages], dataset.x_eval)
    eval_loss, _ = loss_and_grad(pred, dataset.y_eval, dataset.loss_kind)
    eval_accuracy = None
    if dataset.loss_kind == "softmax_xent":
        hits = np.argmax(pred.a, axis=1) == np.argmax(dataset.y_eval.a, axis=1)
        eval_accuracy = float(np.mean(hits))
    return RunResult(cfg, seed, report, eval_loss, eval_accuracy, stages=stages)


# --- compare ---------------------------------------------------------------

COMPARE_COLUMNS = (
    "strategy",
    "final_loss",
    "last_epoch_loss",
    "eval_loss",
    "eval_accuracy",
    "inconsistent_total",
    "mean_staleness",
    "memory_peaks",
    "bubble_overall",
    "bubble_steady",
    "makespan_unit",
)


def compare_experiments(configs: list[ExperimentConfig]) -> list[dict]:
    """Run several configs that differ in strategy over one task and model.

    Dataset, model, seed, and training settings must match across configs so
    row differences are attributable to the strategy alone.
    """
    if len(configs) < 2:
        raise ConfigError("compare needs at least 2 configs")
    base = configs[0]
    for i, cfg in enumerate(configs[1:], start=1):
        for field in ("dataset", "model", "training"):
            if getattr(cfg, field) != getattr(base, field):
                raise ConfigError(
                    f"configs[{i}].{field}: compare requires identical {field} "
                    f"settings across configs"
                )
        if cfg.seed != base.seed:
            raise ConfigError(
                f"configs[{i}].seed: compare requires one shared seed, "
                f"got {cfg.seed} vs {base.seed}"
            )
    rows = []
    for cfg in configs:
        res = run_experiment(cfg)
        summary = staleness_and_inconsistency(res.report)
        rows.append(
            {
                "strategy": cfg.strategy,
                "final_loss": res.final_loss,
                "last_epoch_loss": res.last_epoch_loss,
                "eval_loss": res.eval_loss,
                "eval_accuracy": res.eval_accuracy,
                "inconsistent_total": summary["inconsistent_total"],
                "mean_staleness": summary["mean_staleness"],
                "memory_peaks": memory_peaks(res.report),
                "bubble_overall": res.report.bubble_overall,
                "bubble_steady": res.report.bubble_steady,
                "makespan_unit": res.report.makespan_unit,
            }
        )
    return rows


# --- timeline --------------------------------------------------------------


def timeline_report(cfg: ExperimentConfig) -> dict:
    tl = build_timeline(
        cfg.strategy, cfg.depth, cfg.n_batches, micro_per_mini=cfg.schedule.micro_per_mini
    )
    steady = steady_state_window(tl)
    return {
        "timeline": timeline_json_obj(tl),
        "stats": {
            "horizon": tl.horizon,
            "events": len(tl.events),
            "bubble_overall": str(bubble_ratio(tl)),
            "bubble_steady": str(bubble_ratio(tl, *steady)) if steady else None,
            "steady_window": list(steady) if steady else None,
            "makespan_unit": makespan(tl),
        },
    }


# --- sweep -----------------------------------------------------------------

SWEEP_AXES = (
    "seed",
    "depth",
    "strategy",
    "lr",
    "batch_size",
    "n_epochs",
    "micro_per_mini",
    "noise",
    "momentum",
)

SWEEP_COLUMNS = (
    "axis",
    "value",
    "seed",
    "final_loss",
    "last_epoch_loss",
    "eval_loss",
    "eval_accuracy",
    "inconsistent_total",
    "mean_staleness",
    "bubble_overall",
    "makespan_unit",
)

SWEEP_SUMMARY_COLUMNS = (
    "axis",
    "value",
    "runs",
    "last_epoch_loss_mean",
    "last_epoch_loss_std",
    "eval_loss_mean",
    "eval_loss_std",
    "eval_accuracy_mean",
    "eval_accuracy_std",
)


def apply_axis(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Rebuild the config with one swept field changed, re-running validation."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    obj = base.model_dump(mode="json")
    if axis == "seed":
        obj["seed"] = value
    elif axis == "depth":
        obj["depth"] = value
    elif axis == "strategy":
        if value not in STRATEGY_SCHEDULE:
            raise ConfigError(f"unknown strategy {value!r}")
        obj["strategy"] = value
        obj["schedule"]["kind"] = STRATEGY_SCHEDULE[value]
        if STRATEGY_SCHEDULE[value] != "gpipe":
            obj["schedule"]["micro_per_mini"] = 1
    elif axis == "lr":
        obj["training"]["lr"] = value
    elif axis == "batch_size":
        obj["training"]["batch_size"] = value
    elif axis == "n_epochs":
        obj["training"]["n_epochs"] = value
    elif axis == "micro_per_mini":
        obj["schedule"]["micro_per_mini"] = value
    elif axis == "noise":
        obj["dataset"]["noise"] = value
    elif axis == "momentum":
        obj["optimizer"]["momentum"] = value
    return config_from_dict(obj)


def sweep_experiments(
    base: ExperimentConfig,
    axis: str,
    values: list,
    seeds: Optional[list[int]] = None,
) -> tuple[list[dict], list[dict]]:
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis == "seed" and seeds:
        raise ConfigError("axis 'seed' already enumerates seeds; drop --seeds")
    # None defers to each config's own seed, which the seed axis rewrites
    run_seeds: list[Optional[int]] = list(seeds) if seeds else [None]

    rows = []
    summary = []
    for value in values:
        cfg = apply_axis(base, axis, value)
        group = []
        for seed in run_seeds:
            res = run_experiment(cfg, seed_override=seed)
            info = staleness_and_inconsistency(res.report)
            row = {
                "axis": axis,
                "value": value,
                "seed": res.seed,
                "final_loss": res.final_loss,
                "last_epoch_loss": res.last_epoch_loss,
                "eval_loss": res.eval_loss,
                "eval_accuracy": res.eval_accuracy,
                "inconsistent_total": info["inconsistent_total"],
                "mean_staleness": info["mean_staleness"],
                "bubble_overall": res.report.bubble_overall,
                "makespan_unit": res.report.makespan_unit,
            }
            rows.append(row)
            group.append(row)
        accs = [r["eval_accuracy"] for r in group if r["eval_accuracy"] is not None]
        summary.append(
            {
                "axis": axis,
                "value": value,
                "runs": len(group),
                "last_epoch_loss_mean": statistics.fmean(r["last_epoch_loss"] for r in group),
                "last_epoch_loss_std": statistics.pstdev(r["last_epoch_loss"] for r in group),
                "eval_loss_mean": statistics.fmean(r["eval_loss"] for r in group),
                "eval_loss_std": statistics.pstdev(r["eval_loss"] for r in group),
                "eval_accuracy_mean": statistics.fmean(accs) if accs else None,
                "eval_accuracy_std": statistics.pstdev(accs) if accs else None,
            }
        )
    return rows, summary


# --- file output -----------------------------------------------------------

LOSS_CSV_HEADER = "mb,epoch,loss"
VERSIONS_CSV_HEADER = (
    "mb,micro,stage,forward_version,predicted,prediction_target,"
    "backward_version,live_backward_version,staleness,inconsistent"
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "|".join(str(x) for x in v)
    return str(v)


def write_csv_file(path: Path, columns, rows: list[dict]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_json_file(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def loss_rows(result: RunResult) -> list[dict]:
    steps = result.config.steps_per_epoch
    return [
        {"mb": mb, "epoch": (mb - 1) // steps + 1, "loss": loss}
        for mb, loss in enumerate(result.report.losses, start=1)
    ]


def version_rows(result: RunResult) -> list[dict]:
    recs = sorted(result.report.records, key=lambda r: (r.mb, r.micro, r.stage))
    return [r.to_dict() for r in recs]


def run_report_obj(result: RunResult) -> dict:
    rep = result.report
    info = staleness_and_inconsistency(rep)
    return {
        "config": result.config.model_dump(mode="json"),
        "config_hash": config_hash(result.config),
        "seed": result.seed,
        "strategy": rep.strategy,
        "schedule": rep.timeline_kind,
        "depth": rep.depth,
        "n_batches": rep.n_batches,
        "micro_per_mini": rep.micro_per_mini,
        "final_loss": result.final_loss,
        "last_epoch_loss": result.last_epoch_loss,
        "eval_loss": result.eval_loss,
        "eval_accuracy": result.eval_accuracy,
        "inconsistent_total": info["inconsistent_total"],
        "mean_staleness": info["mean_staleness"],
        "per_stage": info["per_stage"],
        "memory_peaks": memory_peaks(rep),
        "activation_stash_peaks": rep.stash_peaks,
        "final_versions": rep.final_versions,
        "params_checksum": rep.params_checksum,
        "bubble_overall": rep.bubble_overall,
        "bubble_steady": rep.bubble_steady,
        "steady_window": list(rep.steady_window) if rep.steady_window else None,
        "makespan_unit": rep.makespan_unit,
    }


def write_run_outputs(result: RunResult, out_root: Path, fmt: str = "csv") -> Path:
    out_dir = out_root / config_hash(result.config)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json_file(out_dir / "report.json", run_report_obj(result))
    losses = loss_rows(result)
    versions = version_rows(result)
    if fmt == "json":
        write_json_file(out_dir / "losses.json", losses)
        write_json_file(out_dir / "versions.json", versions)
    else:
        write_csv_file(out_dir / "losses.csv", LOSS_CSV_HEADER.split(","), losses)
        write_csv_file(out_dir / "versions.csv", VERSIONS_CSV_HEADER.split(","), versions)
    return out_dir


def group_hash(configs: list[ExperimentConfig], extra: str = "") -> str:
    h = hashlib.sha256()
    for cfg in configs:
        h.update(canonical_json(cfg).encode())
    h.update(extra.encode())
    return h.hexdigest()[:12]


def write_compare_outputs(
    configs: list[ExperimentConfig], rows: list[dict], out_root: Path, fmt: str = "csv"
) -> Path:
    out_dir = out_root / f"compare-{group_hash(configs)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        write_json_file(out_dir / "compare.json", rows)
    else:
        write_csv_file(out_dir / "compare.csv", COMPARE_COLUMNS, rows)
    return out_dir


def write_timeline_outputs(
    cfg: ExperimentConfig, rep: dict, out_root: Path, fmt: str = "csv"
) -> Path:
    out_dir = out_root / f"timeline-{config_hash(cfg)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        write_json_file(out_dir / "timeline.json", rep["timeline"])
    else:
        cols = ("slot", "stage", "kind", "mb", "micro")
        write_csv_file(out_dir / "timeline.csv", cols, rep["timeline"]["events"])
    write_json_file(out_dir / "bubble.json", rep["stats"])
    return out_dir


def write_sweep_outputs(
    base: ExperimentConfig,
    axis: str,
    rows: list[dict],
    summary: list[dict],
    out_root: Path,
    fmt: str = "csv",
) -> Path:
    out_dir = out_root / f"sweep-{axis}-{group_hash([base], extra=axis)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        write_json_file(out_dir / "sweep.json", rows)
        write_json_file(out_dir / "sweep_summary.json", summary)
    else:
        write_csv_file(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
        write_csv_file(out_dir / "sweep_summary.csv", SWEEP_SUMMARY_COLUMNS, summary)
    return out_dir
