"""Ablations, hyperparameter sweeps, percentile aggregation, and budgets.

These drivers reproduce the experimental methodology at desk scale:
span ablations without retraining, grid sweeps over adapter size /
initialization scale / top-k layers / learning rate, score normalization
against the full fine-tuning reference with percentile bands, and
total-storage multipliers for N tasks. Reports are emitted as CSV
(comma-separated, header row, '.' decimals, LF endings, UTF-8) with
deterministic row order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import AdapterConfig
from .errors import InputError, NumericError
from .model import BaseParameters, ModelConfig, parameter_count
from .optim import TrainConfig
from .registry import (
    AblationSpec,
    AdapterTuning,
    FullFineTune,
    LayerNormOnly,
    ModelView,
    TuningStrategy,
    VariableFineTune,
    trained_fraction,
    trained_parameter_count,
)
from .tasks import Split, SyntheticTask
from .training import evaluate, rerun_best_of

# Desk-scale default grids; the paper-scale grids sit behind a flag.
DESK_INIT_STDS = (1e-4, 1e-2, 1.0)
DESK_ADAPTER_SIZES = (2, 4, 8)
DESK_LEARNING_RATES = (1e-3, 3e-3, 1e-2)
PAPER_INIT_STDS = tuple(10.0**e for e in range(-7, 1))
PAPER_ADAPTER_SIZES = (8, 64, 256)
PAPER_TOP_K = (1, 2, 3, 5, 7, 9, 11, 12)
PAPER_LEARNING_RATES = (2e-5, 1e-4, 1e-3)


# ---------------------------------------------------------------------------
# Span ablation


def ablate_span(view: ModelView, spec: AblationSpec, split: Split) -> float:
    """Accuracy change from replacing the span's trained adapters by identities.

    No retraining happens; the return value is accuracy(ablated) minus
    accuracy(full), so drops are negative. A pure function of (view, split).
    """
    if not isinstance(view.artifact.strategy, AdapterTuning):
        raise InputError("span ablation requires a model trained with adapter tuning")
    full = evaluate(view, split)
    ablated = evaluate(
        view.with_ablation(spec.first_layer, spec.last_layer, spec.revert_layernorm), split
    )
    return ablated - full


def ablation_heatmap(view: ModelView, split: Split, revert_layernorm: bool = False) -> np.ndarray:
    """Upper-triangular [L, L] matrix of span ablation deltas.

    Entry (i, j) with i <= j ablates layers i..j inclusive; the lower
    triangle is meaningless and set to 0 by convention. Deltas are reported
    in accuracy points (fractions), not relative percentages.
    """
    num_layers = view.config.num_layers
    matrix = np.zeros((num_layers, num_layers))
    for i in range(num_layers):
        for j in range(i, num_layers):
            matrix[i, j] = ablate_span(view, AblationSpec(i, j, revert_layernorm), split)
    return matrix


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    hyperparameters: dict
    trained_param_count: int
    trained_fraction: float
    metric: float
    seed: int

    def hyperparameters_text(self) -> str:
        return ";".join(f"{k}={v!r}" for k, v in sorted(self.hyperparameters.items()))


@dataclass
class SweepReport:
    config: ModelConfig
    task_ids: tuple[str, ...]
    rows: list[SweepRow]
    format_version: int = 1

    HEADER = ("strategy", "hyperparameters", "trained_param_count",
              "trained_fraction", "metric", "seed")

    def sorted_rows(self) -> list[SweepRow]:
        return sorted(self.rows, key=lambda r: (r.strategy, r.trained_param_count))

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# format_version={self.format_version}\n")
            geometry = ";".join(f"{k}={v}" for k, v in sorted(self.config.to_dict().items()))
            fh.write(f"# model={geometry}\n")
            fh.write(f"# tasks={','.join(self.task_ids)}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for row in self.sorted_rows():
                writer.writerow(
                    [row.strategy, row.hyperparameters_text(), row.trained_param_count,
                     repr(row.trained_fraction), repr(row.metric), row.seed]
                )


def _sweep_point(
    base: BaseParameters,
    task: SyntheticTask,
    strategy: TuningStrategy,
    config: TrainConfig,
    runs: int,
    hyperparameters: dict,
) -> SweepRow:
    """One grid point: best-of-``runs`` training. A point whose every run
    fails numerically (the model failed to train) records a NaN metric."""
    try:
        result = rerun_best_of(runs, base, task, strategy, config)
        metric, seed = result.val_accuracy, result.seed
    except NumericError:
        metric, seed = float("nan"), -1
    return SweepRow(
        strategy=strategy.name,
        hyperparameters=hyperparameters,
        trained_param_count=trained_parameter_count(strategy, base.config, task.num_classes),
        trained_fraction=trained_fraction(strategy, base.config, task.num_classes),
        metric=metric,
        seed=seed,
    )


def _require_grid(grid, label: str):
    values = tuple(grid)
    if not values:
        raise InputError(f"{label} grid is empty")
    return values


def sweep_init_scale(
    base: BaseParameters,
    task: SyntheticTask,
    sigmas,
    config: TrainConfig,
    adapter_size: int = 4,
    nonlinearity: str = "relu",
    runs: int = 1,
) -> SweepReport:
    """One adapter-tuning run set per initialization standard deviation."""
    sigmas = _require_grid(sigmas, "init-scale")
    rows = []
    for sigma in sigmas:
        strategy = AdapterTuning(AdapterConfig(adapter_size, init_std=sigma, nonlinearity=nonlinearity))
        rows.append(_sweep_point(base, task, strategy, config, runs,
                                 {"init_std": sigma, "adapter_size": adapter_size,
                                  "peak_lr": config.peak_lr}))
    return SweepReport(config=base.config, task_ids=(task.kind,), rows=rows)


def sweep_adapter_size(
    base: BaseParameters,
    task: SyntheticTask,
    sizes,
    config: TrainConfig,
    init_std: float = 1e-2,
    nonlinearity: str = "relu",
    runs: int = 1,
) -> SweepReport:
    sizes = _require_grid(sizes, "adapter-size")
    for size in sizes:
        if size > base.config.hidden_size:
            raise InputError(
                f"adapter size {size} exceeds hidden size {base.config.hidden_size}"
            )
    rows = []
    for size in sizes:
        strategy = AdapterTuning(AdapterConfig(size, init_std=init_std, nonlinearity=nonlinearity))
        rows.append(_sweep_point(base, task, strategy, config, runs,
                                 {"adapter_size": size, "init_std": init_std,
                                  "peak_lr": config.peak_lr}))
    return SweepReport(config=base.config, task_ids=(task.kind,), rows=rows)


def sweep_top_k(
    base: BaseParameters,
    task: SyntheticTask,
    layer_counts,
    config: TrainConfig,
    runs: int = 1,
) -> SweepReport:
    layer_counts = _require_grid(layer_counts, "top-k")
    rows = []
    for n in layer_counts:
        strategy = VariableFineTune(n)
        rows.append(_sweep_point(base, task, strategy, config, runs,
                                 {"num_top_layers": n, "peak_lr": config.peak_lr}))
    return SweepReport(config=base.config, task_ids=(task.kind,), rows=rows)


def sweep_learning_rate(
    base: BaseParameters,
    task: SyntheticTask,
    learning_rates,
    config: TrainConfig,
    strategy: TuningStrategy | None = None,
    runs: int = 1,
) -> SweepReport:
    learning_rates = _require_grid(learning_rates, "learning-rate")
    if strategy is None:
        strategy = AdapterTuning(AdapterConfig(4))
    rows = []
    for lr in learning_rates:
        point_config = replace(config, peak_lr=lr)
        rows.append(_sweep_point(base, task, strategy, point_config, runs,
                                 {"peak_lr": lr}))
    return SweepReport(config=base.config, task_ids=(task.kind,), rows=rows)


# ---------------------------------------------------------------------------
# Score normalization and percentile bands


def percentile_bands(values) -> tuple[float, float, float]:
    """(p20, p50, p80) by linear interpolation between closest ranks."""
    data = [float(v) for v in values]
    if not data:
        raise InputError("cannot take percentiles of an empty score set")
    data.sort()
    n = len(data)

    def pick(q: float) -> float:
        position = q / 100.0 * (n - 1)
        low = math.floor(position)
        high = math.ceil(position)
        return data[low] + (data[high] - data[low]) * (position - low)

    return pick(20.0), pick(50.0), pick(80.0)


def normalize_scores(scores: Mapping[str, float], reference: Mapping[str, float]) -> dict[str, float]:
    """Per-task score minus that task's full fine-tuning reference score."""
    normalized = {}
    for task_id, score in scores.items():
        if task_id not in reference:
            raise InputError(f"no full fine-tuning reference score for task {task_id!r}")
        normalized[task_id] = score - reference[task_id]
    return normalized


def normalize_and_percentiles(
    scores_by_method: Mapping[str, Mapping[str, float]],
    reference: Mapping[str, float],
) -> dict[str, tuple[float, float, float]]:
    """Normalized (p20, p50, p80) bands per method across tasks."""
    return {
        method: percentile_bands(normalize_scores(scores, reference).values())
        for method, scores in scores_by_method.items()
    }


# ---------------------------------------------------------------------------
# Parameter budgets


def budget_multiplier(num_tasks: int, fraction: float) -> float:
    """Total stored parameters for N parameter-efficient tasks over one base."""
    if num_tasks < 0:
        raise InputError(f"task count must be non-negative, got {num_tasks}")
    return 1.0 + num_tasks * fraction


def param_budget(
    num_tasks: int,
    strategy: TuningStrategy,
    config: ModelConfig,
    num_classes: int = 2,
) -> float:
    """Storage multiplier relative to the base model for ``num_tasks`` tasks.

    Full fine-tuning stores a whole model per task (N x); parameter-efficient
    strategies share the base and add a trained fraction per task (1 + N rho).
    """
    if num_tasks < 0:
        raise InputError(f"task count must be non-negative, got {num_tasks}")
    if isinstance(strategy, FullFineTune):
        return float(num_tasks) if num_tasks >= 1 else 1.0
    return budget_multiplier(num_tasks, trained_fraction(strategy, config, num_classes))


# ---------------------------------------------------------------------------
# Trade-off curves


@dataclass(frozen=True)
class TradeoffRow:
    method: str
    trained_param_count: int
    trained_fraction: float
    p20: float
    p50: float
    p80: float


def tradeoff_report(
    base: BaseParameters,
    tasks: Mapping[str, SyntheticTask],
    config: TrainConfig,
    adapter_sizes=DESK_ADAPTER_SIZES,
    layer_counts=None,
    include_layernorm: bool = True,
    runs: int = 1,
    init_std: float = 1e-2,
) -> list[TradeoffRow]:
    """Accuracy-vs-trained-parameters bands across tasks.

    Adapter tuning at several sizes is compared against top-k fine-tuning
    (and optionally layer-norm-only tuning); scores are normalized per task
    by the full fine-tuning reference before taking percentiles.
    """
    if not tasks:
        raise InputError("trade-off needs at least one task")
    if layer_counts is None:
        layer_counts = tuple(range(base.config.num_layers + 1))

    reference: dict[str, float] = {}
    for task_id, task in tasks.items():
        reference[task_id] = rerun_best_of(
            runs, base, task, FullFineTune(), config
        ).val_accuracy

    points: list[tuple[str, TuningStrategy]] = []
    for size in adapter_sizes:
        points.append((f"adapter(m={size})", AdapterTuning(AdapterConfig(size, init_std=init_std))))
    for n in layer_counts:
        points.append((f"top-{n}-layers", VariableFineTune(n)))
    if include_layernorm:
        points.append(("layernorm-only", LayerNormOnly()))

    rows = []
    for method, strategy in points:
        scores: dict[str, float] = {}
        for task_id, task in tasks.items():
            try:
                scores[task_id] = rerun_best_of(runs, base, task, strategy, config).val_accuracy
            except NumericError:
                scores[task_id] = float("nan")
        p20, p50, p80 = percentile_bands(normalize_scores(scores, reference).values())
        num_classes = next(iter(tasks.values())).num_classes
        rows.append(
            TradeoffRow(
                method=method,
                trained_param_count=trained_parameter_count(strategy, base.config, num_classes),
                trained_fraction=trained_fraction(strategy, base.config, num_classes),
                p20=p20,
                p50=p50,
                p80=p80,
            )
        )
    return sorted(rows, key=lambda r: (r.method, r.trained_param_count))


def tradeoff_to_csv(rows, config: ModelConfig, task_ids, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        geometry = ";".join(f"{k}={v}" for k, v in sorted(config.to_dict().items()))
        fh.write(f"# model={geometry}\n")
        fh.write(f"# tasks={','.join(task_ids)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "trained_param_count", "trained_fraction", "p20", "p50", "p80"))
        for row in rows:
            writer.writerow(
                [row.method, row.trained_param_count, repr(row.trained_fraction),
                 repr(row.p20), repr(row.p50), repr(row.p80)]
            )
