"""The task training loop: seeded shuffling, best-snapshot selection, reruns.

One run is single-worker and fully deterministic: (task seed, init seed,
train seed) fix the metric history bit-for-bit. ``rerun_best_of`` launches
independent runs with distinct seeds and keeps the winner by validation
accuracy, excluding runs that abort with a numeric failure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import InputError, NumericError
from .model import BaseParameters
from .optim import Adam, TrainConfig, lr_at
from .registry import ModelView, Registry, TaskArtifact, TuningStrategy
from .tasks import Split, SyntheticTask


def evaluate(view: ModelView, split: Split) -> float:
    """Fraction of argmax-correct predictions; logit ties go to the lowest class."""
    if len(split) == 0:
        raise InputError("cannot evaluate on an empty split")
    with T.no_grad():
        logits = view.logits(split.tokens)
    predictions = np.argmax(logits.data, axis=1)
    return float(np.mean(predictions == split.labels))


@dataclass
class MetricHistory:
    """Per-step schedule/loss trace with validation accuracy at epoch ends."""

    run_id: str
    rows: list[tuple[int, float, float, int, float | None]] = field(default_factory=list)

    HEADER = ("run_id", "step", "lr", "train_loss", "epoch", "val_accuracy")

    def record(self, step: int, lr: float, train_loss: float, epoch: int,
               val_accuracy: float | None = None) -> None:
        self.rows.append((step, lr, train_loss, epoch, val_accuracy))

    def val_accuracies(self) -> list[float]:
        return [r[4] for r in self.rows if r[4] is not None]

    def train_losses(self) -> list[float]:
        return [r[2] for r in self.rows]

    def best_val_accuracy(self) -> float:
        return max(self.val_accuracies())

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for step, lr, loss, epoch, acc in self.rows:
                writer.writerow(
                    [self.run_id, step, repr(lr), repr(loss), epoch,
                     "" if acc is None else repr(acc)]
                )


def train_task(
    registry: Registry,
    task_id: str,
    task: SyntheticTask,
    config: TrainConfig,
    eval_fn: Callable[[ModelView, Split], float] = evaluate,
) -> tuple[TaskArtifact, MetricHistory]:
    """Run the loop on a registered task and keep the best-validation snapshot.

    Per epoch the training set is reshuffled by the seeded RNG; validation
    accuracy is measured at each epoch end and the parameter snapshot with
    the highest value is restored into the artifact before returning, so a
    run whose last epochs regress still hands back its best model.
    """
    if task_id not in registry.tasks:
        raise InputError(f"task id {task_id!r} is not registered")
    if len(task.train) == 0:
        raise InputError("training split is empty")
    artifact = registry.tasks[task_id]
    view = registry.activate(task_id)
    optimizer = Adam(artifact.trainable_tensors(), config, frozen=registry.base.tensors())
    rng = np.random.default_rng(config.seed)

    train = task.train
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    history = MetricHistory(run_id=task_id)
    best_accuracy = -1.0
    best_values: dict[str, np.ndarray] | None = None
    best_epoch = -1
    order = np.empty(0, dtype=np.intp)

    T.clear_tape()
    for step in range(config.total_steps):
        epoch, offset = divmod(step, steps_per_epoch)
        if offset == 0:
            order = rng.permutation(len(train))
        rows = order[offset * config.batch_size : (offset + 1) * config.batch_size]
        lr = lr_at(step, config)
        try:
            logits = view.logits(train.tokens[rows])
            loss = T.softmax_cross_entropy(logits, train.labels[rows])
            T.backward(loss)
        except NumericError as exc:
            T.clear_tape()
            raise NumericError(f"training aborted at step {step}: {exc}") from exc
        optimizer.step(lr)
        optimizer.zero_grads()

        epoch_end = offset == steps_per_epoch - 1 or step == config.total_steps - 1
        accuracy = None
        if epoch_end:
            try:
                accuracy = eval_fn(view, task.validation)
            except NumericError as exc:
                raise NumericError(f"training aborted at step {step}: {exc}") from exc
            if accuracy > best_accuracy:
                best_accuracy = accuracy
                best_values = artifact.value_copy()
                best_epoch = epoch
        history.record(step, lr, loss.item(), epoch, accuracy)

    if best_values is not None:
        artifact.load_values(best_values)
    artifact.metadata.update(
        {
            "seed": config.seed,
            "hyperparameters": config.to_dict(),
            "task": task.to_dict(),
            "metrics": {
                "best_val_accuracy": best_accuracy,
                "best_epoch": best_epoch,
                "final_train_loss": history.train_losses()[-1],
            },
        }
    )
    return artifact, history


@dataclass
class BestOfResult:
    artifact: TaskArtifact
    seed: int
    val_accuracy: float
    histories: dict[int, MetricHistory]
    failures: dict[int, str]


def rerun_best_of(
    k: int,
    base: BaseParameters,
    task: SyntheticTask,
    strategy: TuningStrategy,
    config: TrainConfig,
    seeds: list[int] | None = None,
    task_id: str = "best-of",
    eval_fn: Callable[[ModelView, Split], float] = evaluate,
) -> BestOfResult:
    """Train ``k`` independent runs (distinct seeds, fresh inits) and keep the
    best validation accuracy; ties break toward the lowest seed.

    Runs that abort with a numeric failure are excluded from selection; if
    every run fails the failure propagates.
    """
    if k < 1:
        raise InputError(f"need at least one run, got k={k}")
    if seeds is None:
        seeds = [config.seed + i for i in range(k)]
    if len(seeds) != k or len(set(seeds)) != k:
        raise InputError(f"need {k} distinct seeds, got {seeds}")

    best: tuple[float, int] | None = None
    best_artifact: TaskArtifact | None = None
    histories: dict[int, MetricHistory] = {}
    failures: dict[int, str] = {}
    for seed in sorted(seeds):
        scratch = Registry(base)
        scratch.add_task(task_id, strategy, num_classes=task.num_classes, init_seed=seed)
        try:
            artifact, history = train_task(
                scratch, task_id, task, replace(config, seed=seed), eval_fn=eval_fn
            )
        except NumericError as exc:
            failures[seed] = str(exc)
            continue
        accuracy = history.best_val_accuracy()
        histories[seed] = history
        if best is None or accuracy > best[0]:
            best = (accuracy, seed)
            best_artifact = artifact
    if best is None or best_artifact is None:
        raise NumericError(
            f"all {k} runs failed numerically: " + "; ".join(failures.values())
        )
    return BestOfResult(
        artifact=best_artifact,
        seed=best[1],
        val_accuracy=best[0],
        histories=histories,
        failures=failures,
    )
