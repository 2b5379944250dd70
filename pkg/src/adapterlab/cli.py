"""Command-line front end: pretrain, train, eval, ablate, sweep, budget, tradeoff.

All analysis output is CSV. Exit codes: 0 success, 1 input error, 2 numeric
failure. The optional ``--config`` JSON mirrors the ModelConfig /
AdapterConfig / TrainConfig fields::

    {
      "model":    {"num_layers": 2, "hidden_size": 32, ...},
      "adapter":  {"size": 4, "init_std": 0.01, "nonlinearity": "relu"},
      "train":    {"peak_lr": 0.005, "epochs": 60, "batch_size": 32, "seed": 0},
      "pretrain": {"total_steps": 400, "peak_lr": 0.01, "corpus_sequences": 512,
                   "corpus_length": 12, "mask_rate": 0.15},
      "task":     {"seed": 0, "sizes": [384, 128, 128]}
    }
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import analysis
from .adapters import AdapterConfig
from .analysis import (
    DESK_ADAPTER_SIZES,
    DESK_INIT_STDS,
    DESK_LEARNING_RATES,
    PAPER_ADAPTER_SIZES,
    PAPER_INIT_STDS,
    PAPER_LEARNING_RATES,
    PAPER_TOP_K,
    AblationSpec,
    ablation_heatmap,
    param_budget,
    tradeoff_report,
    tradeoff_to_csv,
)
from .checkpoint import load_registry, save_registry
from .errors import InputError, NumericError
from .model import ModelConfig, mlm_pretrain
from .optim import TrainConfig, epochs_to_steps
from .registry import (
    AdapterTuning,
    FullFineTune,
    LayerNormOnly,
    Registry,
    VariableFineTune,
    strategy_to_dict,
)
from .tasks import KINDS, make_task, synthetic_corpus
from .training import evaluate, rerun_best_of

DESK_MODEL = {
    "num_layers": 2,
    "hidden_size": 32,
    "num_heads": 2,
    "ffn_size": 64,
    "vocab_size": 16,
    "max_seq_len": 16,
}
DESK_ADAPTER = {"size": 4, "init_std": 1e-2, "nonlinearity": "relu"}
DESK_TRAIN = {"peak_lr": 3e-3, "epochs": 80, "warmup_fraction": 0.1, "batch_size": 32, "seed": 0}
DESK_PRETRAIN = {
    "total_steps": 400,
    "peak_lr": 1e-2,
    "batch_size": 32,
    "corpus_sequences": 512,
    "corpus_length": 12,
    "mask_rate": 0.15,
    "seed": 0,
}
DESK_TASK = {"seed": 0, "sizes": [384, 128, 128]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); bad usage is an input error
        raise InputError(message)


def _load_settings(path: str | None) -> dict:
    settings = {
        "model": dict(DESK_MODEL),
        "adapter": dict(DESK_ADAPTER),
        "train": dict(DESK_TRAIN),
        "pretrain": dict(DESK_PRETRAIN),
        "task": dict(DESK_TASK),
    }
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise InputError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
        for section, values in loaded.items():
            if section not in settings:
                raise InputError(f"unknown config section {section!r}")
            settings[section].update(values)
    return settings


def _model_config(settings) -> ModelConfig:
    return ModelConfig(**settings["model"])


def _adapter_config(settings) -> AdapterConfig:
    return AdapterConfig(**settings["adapter"])


def _train_config(settings, train_size: int, seed: int | None) -> TrainConfig:
    raw = dict(settings["train"])
    epochs = raw.pop("epochs", None)
    if "total_steps" not in raw:
        if epochs is None:
            raise InputError("train config needs either epochs or total_steps")
        raw["total_steps"] = epochs_to_steps(epochs, train_size, raw.get("batch_size", 32))
    if seed is not None:
        raw["seed"] = seed
    return TrainConfig(**raw)


def _make_task(settings, kind: str):
    if kind not in KINDS:
        raise InputError(f"unknown task {kind!r}; expected one of {KINDS}")
    task_cfg = settings["task"]
    return make_task(kind, seed=task_cfg["seed"], sizes=tuple(task_cfg["sizes"]))


def _task_from_metadata(artifact):
    spec = artifact.metadata.get("task")
    if not spec:
        raise InputError(
            f"task {artifact.task_id!r} carries no task-generation metadata; "
            "it was not trained through this CLI"
        )
    return make_task(
        spec["kind"],
        seed=spec["seed"],
        sizes=tuple(spec["sizes"]),
        vocab=tuple(spec["vocab"]),
        seq_len=spec["seq_len"],
    )


def _parse_strategy(text: str, settings):
    if text == "adapter":
        return AdapterTuning(_adapter_config(settings))
    if text == "full":
        return FullFineTune()
    if text == "layernorm":
        return LayerNormOnly()
    if text.startswith("topk:"):
        try:
            return VariableFineTune(int(text.split(":", 1)[1]))
        except ValueError as exc:
            raise InputError(f"bad top-k strategy {text!r}; use topk:<n>") from exc
    raise InputError(f"unknown strategy {text!r}; use adapter|full|layernorm|topk:<n>")


def _open_registry(path: str):
    if path is None:
        raise InputError("--registry is required for this command")
    return load_registry(Path(path))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_pretrain(args) -> int:
    settings = _load_settings(args.config)
    config = _model_config(settings)
    pre = settings["pretrain"]
    seed = args.seed if args.seed is not None else pre["seed"]
    corpus = synthetic_corpus(config, pre["corpus_sequences"], pre["corpus_length"], seed)
    train_config = TrainConfig(
        peak_lr=pre["peak_lr"],
        total_steps=pre["total_steps"],
        batch_size=pre["batch_size"],
        seed=seed,
    )
    result = mlm_pretrain(corpus, config, train_config, mask_rate=pre["mask_rate"])
    save_registry(Registry(result.base), Path(args.registry))
    print(f"pretrained base saved to {args.registry}")
    print(f"masked-token loss: first={result.losses[0]:.4f} last={result.losses[-1]:.4f}")
    return 0


def cmd_train(args) -> int:
    settings = _load_settings(args.config)
    registry = _open_registry(args.registry)
    task = _make_task(settings, args.task)
    strategy = _parse_strategy(args.strategy, settings)
    config = _train_config(settings, len(task.train), args.seed)
    task_id = args.task_id or args.task

    result = rerun_best_of(args.runs, registry.base, task, strategy, config, task_id=task_id)
    result.artifact.task_id = task_id
    registry.adopt_task(result.artifact)
    save_registry(registry, Path(args.registry))

    for seed, history in sorted(result.histories.items()):
        print(f"run seed={seed}: val_accuracy={history.best_val_accuracy():.4f}")
    for seed, reason in sorted(result.failures.items()):
        print(f"run seed={seed}: failed ({reason})")
    print(f"best: seed={result.seed} val_accuracy={result.val_accuracy:.4f}")
    print(f"strategy: {strategy_to_dict(strategy)}")
    test_accuracy = evaluate(registry.activate(task_id), task.test)
    print(f"test_accuracy={test_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    registry = _open_registry(args.registry)
    view = registry.activate(args.task_id)
    task = _task_from_metadata(registry.tasks[args.task_id])
    accuracy = evaluate(view, task.split(args.split))
    print(f"{args.task_id} {args.split}_accuracy={accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    registry = _open_registry(args.registry)
    view = registry.activate(args.task_id)
    task = _task_from_metadata(registry.tasks[args.task_id])
    split = task.split(args.split)

    if args.heatmap:
        matrix = ablation_heatmap(view, split, revert_layernorm=args.revert_layernorm)
        rows = [
            (i, j, matrix[i, j])
            for i in range(matrix.shape[0])
            for j in range(matrix.shape[1])
        ]
    else:
        if args.first is None or args.last is None:
            raise InputError("provide --first and --last, or --heatmap")
        spec = AblationSpec(args.first, args.last, args.revert_layernorm)
        rows = [(args.first, args.last, analysis.ablate_span(view, spec, split))]

    out = _csv_writer(args.out)
    out.writerow(("first_layer", "last_layer", "accuracy_delta_points"))
    for first, last, delta in rows:
        out.writerow((first, last, repr(delta)))
    _close_csv(args.out)
    for first, last, delta in rows:
        print(f"ablate [{first}, {last}]: delta={delta:+.4f}")
    return 0


_csv_handles: dict[str, object] = {}


def _csv_writer(out_path: str | None):
    if out_path is None:
        return csv.writer(sys.stdout, lineterminator="\n")
    handle = open(Path(out_path), "w", newline="", encoding="utf-8")
    _csv_handles[out_path] = handle
    return csv.writer(handle, lineterminator="\n")


def _close_csv(out_path: str | None) -> None:
    handle = _csv_handles.pop(out_path, None)
    if handle is not None:
        handle.close()


def cmd_sweep(args) -> int:
    settings = _load_settings(args.config)
    registry = _open_registry(args.registry)
    base = registry.base
    task = _make_task(settings, args.task)
    config = _train_config(settings, len(task.train), args.seed)
    adapter = _adapter_config(settings)

    if args.mode == "init":
        grid = PAPER_INIT_STDS if args.paper_grid else DESK_INIT_STDS
        report = analysis.sweep_init_scale(
            base, task, grid, config, adapter_size=adapter.size,
            nonlinearity=adapter.nonlinearity, runs=args.runs,
        )
    elif args.mode == "size":
        grid = PAPER_ADAPTER_SIZES if args.paper_grid else DESK_ADAPTER_SIZES
        grid = tuple(s for s in grid if s <= base.config.hidden_size)
        report = analysis.sweep_adapter_size(
            base, task, grid, config, init_std=adapter.init_std,
            nonlinearity=adapter.nonlinearity, runs=args.runs,
        )
    elif args.mode == "topk":
        if args.paper_grid:
            grid = tuple(n for n in PAPER_TOP_K if n <= base.config.num_layers)
        else:
            grid = tuple(range(base.config.num_layers + 1))
        report = analysis.sweep_top_k(base, task, grid, config, runs=args.runs)
    elif args.mode == "lr":
        grid = PAPER_LEARNING_RATES if args.paper_grid else DESK_LEARNING_RATES
        report = analysis.sweep_learning_rate(
            base, task, grid, config, strategy=AdapterTuning(adapter), runs=args.runs,
        )
    else:
        raise InputError(f"unknown sweep mode {args.mode!r}")

    report.to_csv(Path(args.out))
    print(f"sweep {args.mode}: {len(report.rows)} rows written to {args.out}")
    return 0


def cmd_budget(args) -> int:
    settings = _load_settings(args.config)
    config = _model_config(settings)
    strategy = _parse_strategy(args.strategy, settings)
    if args.rho is not None:
        multiplier = (
            float(args.tasks) if isinstance(strategy, FullFineTune) and args.tasks >= 1
            else analysis.budget_multiplier(args.tasks, args.rho)
        )
    else:
        multiplier = param_budget(args.tasks, strategy, config)
    out = _csv_writer(args.out)
    out.writerow(("strategy", "num_tasks", "total_size_multiplier"))
    out.writerow((args.strategy, args.tasks, repr(multiplier)))
    _close_csv(args.out)
    print(f"{args.strategy} x {args.tasks} tasks -> {multiplier:.3f}x total parameters")
    return 0


def cmd_tradeoff(args) -> int:
    settings = _load_settings(args.config)
    registry = _open_registry(args.registry)
    task_cfg = settings["task"]
    tasks = {
        kind: make_task(kind, seed=task_cfg["seed"], sizes=tuple(task_cfg["sizes"]))
        for kind in KINDS
    }
    any_task = next(iter(tasks.values()))
    config = _train_config(settings, len(any_task.train), args.seed)
    sizes = PAPER_ADAPTER_SIZES if args.paper_grid else DESK_ADAPTER_SIZES
    sizes = tuple(s for s in sizes if s <= registry.base.config.hidden_size)
    rows = tradeoff_report(
        registry.base, tasks, config, adapter_sizes=sizes, runs=args.runs,
        init_std=_adapter_config(settings).init_std,
    )
    tradeoff_to_csv(rows, registry.base.config, tuple(tasks), Path(args.out))
    print(f"tradeoff: {len(rows)} rows written to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="adapterlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, registry=True, runs=False, out=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if registry:
            p.add_argument("--registry", required=True, help="registry directory")
        if runs:
            p.add_argument("--runs", type=int, default=1, help="reruns per setting (best-of)")
        if out:
            p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("pretrain", help="MLM-pretrain a base model on a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a task against the registry's frozen base")
    common(p, runs=True)
    p.add_argument("--task", required=True, choices=KINDS)
    p.add_argument("--strategy", default="adapter", help="adapter|full|layernorm|topk:<n>")
    p.add_argument("--task-id", help="registry id (defaults to the task kind)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a stored task artifact")
    common(p)
    p.add_argument("--task-id", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="replace trained adapters by identities and re-evaluate")
    common(p, out=True)
    p.add_argument("--task-id", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.add_argument("--first", type=int, help="first ablated layer (inclusive)")
    p.add_argument("--last", type=int, help="last ablated layer (inclusive)")
    p.add_argument("--heatmap", action="store_true", help="full span-by-span matrix")
    p.add_argument("--revert-layernorm", action="store_true",
                   help="also restore the span's layer norms to pretrained values")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid sweeps emitting a CSV report")
    p.add_argument("mode", choices=("size", "topk", "init", "lr"))
    common(p, runs=True)
    p.add_argument("--task", required=True, choices=KINDS)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--paper-grid", action="store_true", help="use the paper-scale grids")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("budget", help="total-storage multiplier for N tasks")
    common(p, registry=False, out=True)
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--strategy", default="adapter")
    p.add_argument("--rho", type=float, help="override the per-task trained fraction")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("tradeoff", help="accuracy vs trained parameters with percentile bands")
    common(p, runs=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--paper-grid", action="store_true")
    p.set_defaults(func=cmd_tradeoff)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
