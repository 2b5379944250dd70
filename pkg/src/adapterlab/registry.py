"""Tuning strategies as parameter partitions, plus the multi-task store.

A strategy decides which named parameters are private to a task (trainable)
and which stay in the shared frozen base. Task artifacts own their trainable
tensors outright -- including full copies of any base parameter they tune --
so training one task can never disturb the base or another task: reactivating
a task reproduces its behavior exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .adapters import (
    AdapterConfig,
    AdapterParameters,
    LayerAdapterPair,
    init_adapter,
    zero_adapter,
)
from .errors import InputError
from .model import (
    BaseParameters,
    ModelConfig,
    classify,
    layer_norm_parameter_names,
    parameter_count,
    parameter_shapes,
)
from .tensor import Tensor

HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"
HEAD_INIT_STD = 0.02

_ADAPTER_FIELDS = ("w_down", "b_down", "w_up", "b_up")


@dataclass(frozen=True)
class FullFineTune:
    name = "full_finetune"


@dataclass(frozen=True)
class VariableFineTune:
    """Tune only the top ``num_top_layers`` encoder layers plus the head.

    With all layers selected this subsumes full fine-tuning, embedding block
    included, so the two strategies report identical trained fractions.
    """

    num_top_layers: int
    name = "variable_finetune"


@dataclass(frozen=True)
class LayerNormOnly:
    name = "layernorm_only"


@dataclass(frozen=True)
class AdapterTuning:
    adapter: AdapterConfig
    name = "adapter"


TuningStrategy = Union[FullFineTune, VariableFineTune, LayerNormOnly, AdapterTuning]


def strategy_to_dict(strategy: TuningStrategy) -> dict:
    if isinstance(strategy, AdapterTuning):
        return {
            "kind": strategy.name,
            "size": strategy.adapter.size,
            "init_std": strategy.adapter.init_std,
            "nonlinearity": strategy.adapter.nonlinearity,
        }
    if isinstance(strategy, VariableFineTune):
        return {"kind": strategy.name, "num_top_layers": strategy.num_top_layers}
    return {"kind": strategy.name}


def strategy_from_dict(data: dict) -> TuningStrategy:
    kind = data.get("kind")
    if kind == "adapter":
        return AdapterTuning(
            AdapterConfig(
                size=int(data["size"]),
                init_std=float(data["init_std"]),
                nonlinearity=str(data["nonlinearity"]),
            )
        )
    if kind == "variable_finetune":
        return VariableFineTune(int(data["num_top_layers"]))
    if kind == "full_finetune":
        return FullFineTune()
    if kind == "layernorm_only":
        return LayerNormOnly()
    raise InputError(f"unknown strategy kind: {kind!r}")


def adapter_parameter_shapes(config: ModelConfig, size: int) -> dict[str, tuple[int, ...]]:
    d = config.hidden_size
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(config.num_layers):
        for site in ("attn_adapter", "ffn_adapter"):
            p = f"layer{i}.{site}."
            shapes[p + "w_down"] = (d, size)
            shapes[p + "b_down"] = (size,)
            shapes[p + "w_up"] = (size, d)
            shapes[p + "b_up"] = (d,)
    return shapes


def head_parameter_shapes(config: ModelConfig, num_classes: int) -> dict[str, tuple[int, ...]]:
    return {HEAD_WEIGHT: (config.hidden_size, num_classes), HEAD_BIAS: (num_classes,)}


def model_layout(
    strategy: TuningStrategy, config: ModelConfig, num_classes: int = 2
) -> dict[str, tuple[int, ...]]:
    """Name -> shape over every parameter the strategy's model carries."""
    layout = dict(parameter_shapes(config))
    if isinstance(strategy, AdapterTuning):
        layout.update(adapter_parameter_shapes(config, strategy.adapter.size))
    layout.update(head_parameter_shapes(config, num_classes))
    return layout


@dataclass(frozen=True)
class ParameterPartition:
    """Disjoint split of all parameter names into trainable and frozen."""

    trainable: frozenset[str]
    frozen: frozenset[str]


def trainable_partition(
    strategy: TuningStrategy, config: ModelConfig, num_classes: int = 2
) -> ParameterPartition:
    """Which names train under a strategy. The head is trainable under all."""
    layout = model_layout(strategy, config, num_classes)
    names = set(layout)
    head = set(head_parameter_shapes(config, num_classes))

    if isinstance(strategy, FullFineTune):
        trainable = names
    elif isinstance(strategy, VariableFineTune):
        n = strategy.num_top_layers
        if not 0 <= n <= config.num_layers:
            raise InputError(
                f"num_top_layers {n} outside [0, {config.num_layers}] for this geometry"
            )
        if n == config.num_layers:
            trainable = names
        else:
            top = range(config.num_layers - n, config.num_layers)
            prefixes = tuple(f"layer{i}." for i in top)
            trainable = {m for m in names if m.startswith(prefixes)} | head
    elif isinstance(strategy, LayerNormOnly):
        trainable = set(layer_norm_parameter_names(config)) | head
    elif isinstance(strategy, AdapterTuning):
        adapter_names = set(adapter_parameter_shapes(config, strategy.adapter.size))
        trainable = adapter_names | set(layer_norm_parameter_names(config)) | head
    else:
        raise InputError(f"unknown strategy: {strategy!r}")
    return ParameterPartition(
        trainable=frozenset(trainable), frozen=frozenset(names - trainable)
    )


def _count(names, layout) -> int:
    return sum(int(np.prod(layout[n])) for n in names)


def trained_parameter_count(
    strategy: TuningStrategy, config: ModelConfig, num_classes: int = 2
) -> int:
    layout = model_layout(strategy, config, num_classes)
    return _count(trainable_partition(strategy, config, num_classes).trainable, layout)


def trained_fraction(
    strategy: TuningStrategy, config: ModelConfig, num_classes: int = 2
) -> float:
    """Trained parameters per task relative to the shared base's size."""
    return trained_parameter_count(strategy, config, num_classes) / parameter_count(config)


@dataclass
class TaskArtifact:
    """One task's private parameters and training metadata."""

    task_id: str
    strategy: TuningStrategy
    num_classes: int
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def trainable_tensors(self) -> dict[str, Tensor]:
        return dict(self.params)

    def value_copy(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, array in values.items():
            self.params[name].data[...] = array

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def _init_artifact_params(
    strategy: TuningStrategy,
    base: BaseParameters,
    num_classes: int,
    init_seed: int,
) -> dict[str, Tensor]:
    """Private tensors for a fresh task, in a deterministic draw order:
    adapters (layer-ascending, attention before ffn), head, then copies of
    any base parameters the strategy tunes."""
    config = base.config
    rng = np.random.default_rng(init_seed)
    params: dict[str, Tensor] = {}

    if isinstance(strategy, AdapterTuning):
        for i in range(config.num_layers):
            for site in ("attn_adapter", "ffn_adapter"):
                module = init_adapter(config.hidden_size, strategy.adapter, rng)
                for fname, tensor in zip(_ADAPTER_FIELDS, module.tensors()):
                    params[f"layer{i}.{site}.{fname}"] = tensor

    d = config.hidden_size
    params[HEAD_WEIGHT] = Tensor(
        T.truncated_normal(rng, (d, num_classes), HEAD_INIT_STD), requires_grad=True
    )
    params[HEAD_BIAS] = Tensor(np.zeros(num_classes), requires_grad=True)

    partition = trainable_partition(strategy, config, num_classes)
    for name in sorted(partition.trainable):
        if name in params:
            continue
        params[name] = Tensor(base[name].data.copy(), requires_grad=True)
    return params


@dataclass(frozen=True)
class AblationSpec:
    """Contiguous layer span whose adapters are replaced by exact identities.

    When ``revert_layernorm`` is set, the span's trained norm parameters are
    read from the pretrained base instead; a span containing layer 0 also
    reverts the embedding norm.
    """

    first_layer: int
    last_layer: int
    revert_layernorm: bool = False

    def covers(self, layer: int) -> bool:
        return self.first_layer <= layer <= self.last_layer

    def reverted_names(self, config: ModelConfig) -> frozenset[str]:
        if not self.revert_layernorm:
            return frozenset()
        names = set()
        for i in range(self.first_layer, self.last_layer + 1):
            for site in ("ln1", "ln2"):
                names.add(f"layer{i}.{site}.gamma")
                names.add(f"layer{i}.{site}.beta")
        if self.covers(0):
            names.add("embedding_ln.gamma")
            names.add("embedding_ln.beta")
        return frozenset(names)


class ModelView:
    """Composed read-only view of the frozen base plus one task's artifact."""

    def __init__(self, base: BaseParameters, artifact: TaskArtifact, ablation: AblationSpec | None = None):
        if ablation is not None:
            L = base.config.num_layers
            if not 0 <= ablation.first_layer <= ablation.last_layer < L:
                raise InputError(
                    f"ablation span [{ablation.first_layer}, {ablation.last_layer}] "
                    f"outside layer range [0, {L})"
                )
        self.base = base
        self.artifact = artifact
        self.ablation = ablation
        self._reverted = (
            ablation.reverted_names(base.config) if ablation is not None else frozenset()
        )

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def __getitem__(self, name: str) -> Tensor:
        if name in self._reverted:
            return self.base[name]
        tensor = self.artifact.params.get(name)
        return tensor if tensor is not None else self.base[name]

    def adapter_stack(self) -> list[LayerAdapterPair] | None:
        if not isinstance(self.artifact.strategy, AdapterTuning):
            return None
        config = self.config
        size = self.artifact.strategy.adapter.size
        stack = []
        for i in range(config.num_layers):
            if self.ablation is not None and self.ablation.covers(i):
                pair = LayerAdapterPair(
                    attention=zero_adapter(config.hidden_size, size),
                    ffn=zero_adapter(config.hidden_size, size),
                )
            else:
                pair = LayerAdapterPair(
                    attention=self._adapter_at(i, "attn_adapter"),
                    ffn=self._adapter_at(i, "ffn_adapter"),
                )
            stack.append(pair)
        return stack

    def _adapter_at(self, layer: int, site: str) -> AdapterParameters:
        p = f"layer{layer}.{site}."
        return AdapterParameters(*(self.artifact.params[p + f] for f in _ADAPTER_FIELDS))

    def adapter_nonlinearity(self) -> str:
        if isinstance(self.artifact.strategy, AdapterTuning):
            return self.artifact.strategy.adapter.nonlinearity
        return "relu"

    def logits(self, tokens: np.ndarray) -> Tensor:
        return classify(
            tokens,
            self,
            head_weight=self[HEAD_WEIGHT],
            head_bias=self[HEAD_BIAS],
            adapters=self.adapter_stack(),
            adapter_nonlinearity=self.adapter_nonlinearity(),
        )

    def with_ablation(self, first_layer: int, last_layer: int, revert_layernorm: bool = False) -> "ModelView":
        return ModelView(
            self.base,
            self.artifact,
            AblationSpec(first_layer, last_layer, revert_layernorm),
        )


class Registry:
    """Tasks over one shared frozen base; adding or training a task never
    mutates the base or any other task's stored values."""

    def __init__(self, base: BaseParameters):
        self.base = base
        self.tasks: dict[str, TaskArtifact] = {}

    def task_ids(self) -> tuple[str, ...]:
        return tuple(self.tasks)

    def add_task(
        self,
        task_id: str,
        strategy: TuningStrategy,
        num_classes: int = 2,
        init_seed: int = 0,
    ) -> TaskArtifact:
        if task_id in self.tasks:
            raise InputError(f"task id {task_id!r} already registered")
        artifact = TaskArtifact(
            task_id=task_id,
            strategy=strategy,
            num_classes=num_classes,
            params=_init_artifact_params(strategy, self.base, num_classes, init_seed),
            metadata={"init_seed": init_seed},
        )
        self.tasks[task_id] = artifact
        return artifact

    def adopt_task(self, artifact: TaskArtifact) -> TaskArtifact:
        """Register an artifact trained elsewhere (e.g. a best-of-k winner)."""
        if artifact.task_id in self.tasks:
            raise InputError(f"task id {artifact.task_id!r} already registered")
        self.tasks[artifact.task_id] = artifact
        return artifact

    def activate(self, task_id: str) -> ModelView:
        if task_id not in self.tasks:
            raise InputError(f"unknown task id {task_id!r}")
        return ModelView(self.base, self.tasks[task_id])
