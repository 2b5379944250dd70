"""adapterlab: a desk-scale laboratory for parameter-efficient transfer.

A minimal Transformer encoder on a hand-built reverse-mode autodiff tape,
bottleneck adapter modules with near-identity initialization, competing
tuning strategies over one frozen shared base, a multi-task registry with
perfect task memory, and sweep/ablation drivers that emit CSV reports.
"""

from .adapters import (
    AdapterConfig,
    AdapterParameters,
    LayerAdapterPair,
    adapter_forward,
    adapter_param_count,
    attach_adapters,
    init_adapter,
    layernorm_param_count,
)
from .analysis import (
    AblationSpec,
    SweepReport,
    SweepRow,
    ablate_span,
    ablation_heatmap,
    budget_multiplier,
    normalize_and_percentiles,
    normalize_scores,
    param_budget,
    percentile_bands,
    sweep_adapter_size,
    sweep_init_scale,
    sweep_learning_rate,
    sweep_top_k,
    tradeoff_report,
)
from .checkpoint import (
    load_artifact,
    load_base,
    load_registry,
    save_artifact,
    save_base,
    save_registry,
)
from .errors import (
    AdapterLabError,
    CheckpointError,
    ContractError,
    DimensionError,
    InputError,
    NumericError,
)
from .model import (
    CLS_TOKEN,
    MASK_TOKEN,
    BaseParameters,
    ModelConfig,
    classify,
    encoder_forward,
    mlm_pretrain,
    parameter_count,
    parameter_shapes,
)
from .optim import Adam, TrainConfig, epochs_to_steps, lr_at
from .registry import (
    AdapterTuning,
    FullFineTune,
    LayerNormOnly,
    ModelView,
    ParameterPartition,
    Registry,
    TaskArtifact,
    VariableFineTune,
    trainable_partition,
    trained_fraction,
    trained_parameter_count,
)
from .tasks import SyntheticTask, make_task, synthetic_corpus
from .tensor import Tensor, backward, no_grad
from .training import MetricHistory, evaluate, rerun_best_of, train_task

__version__ = "0.1.0"
