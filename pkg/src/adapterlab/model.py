"""Post-norm Transformer encoder with a frozen-base / private-adapter split.

Each layer runs two sub-layers (multi-head attention, feed-forward). The
sub-layer output optionally passes through a bottleneck adapter, then the
skip connection is added and the sum fed directly into layer normalization:

    sub = SubLayer(x);  a = Adapter(sub) if adapters else sub;  y = LN(a + x)

Classification reads a linear head off the final hidden state of the
reserved first token. Pretraining minimizes masked-token cross-entropy on a
synthetic corpus; the masked-token output matrix is tied to the token
embedding (only its bias is a separate parameter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import LayerAdapterPair, adapter_forward
from .errors import ContractError, InputError
from .optim import Adam, TrainConfig, lr_at
from .tensor import Tensor

CLS_TOKEN = 0
MASK_TOKEN = 1
NUM_RESERVED_TOKENS = 2

LAYER_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Encoder geometry. The vocabulary includes the reserved CLS and MASK ids."""

    num_layers: int
    hidden_size: int
    num_heads: int
    ffn_size: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for field in ("num_layers", "hidden_size", "num_heads", "ffn_size"):
            if getattr(self, field) < 1:
                raise InputError(f"{field} must be positive, got {getattr(self, field)}")
        if self.hidden_size % self.num_heads != 0:
            raise InputError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size < NUM_RESERVED_TOKENS + 2:
            raise InputError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.max_seq_len < 2:
            raise InputError(f"max_seq_len must be >= 2, got {self.max_seq_len}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "ffn_size": self.ffn_size,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every base parameter, in canonical layout order.

    The masked-token output matrix reuses ``token_embedding``; only its bias
    appears here. A layer norm precedes layer 0 (the embedding norm), so a
    model has 2 L + 1 norm sites.
    """
    d, f = config.hidden_size, config.ffn_size
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_seq_len, d),
        "embedding_ln.gamma": (d,),
        "embedding_ln.beta": (d,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes[p + "attn.w_query"] = (d, d)
        shapes[p + "attn.b_query"] = (d,)
        shapes[p + "attn.w_key"] = (d, d)
        shapes[p + "attn.b_key"] = (d,)
        shapes[p + "attn.w_value"] = (d, d)
        shapes[p + "attn.b_value"] = (d,)
        shapes[p + "attn.w_output"] = (d, d)
        shapes[p + "attn.b_output"] = (d,)
        shapes[p + "ffn.w_in"] = (d, f)
        shapes[p + "ffn.b_in"] = (f,)
        shapes[p + "ffn.w_out"] = (f, d)
        shapes[p + "ffn.b_out"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes["mlm_bias"] = (config.vocab_size,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Total base parameter count (pure function of the geometry)."""
    return sum(math.prod(s) for s in parameter_shapes(config).values())


def layer_norm_parameter_names(config: ModelConfig) -> tuple[str, ...]:
    """All gamma/beta names: the embedding norm plus two sites per layer."""
    names = ["embedding_ln.gamma", "embedding_ln.beta"]
    for i in range(config.num_layers):
        for site in ("ln1", "ln2"):
            names.append(f"layer{i}.{site}.gamma")
            names.append(f"layer{i}.{site}.beta")
    return tuple(names)


class BaseParameters:
    """Named store of the shared encoder parameters.

    Mutable (and gradient-bearing) during pretraining; ``freeze()`` afterwards
    makes it safe to share read-only across tasks and workers.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise InputError(f"parameter names mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise InputError(
                    f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "BaseParameters":
        """Fresh trainable parameters: truncated-normal weights, affine-identity norms.

        Weight scales are dimension-aware so signals propagate at any desk
        geometry: matrices use std 1/sqrt(fan_in), embeddings 1/sqrt(d)
        (which also puts the tied masked-token logits at unit scale).
        """
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gamma"):
                values = np.ones(shape)
            elif name.endswith((".beta", "_bias")) or ".b_" in name:
                values = np.zeros(shape)
            elif name.endswith("_embedding"):
                values = T.truncated_normal(rng, shape, 1.0 / math.sqrt(config.hidden_size))
            else:
                values = T.truncated_normal(rng, shape, 1.0 / math.sqrt(shape[0]))
            params[name] = Tensor(values, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> tuple[str, ...]:
        return tuple(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def value_copy(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}


def _validate_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"expected a [batch, length] token array, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise InputError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError(
            f"token id out of vocabulary [0, {config.vocab_size}): got {tokens.max()}"
        )
    return tokens.astype(np.intp)


def _attention_sublayer(h: Tensor, params, prefix: str, config: ModelConfig, trace) -> Tensor:
    n, length, d = h.shape
    heads, dk = config.num_heads, config.head_dim
    flat = T.reshape(h, (n * length, d))

    def heads_view(x: Tensor) -> Tensor:
        x = T.reshape(x, (n, length, heads, dk))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (n * heads, length, dk))

    q = heads_view(T.add(T.matmul(flat, params[prefix + "w_query"]), params[prefix + "b_query"]))
    k = heads_view(T.add(T.matmul(flat, params[prefix + "w_key"]), params[prefix + "b_key"]))
    v = heads_view(T.add(T.matmul(flat, params[prefix + "w_value"]), params[prefix + "b_value"]))

    scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    attn = T.softmax(scores)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
    context = T.bmm(attn, v)

    context = T.reshape(context, (n, heads, length, dk))
    context = T.reshape(T.transpose(context, (0, 2, 1, 3)), (n * length, d))
    out = T.add(T.matmul(context, params[prefix + "w_output"]), params[prefix + "b_output"])
    return T.reshape(out, (n, length, d))


def _ffn_sublayer(h: Tensor, params, prefix: str) -> Tensor:
    n, length, d = h.shape
    flat = T.reshape(h, (n * length, d))
    hidden = T.gelu(T.add(T.matmul(flat, params[prefix + "w_in"]), params[prefix + "b_in"]))
    out = T.add(T.matmul(hidden, params[prefix + "w_out"]), params[prefix + "b_out"])
    return T.reshape(out, (n, length, d))


def encoder_forward(
    tokens: np.ndarray,
    params,
    adapters: list[LayerAdapterPair] | None = None,
    adapter_nonlinearity: str = "relu",
    trace: dict | None = None,
) -> Tensor:
    """Run the encoder stack; returns hidden states of shape [batch, length, d].

    ``params`` is any name -> Tensor lookup carrying a ``config`` attribute
    (BaseParameters, or a composed task view). When ``adapters`` is given it
    must hold one pair per layer.
    """
    config: ModelConfig = params.config
    tokens = _validate_tokens(tokens, config)
    n, length = tokens.shape
    d = config.hidden_size
    if adapters is not None and len(adapters) != config.num_layers:
        raise InputError(f"expected {config.num_layers} adapter pairs, got {len(adapters)}")

    tok = T.take_rows(params["token_embedding"], tokens.reshape(-1))
    h = T.reshape(tok, (n, length, d))
    pos = T.take_rows(params["position_embedding"], np.arange(length))
    h = T.add(h, pos)
    h = T.layer_norm(h, params["embedding_ln.gamma"], params["embedding_ln.beta"], LAYER_NORM_EPS)

    for i in range(config.num_layers):
        p = f"layer{i}."
        sub = _attention_sublayer(h, params, p + "attn.", config, trace)
        if adapters is not None:
            sub = adapter_forward(sub, adapters[i].attention, adapter_nonlinearity)
        h = T.layer_norm(T.add(sub, h), params[p + "ln1.gamma"], params[p + "ln1.beta"], LAYER_NORM_EPS)

        sub = _ffn_sublayer(h, params, p + "ffn.")
        if adapters is not None:
            sub = adapter_forward(sub, adapters[i].ffn, adapter_nonlinearity)
        h = T.layer_norm(T.add(sub, h), params[p + "ln2.gamma"], params[p + "ln2.beta"], LAYER_NORM_EPS)
    return h


def classify(
    tokens: np.ndarray,
    params,
    head_weight: Tensor,
    head_bias: Tensor,
    adapters: list[LayerAdapterPair] | None = None,
    adapter_nonlinearity: str = "relu",
) -> Tensor:
    """Logits from a linear head on the final hidden state of the first token."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or not np.all(tokens[:, 0] == CLS_TOKEN):
        raise ContractError("every sequence must carry the classification token at position 0")
    h = encoder_forward(tokens, params, adapters, adapter_nonlinearity)
    n, length, d = h.shape
    flat = T.reshape(h, (n * length, d))
    cls = T.take_rows(flat, np.arange(n) * length)
    return T.add(T.matmul(cls, head_weight), head_bias)


def mlm_logits(hidden: Tensor, params) -> Tensor:
    """Vocabulary logits for every position, tied to the token embedding."""
    n, length, d = hidden.shape
    flat = T.reshape(hidden, (n * length, d))
    emb_t = T.transpose(params["token_embedding"], (1, 0))
    return T.add(T.matmul(flat, emb_t), params["mlm_bias"])


@dataclass
class PretrainResult:
    base: BaseParameters
    losses: list[float]


def _mask_batch(batch: np.ndarray, mask_rate: float, rng: np.random.Generator):
    """Mask each non-CLS position independently; force one mask per row."""
    n, length = batch.shape
    u = rng.random((n, length))
    mask = (u < mask_rate) & (batch != CLS_TOKEN)
    for row in np.flatnonzero(~mask.any(axis=1)):
        eligible = np.flatnonzero(batch[row] != CLS_TOKEN)
        mask[row, eligible[np.argmin(u[row, eligible])]] = True
    masked = batch.copy()
    masked[mask] = MASK_TOKEN
    return masked, mask


def mlm_pretrain(
    corpus: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    mask_rate: float = 0.15,
) -> PretrainResult:
    """Train fresh base parameters to predict masked tokens; freeze and return them.

    The corpus is a [num_sequences, length] int array. Determinism: the same
    (corpus, configs, mask_rate) reproduce bit-identical parameters.
    """
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise InputError("pretraining corpus must be a nonempty [sequences, length] array")
    if not 0.0 < mask_rate < 1.0:
        raise InputError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    _validate_tokens(corpus, model_config)

    base = BaseParameters.init(model_config, seed=train_config.seed)
    optimizer = Adam(dict(base.params), train_config)
    rng = np.random.default_rng(train_config.seed)
    losses: list[float] = []

    T.clear_tape()
    for step in range(train_config.total_steps):
        rows = rng.integers(0, corpus.shape[0], size=train_config.batch_size)
        batch = corpus[rows]
        masked, mask = _mask_batch(batch, mask_rate, rng)

        hidden = encoder_forward(masked, base)
        logits_all = mlm_logits(hidden, base)
        flat_positions = np.flatnonzero(mask.reshape(-1))
        logits = T.take_rows(logits_all, flat_positions)
        loss = T.softmax_cross_entropy(logits, batch.reshape(-1)[flat_positions])

        T.backward(loss)
        optimizer.step(lr_at(step, train_config))
        optimizer.zero_grads()
        losses.append(loss.item())

    base.freeze()
    return PretrainResult(base=base, losses=losses)
