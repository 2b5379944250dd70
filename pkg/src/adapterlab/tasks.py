"""Synthetic sequence-classification tasks and the pretraining corpus.

Three task families stand in for a benchmark suite at desk scale:

- ``parity``: is the count of a marker token odd? Requires counting mod 2,
  which a linear head on frozen features cannot do.
- ``majority``: which of two tokens occurs more often (odd length, no ties).
- ``first-last-match``: does the first content token equal the last one?

Generation is a pure function of (kind, seed, sizes, vocabulary, length):
splits are disjoint at the sequence level, balanced per label, and
regenerate bit-identically. Every sequence starts with the reserved CLS id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import CLS_TOKEN, NUM_RESERVED_TOKENS, ModelConfig

KINDS = ("parity", "majority", "first-last-match")

DEFAULT_SIZES = (384, 128, 128)
_PARITY_MAX_COUNT = 4


@dataclass(frozen=True)
class Split:
    tokens: np.ndarray  # int array [n, length+1], CLS first
    labels: np.ndarray  # int array [n]

    def __len__(self) -> int:
        return len(self.labels)

    def majority_fraction(self) -> float:
        counts = np.bincount(self.labels)
        return counts.max() / len(self.labels)


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    vocab: tuple[int, ...]
    seq_len: int
    num_classes: int
    seed: int
    sizes: tuple[int, int, int]
    train: Split
    validation: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in ("train", "validation", "test"):
            raise InputError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "sizes": list(self.sizes),
            "vocab": list(self.vocab),
            "seq_len": self.seq_len,
        }


def _default_vocab(kind: str) -> tuple[int, ...]:
    first = NUM_RESERVED_TOKENS
    if kind == "majority":
        return (first, first + 1)
    return tuple(range(first, first + 4))


def _default_seq_len(kind: str) -> int:
    return {"parity": 10, "majority": 11, "first-last-match": 8}[kind]


def _sample_parity(rng: np.random.Generator, vocab, seq_len):
    marker = vocab[0]
    count = int(rng.integers(1, min(_PARITY_MAX_COUNT, seq_len) + 1))
    content = rng.choice(vocab[1:], size=seq_len)
    positions = rng.choice(seq_len, size=count, replace=False)
    content[positions] = marker
    return content, count % 2


def _sample_majority(rng: np.random.Generator, vocab, seq_len):
    a, b = vocab[0], vocab[1]
    count_a = int(rng.integers(0, seq_len + 1))
    content = np.full(seq_len, b)
    positions = rng.choice(seq_len, size=count_a, replace=False)
    content[positions] = a
    return content, int(count_a > seq_len // 2)


def _sample_first_last(rng: np.random.Generator, vocab, seq_len):
    first = int(rng.choice(vocab))
    match = bool(rng.random() < 0.5)
    others = [t for t in vocab if t != first]
    last = first if match else int(rng.choice(others))
    content = rng.choice(vocab, size=seq_len)
    content[0] = first
    content[-1] = last
    return content, int(match)


_SAMPLERS = {
    "parity": _sample_parity,
    "majority": _sample_majority,
    "first-last-match": _sample_first_last,
}


def make_task(
    kind: str,
    seed: int,
    sizes: tuple[int, int, int] = DEFAULT_SIZES,
    vocab: tuple[int, ...] | None = None,
    seq_len: int | None = None,
) -> SyntheticTask:
    """Generate a task with disjoint, label-balanced train/validation/test splits."""
    if kind not in _SAMPLERS:
        raise InputError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    vocab = tuple(vocab) if vocab is not None else _default_vocab(kind)
    seq_len = seq_len if seq_len is not None else _default_seq_len(kind)
    if len(vocab) < 2:
        raise InputError("tasks need at least two content tokens")
    if min(vocab) < NUM_RESERVED_TOKENS:
        raise InputError(f"content tokens must avoid the reserved ids [0, {NUM_RESERVED_TOKENS})")
    if kind == "majority" and seq_len % 2 == 0:
        raise InputError("majority needs an odd sequence length (no ties)")
    if kind == "first-last-match" and seq_len < 2:
        raise InputError("first-last-match needs length >= 2")
    if any(s < 2 for s in sizes):
        raise InputError(f"every split needs at least 2 examples, got {sizes}")

    sampler = _SAMPLERS[kind]
    rng = np.random.default_rng(seed)
    # Per-label quotas: odd split sizes give label 0 the extra example.
    need = [sum(s // 2 + s % 2 for s in sizes), sum(s // 2 for s in sizes)]
    pools: list[list[np.ndarray]] = [[], []]
    seen: set[tuple] = set()
    attempts = 0
    limit = 2000 * sum(need)
    while len(pools[0]) < need[0] or len(pools[1]) < need[1]:
        attempts += 1
        if attempts > limit:
            raise InputError(
                f"could not generate {sum(need)} distinct balanced sequences of "
                f"length {seq_len}; enlarge the vocabulary or length"
            )
        content, label = sampler(rng, vocab, seq_len)
        key = tuple(content)
        if key in seen or len(pools[label]) >= need[label]:
            continue
        seen.add(key)
        pools[label].append(np.asarray(content))

    splits = []
    cursors = [0, 0]
    for size in sizes:
        quota = [size // 2 + size % 2, size // 2]
        rows, labels = [], []
        for label in (0, 1):
            take = pools[label][cursors[label] : cursors[label] + quota[label]]
            cursors[label] += quota[label]
            rows.extend(take)
            labels.extend([label] * quota[label])
        order = rng.permutation(size)
        tokens = np.stack(rows)[order]
        tokens = np.hstack([np.full((size, 1), CLS_TOKEN, dtype=tokens.dtype), tokens])
        splits.append(Split(tokens=tokens, labels=np.asarray(labels)[order]))

    return SyntheticTask(
        kind=kind,
        vocab=vocab,
        seq_len=seq_len,
        num_classes=2,
        seed=seed,
        sizes=tuple(sizes),
        train=splits[0],
        validation=splits[1],
        test=splits[2],
    )


def synthetic_corpus(
    config: ModelConfig, num_sequences: int, content_len: int, seed: int
) -> np.ndarray:
    """Markov-chain token sequences for masked-token pretraining.

    Each next token is the previous content id's successor (wrapping) with
    probability 0.8, else uniform, so masked positions are predictable from
    bidirectional context and the frozen features become non-trivial.
    """
    if num_sequences < 1 or content_len < 1:
        raise InputError("corpus needs at least one sequence of at least one token")
    if content_len + 1 > config.max_seq_len:
        raise InputError(
            f"content length {content_len} plus CLS exceeds max_seq_len {config.max_seq_len}"
        )
    rng = np.random.default_rng(seed)
    first = NUM_RESERVED_TOKENS
    num_content = config.vocab_size - first
    corpus = np.empty((num_sequences, content_len + 1), dtype=np.intp)
    corpus[:, 0] = CLS_TOKEN
    state = rng.integers(0, num_content, size=num_sequences)
    for position in range(content_len):
        corpus[:, position + 1] = first + state
        jump = rng.random(num_sequences) >= 0.8
        successor = (state + 1) % num_content
        random_state = rng.integers(0, num_content, size=num_sequences)
        state = np.where(jump, random_state, successor)
    return corpus
