"""Shared fixtures: desk-scale geometry, a pretrained base, and trained models.

The expensive artifacts (MLM-pretrained base, best-of-3 adapter model on the
parity task) are session-scoped so the structural, analysis, and acceptance
tests all reuse them.
"""

import numpy as np
import pytest

import adapterlab as al

DESK_CONFIG = al.ModelConfig(
    num_layers=2, hidden_size=32, num_heads=2, ffn_size=64, vocab_size=16, max_seq_len=16
)

TRAIN_EPOCHS = 80
TRAIN_LR = 3e-3
TASK_SIZES = (384, 128, 128)


def desk_train_config(seed: int = 0, epochs: int = TRAIN_EPOCHS, lr: float = TRAIN_LR,
                      train_size: int = TASK_SIZES[0]) -> al.TrainConfig:
    steps = al.epochs_to_steps(epochs, train_size, 32)
    return al.TrainConfig(peak_lr=lr, total_steps=steps, seed=seed)


@pytest.fixture(scope="session")
def desk_config() -> al.ModelConfig:
    return DESK_CONFIG


@pytest.fixture(scope="session")
def random_base(desk_config) -> al.BaseParameters:
    """A frozen, un-pretrained base for structural tests (fast)."""
    base = al.BaseParameters.init(desk_config, seed=7)
    base.freeze()
    return base


@pytest.fixture(scope="session")
def pretrained_base(desk_config) -> al.BaseParameters:
    corpus = al.synthetic_corpus(desk_config, num_sequences=512, content_len=12, seed=0)
    result = al.mlm_pretrain(
        corpus, desk_config, al.TrainConfig(peak_lr=1e-2, total_steps=400, seed=0)
    )
    return result.base


@pytest.fixture(scope="session")
def parity_task() -> al.SyntheticTask:
    return al.make_task("parity", seed=1, sizes=TASK_SIZES)


@pytest.fixture(scope="session")
def parity_adapter_best(pretrained_base, parity_task):
    """Best-of-3 adapter-tuned parity model (the workhorse trained fixture)."""
    return al.rerun_best_of(
        3,
        pretrained_base,
        parity_task,
        al.AdapterTuning(al.AdapterConfig(4)),
        desk_train_config(seed=0),
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
