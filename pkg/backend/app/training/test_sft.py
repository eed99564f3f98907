from __future__ import annotations

import math

import pytest
import torch

from app.dataset.pairs import longest_example
from app.dataset.synthetic import default_vocabulary, generate_synthetic
from app.policy.model import ModelConfig, PolicyParameters, init_params, sequence_logprob
from app.policy.vocab import with_bos
from app.training.config import SftConfig
from app.training.sft import supervised_warmup

VOCAB = default_vocabulary()
PAIRS = generate_synthetic(0, 12, 12, VOCAB)
INIT = init_params(
    ModelConfig(vocab_size=VOCAB.size, embed_dim=4, context_window=longest_example(PAIRS), hidden_dim=8, seed=2)
)


def _nll(params: PolicyParameters) -> float:
    total = 0.0
    for p in PAIRS:
        total -= sequence_logprob(params, with_bos(0, p.query), p.preferred)
    return total / len(PAIRS)


def test_step_count_and_determinism() -> None:
    config = SftConfig(epochs=2, batch_size=10)
    a, losses = supervised_warmup(config, PAIRS, INIT)
    assert len(losses) == 2 * math.ceil(48 / 10)
    b, again = supervised_warmup(config, PAIRS, INIT)
    assert losses == again
    assert torch.equal(a.values, b.values)
    assert a.config == INIT.config


def test_preferred_only_halves_the_examples() -> None:
    _, losses = supervised_warmup(SftConfig(epochs=1, batch_size=6, include_dispreferred=False), PAIRS, INIT)
    assert len(losses) == 4


def test_warmup_lowers_likelihood_loss() -> None:
    before = _nll(INIT)
    ref, losses = supervised_warmup(SftConfig(epochs=10, batch_size=8), PAIRS, INIT)
    assert _nll(ref) < before
    assert sum(losses[-3:]) < sum(losses[:3])


def test_rejects_empty_input_and_bad_config() -> None:
    with pytest.raises(ValueError):
        supervised_warmup(SftConfig(), [], INIT)
    with pytest.raises(ValueError):
        SftConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        SftConfig(epochs=0)
