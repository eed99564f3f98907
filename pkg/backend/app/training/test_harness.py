from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from app.dataset.annotated import AnnotatedDataset, build_annotated, subset
from app.dataset.pairs import longest_example
from app.dataset.synthetic import default_vocabulary, generate_synthetic
from app.losses.preference import LossVariant, dpo_loss, variant_gradient
from app.losses.weights import UNIT
from app.policy.model import ModelConfig, PolicyParameters, ReferenceSnapshot, init_params
from app.training.config import OptimizerKind, TrainConfig
from app.training.harness import (
    METRICS_HEADER,
    NumericalError,
    epoch_order,
    evaluate,
    reward_margin,
    train,
    write_metrics_csv,
)


def _setup(alpha: float = 1.5) -> tuple[AnnotatedDataset, PolicyParameters]:
    vocab = default_vocabulary()
    pairs = generate_synthetic(5, 8, 8, vocab)
    config = ModelConfig(
        vocab_size=vocab.size, embed_dim=4, context_window=longest_example(pairs), hidden_dim=6, seed=1
    )
    init = init_params(config)
    return build_annotated(pairs, ReferenceSnapshot.freeze(init), alpha), init


def _config(variant: LossVariant, **kw: object) -> TrainConfig:
    base = dict(beta=0.5, learning_rate=0.05, alpha=1.5, epochs=2, batch_size=4, seed=3)
    base.update(kw)
    return TrainConfig(variant=variant, **base)  # type: ignore[arg-type]


def test_zero_learning_rate_keeps_parameters() -> None:
    data, init = _setup()
    for optimizer in OptimizerKind:
        policy, rows = train(_config(LossVariant.BDPO, learning_rate=0.0, optimizer=optimizer), data, init)
        assert torch.equal(policy.values, init.values)
        assert [r.step for r in rows] == list(range(1, 9))
        assert all(r.mean_reward_margin == 0.0 for r in rows)


def test_one_sgd_step_follows_the_gradient() -> None:
    data, init = _setup()
    pair = data.pairs[0]
    one = subset(data, [pair.pair_id])
    config = _config(LossVariant.DPO, learning_rate=0.1, epochs=1, batch_size=1, optimizer=OptimizerKind.SGD)
    policy, rows = train(config, one, init)

    ref = ReferenceSnapshot.freeze(init)
    grad = variant_gradient(LossVariant.DPO, init, ref, pair, 0.5, UNIT)
    assert torch.allclose(policy.values, init.values - 0.1 * grad, rtol=0, atol=1e-12)
    assert len(rows) == 1
    assert rows[0].mean_loss == pytest.approx(np.log(2.0), abs=1e-15)

    step = init.values - policy.values
    u = step / torch.linalg.vector_norm(step)
    h = 1e-5
    plus = dpo_loss(init.with_values(init.values + h * u), ref, pair, 0.5)
    minus = dpo_loss(init.with_values(init.values - h * u), ref, pair, 0.5)
    slope = (plus - minus) / (2 * h)
    assert slope == pytest.approx(float(torch.linalg.vector_norm(step)) / 0.1, rel=1e-5)


def test_zero_alpha_bdpo_reproduces_dpo() -> None:
    data, init = _setup(alpha=0.0)
    dpo_policy, dpo_rows = train(_config(LossVariant.DPO, alpha=0.0), data, init)
    bdpo_policy, bdpo_rows = train(_config(LossVariant.BDPO, alpha=0.0), data, init)
    assert dpo_rows == bdpo_rows
    assert torch.equal(dpo_policy.values, bdpo_policy.values)


def test_same_inputs_same_run() -> None:
    data, init = _setup()
    a_policy, a_rows = train(_config(LossVariant.BDPO), data, init)
    b_policy, b_rows = train(_config(LossVariant.BDPO), data, init)
    assert a_rows == b_rows
    assert torch.equal(a_policy.values, b_policy.values)

    c_policy, _ = train(_config(LossVariant.BDPO, seed=4), data, init)
    assert not torch.equal(a_policy.values, c_policy.values)


def test_metric_columns_per_variant() -> None:
    data, init = _setup()
    for variant in (LossVariant.DPO, LossVariant.DPO_BW):
        _, rows = train(_config(variant), data, init)
        assert all(r.mean_scaling_factor == 1.0 for r in rows)
    _, dpo_rows = train(_config(LossVariant.DPO), data, init)
    assert all(r.mean_lambda_w == 1.0 and r.mean_lambda_l == 1.0 for r in dpo_rows)
    _, bdpo_rows = train(_config(LossVariant.BDPO), data, init)
    for r in bdpo_rows:
        assert r.mean_lambda_w + r.mean_lambda_l == pytest.approx(2.0, abs=1e-12)
    assert any(r.mean_scaling_factor != 1.0 for r in bdpo_rows[1:])


def test_training_moves_margin_up() -> None:
    data, init = _setup()
    policy, _ = train(_config(LossVariant.DPO, epochs=6), data, init)
    result = evaluate(policy, ReferenceSnapshot.freeze(init), data.pairs, 0.5)
    assert result.mean_margin > 0


def test_nonfinite_parameters_abort() -> None:
    data, init = _setup()
    huge = PolicyParameters(config=init.config, values=torch.full_like(init.values, 1.5e308))
    with pytest.raises(NumericalError) as exc:
        train(_config(LossVariant.BDPO), data, huge)
    assert exc.value.step == 1


def test_rejects_empty_data_and_bad_config() -> None:
    data, init = _setup()
    with pytest.raises(ValueError):
        train(_config(LossVariant.DPO), subset(data, []), init)
    with pytest.raises(ValueError):
        _config(LossVariant.DPO, beta=0.0)
    with pytest.raises(ValueError):
        _config(LossVariant.DPO, learning_rate=-1e-3)
    with pytest.raises(ValueError):
        _config(LossVariant.DPO, batch_size=0)


def test_evaluate_counts_ties_as_misses() -> None:
    data, init = _setup()
    ref = ReferenceSnapshot.freeze(init)
    result = evaluate(init, ref, data.pairs, 0.5)
    assert result.preference_accuracy == 0.0
    assert result.mean_margin == 0.0
    with pytest.raises(ValueError):
        evaluate(init, ref, [], 0.5)


def test_evaluate_recounts_margins() -> None:
    data, init = _setup()
    ref = ReferenceSnapshot.freeze(init)
    policy, _ = train(_config(LossVariant.BDPO, epochs=3), data, init)
    margins = [reward_margin(policy, ref, p, 0.5) for p in data.pairs]
    result = evaluate(policy, ref, data.pairs, 0.5)
    assert result.preference_accuracy == sum(1 for m in margins if m > 0) / len(margins)
    assert result.mean_margin == pytest.approx(sum(margins) / len(margins), rel=1e-12)


def test_reward_margin_is_antisymmetric() -> None:
    data, init = _setup()
    ref = ReferenceSnapshot.freeze(init)
    policy, _ = train(_config(LossVariant.DPO), data, init)
    for p in data.pairs[:4]:
        swapped = SimpleNamespace(query=p.query, preferred=p.dispreferred, dispreferred=p.preferred)
        assert reward_margin(policy, ref, swapped, 0.5) == -reward_margin(policy, ref, p, 0.5)


def test_epoch_order_is_a_seeded_permutation() -> None:
    a = epoch_order(7, 0, 10)
    assert sorted(a.tolist()) == list(range(10))
    assert np.array_equal(a, epoch_order(7, 0, 10))
    assert not np.array_equal(a, epoch_order(7, 1, 10))


def test_metrics_csv(tmp_path: Path) -> None:
    data, init = _setup()
    _, rows = train(replace(_config(LossVariant.BDPO), epochs=1), data, init)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    with path.open(encoding="utf-8", newline="") as f:
        table = list(csv.reader(f))
    assert tuple(table[0]) == METRICS_HEADER
    assert len(table) == 1 + len(rows)
    assert float(table[1][1]) == rows[0].mean_loss
