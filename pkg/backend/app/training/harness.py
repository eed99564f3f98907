from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from app.dataset.annotated import AnnotatedDataset, AnnotatedRecord, reweight
from app.dataset.pairs import PreferencePair
from app.losses.preference import (
    PairLike,
    effective_weights,
    implicit_reward,
    pair_objective,
    variant_scaling_factor,
)
from app.policy.model import (
    ModelLike,
    PolicyParameters,
    ReferenceSnapshot,
    sequence_logprob,
    sequence_logprob_tensor,
)
from app.policy.vocab import with_bos
from app.training.config import OptimizerKind, TrainConfig


logger = logging.getLogger(__name__)

METRICS_HEADER = (
    "step",
    "mean_loss",
    "mean_reward_margin",
    "mean_lambda_w",
    "mean_lambda_l",
    "mean_scaling_factor",
)


class NumericalError(RuntimeError):
    """Non-finite loss or gradient; `step` is the 1-based optimizer step."""

    def __init__(self, message: str, *, step: int) -> None:
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class MetricsRow:
    step: int
    mean_loss: float
    mean_reward_margin: float
    mean_lambda_w: float
    mean_lambda_l: float
    mean_scaling_factor: float


@dataclass(frozen=True)
class EvalResult:
    preference_accuracy: float
    mean_margin: float


def reward_margin(policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float) -> float:
    """r̂(x, y_w) − r̂(x, y_l)."""
    r_w = implicit_reward(policy, ref, pair.query, pair.preferred, beta)
    r_l = implicit_reward(policy, ref, pair.query, pair.dispreferred, beta)
    return r_w.value - r_l.value


def evaluate(policy: ModelLike, ref: ModelLike, pairs: Sequence[PairLike], beta: float) -> EvalResult:
    """A margin of exactly 0 counts as a miss."""
    if not pairs:
        raise ValueError("evaluate needs at least one pair")
    margins = [reward_margin(policy, ref, p, beta) for p in pairs]
    return EvalResult(
        preference_accuracy=sum(1 for m in margins if m > 0) / len(margins),
        mean_margin=_ordered_mean(margins),
    )


def _ordered_mean(values: Sequence[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def _make_optimizer(config: TrainConfig, theta: torch.Tensor) -> torch.optim.Optimizer:
    if config.optimizer is OptimizerKind.SGD:
        return torch.optim.SGD([theta], lr=config.learning_rate)
    return torch.optim.Adam([theta], lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic visiting order of `n` items for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _reference_cache(ref: ReferenceSnapshot, records: Sequence[AnnotatedRecord]) -> list[tuple[float, float]]:
    out = []
    for r in records:
        prefix = with_bos(ref.config.bos_id, r.pair.query)
        out.append((sequence_logprob(ref, prefix, r.pair.preferred), sequence_logprob(ref, prefix, r.pair.dispreferred)))
    return out


def train(
    config: TrainConfig, data: AnnotatedDataset, init: PolicyParameters
) -> tuple[PolicyParameters, list[MetricsRow]]:
    """
    Minibatch training of `config.variant` starting from `init`, which is also frozen as the
    reference. Same inputs give bitwise-identical parameters and metrics.
    """
    if len(data) == 0:
        raise ValueError("training data must be nonempty")

    ref = ReferenceSnapshot.freeze(init)
    if ref.fingerprint() != data.reference_fingerprint:
        logger.warning("initial parameters differ from the reference the dataset was annotated against")
    if config.alpha != data.alpha:
        data = reweight(data, config.alpha)

    records = data.records
    ref_logprobs = _reference_cache(ref, records)
    model_config = init.config
    beta = config.beta

    theta = init.values.detach().clone().requires_grad_(True)
    optimizer = _make_optimizer(config, theta)

    rows: list[MetricsRow] = []
    step = 0
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, len(records))
        epoch_start = len(rows)
        for start in range(0, len(records), config.batch_size):
            step += 1
            batch = [int(i) for i in order[start : start + config.batch_size]]
            optimizer.zero_grad(set_to_none=True)

            losses: list[torch.Tensor] = []
            margins: list[float] = []
            lambdas_w: list[float] = []
            lambdas_l: list[float] = []
            factors: list[float] = []
            for i in batch:
                rec = records[i]
                ref_w, ref_l = ref_logprobs[i]
                prefix = with_bos(model_config.bos_id, rec.pair.query)
                r_w = beta * (sequence_logprob_tensor(model_config, theta, prefix, rec.pair.preferred) - ref_w)
                r_l = beta * (sequence_logprob_tensor(model_config, theta, prefix, rec.pair.dispreferred) - ref_l)
                losses.append(pair_objective(config.variant, r_w, r_l, rec.weights))

                rw, rl = float(r_w.detach()), float(r_l.detach())
                used = effective_weights(config.variant, rec.weights)
                margins.append(rw - rl)
                lambdas_w.append(used.lambda_w)
                lambdas_l.append(used.lambda_l)
                factors.append(variant_scaling_factor(config.variant, rw, rl, rec.weights))

            batch_loss = losses[0]
            for loss in losses[1:]:
                batch_loss = batch_loss + loss
            batch_loss = batch_loss / len(losses)
            if not bool(torch.isfinite(batch_loss)):
                raise NumericalError(f"non-finite loss at step {step}", step=step)
            batch_loss.backward()
            if theta.grad is None or not bool(torch.isfinite(theta.grad).all()):
                raise NumericalError(f"non-finite gradient at step {step}", step=step)
            optimizer.step()

            row = MetricsRow(
                step=step,
                mean_loss=float(batch_loss.detach()),
                mean_reward_margin=_ordered_mean(margins),
                mean_lambda_w=_ordered_mean(lambdas_w),
                mean_lambda_l=_ordered_mean(lambdas_l),
                mean_scaling_factor=_ordered_mean(factors),
            )
            rows.append(row)
            logger.debug("step %d: loss=%.6f margin=%.6f", row.step, row.mean_loss, row.mean_reward_margin)

        logger.info(
            "epoch %d/%d (%s): mean loss %.6f, last margin %.6f",
            epoch + 1,
            config.epochs,
            config.variant.value,
            _ordered_mean([r.mean_loss for r in rows[epoch_start:]]),
            rows[-1].mean_reward_margin,
        )

    return PolicyParameters(config=model_config, values=theta.detach().clone()), rows


def final_margin(policy: ModelLike, ref: ModelLike, pairs: Sequence[PreferencePair], beta: float) -> float:
    """Mean reward margin over the training pairs after training."""
    return evaluate(policy, ref, pairs, beta).mean_margin


def metrics_cells(r: MetricsRow) -> tuple[object, ...]:
    """CSV cells of one row in METRICS_HEADER order, floats written with repr."""
    return (
        r.step,
        repr(r.mean_loss),
        repr(r.mean_reward_margin),
        repr(r.mean_lambda_w),
        repr(r.mean_lambda_l),
        repr(r.mean_scaling_factor),
    )


def write_metrics_csv(path: Path, rows: Iterable[MetricsRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_cells(r) for r in rows)
