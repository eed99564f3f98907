from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from app.dataset.annotated import AnnotatedDataset, subset
from app.dataset.pairs import DatasetError, PreferencePair
from app.dataset.split import DatasetSplit, median_gap_split
from app.policy.model import PolicyParameters, ReferenceSnapshot
from app.training.config import TrainConfig
from app.training.harness import METRICS_HEADER, MetricsRow, evaluate, final_margin, metrics_cells, train


logger = logging.getLogger(__name__)

DEFAULT_ALPHAS: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5)
DEFAULT_SEEDS: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    preference_accuracy: float
    mean_margin: float
    final_mean_loss: float


@dataclass(frozen=True)
class MarginComparison:
    seed: int
    balanced_margin: float
    imbalanced_margin: float
    balanced_metrics: tuple[MetricsRow, ...] = ()
    imbalanced_metrics: tuple[MetricsRow, ...] = ()

    @property
    def imbalanced_higher(self) -> bool:
        return self.imbalanced_margin >= self.balanced_margin


def alpha_sweep(
    base: TrainConfig,
    data: AnnotatedDataset,
    init: PolicyParameters,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    eval_pairs: Sequence[PreferencePair] | None = None,
) -> list[SweepRow]:
    """One run of `base.variant` per alpha, each evaluated on `eval_pairs` (default: training pairs)."""
    if not alphas:
        raise ValueError("alpha_sweep needs at least one alpha")
    ref = ReferenceSnapshot.freeze(init)
    held_out = list(eval_pairs) if eval_pairs else data.pairs

    out: list[SweepRow] = []
    for alpha in alphas:
        policy, rows = train(replace(base, alpha=alpha), data, init)
        result = evaluate(policy, ref, held_out, base.beta)
        out.append(
            SweepRow(
                alpha=alpha,
                preference_accuracy=result.preference_accuracy,
                mean_margin=result.mean_margin,
                final_mean_loss=rows[-1].mean_loss,
            )
        )
        logger.info("alpha=%g: accuracy %.4f, margin %.6f", alpha, result.preference_accuracy, result.mean_margin)
    return out


def split_halves(data: AnnotatedDataset) -> tuple[DatasetSplit, AnnotatedDataset, AnnotatedDataset]:
    split = median_gap_split(data)
    if not split.balanced or not split.imbalanced:
        raise DatasetError("median-gap split left one half empty (all gaps tied)")
    return split, subset(data, split.balanced), subset(data, split.imbalanced)


def split_margin_experiment(
    base: TrainConfig,
    data: AnnotatedDataset,
    init: PolicyParameters,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> list[MarginComparison]:
    """
    Train `base.variant` on each median-gap half once per seed and compare the final mean
    training reward margins of the two halves. The per-step metrics of both runs are kept
    for plotting margin curves.
    """
    _, balanced, imbalanced = split_halves(data)
    ref = ReferenceSnapshot.freeze(init)

    out: list[MarginComparison] = []
    for seed in seeds:
        config = replace(base, seed=seed)
        policy_b, rows_b = train(config, balanced, init)
        policy_i, rows_i = train(config, imbalanced, init)
        cmp = MarginComparison(
            seed=seed,
            balanced_margin=final_margin(policy_b, ref, balanced.pairs, base.beta),
            imbalanced_margin=final_margin(policy_i, ref, imbalanced.pairs, base.beta),
            balanced_metrics=tuple(rows_b),
            imbalanced_metrics=tuple(rows_i),
        )
        logger.info(
            "seed %d: balanced margin %.6f, imbalanced margin %.6f",
            seed,
            cmp.balanced_margin,
            cmp.imbalanced_margin,
        )
        out.append(cmp)
    return out


MARGIN_CURVES_HEADER = ("seed", "half", *METRICS_HEADER)


def write_margin_curves_csv(path: Path, results: Sequence[MarginComparison]) -> None:
    """Per-step metrics of every run in long format: one row per (seed, half, step)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(MARGIN_CURVES_HEADER)
        for c in results:
            for half, rows in (("balanced", c.balanced_metrics), ("imbalanced", c.imbalanced_metrics)):
                w.writerows((c.seed, half, *metrics_cells(r)) for r in rows)
