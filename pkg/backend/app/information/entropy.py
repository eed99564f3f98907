from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from app.dataset.pairs import PreferencePair
from app.policy.model import ModelLike, ReferenceSnapshot, step_log_probs
from app.policy.vocab import TokenSequence, with_bos


logger = logging.getLogger(__name__)


class AnnotationError(RuntimeError):
    """Annotation of one pair failed; `index` is its position in the input list."""

    def __init__(self, message: str, *, index: int) -> None:
        super().__init__(message)
        self.index = index


def _mean_step_entropy(model: ModelLike, prefix: TokenSequence, y: TokenSequence) -> float:
    log_probs = step_log_probs(model, prefix, y)  # (L, V)
    entropies = -(log_probs.exp() * log_probs).sum(dim=-1)
    return float(entropies.mean())


def prior_entropy(model: ModelLike, y: TokenSequence) -> float:
    """Token-averaged H(P(· | bos ⊕ y_<t)) in nats, teacher-forced on y."""
    return _mean_step_entropy(model, with_bos(model.config.bos_id), y)


def conditional_entropy(model: ModelLike, x: TokenSequence, y: TokenSequence) -> float:
    """Token-averaged H(P(· | bos ⊕ x ⊕ y_<t)) in nats."""
    return _mean_step_entropy(model, with_bos(model.config.bos_id, x), y)


def mutual_information(model: ModelLike, x: TokenSequence, y: TokenSequence) -> float:
    """prior_entropy − conditional_entropy. Not clamped: may be negative."""
    return prior_entropy(model, y) - conditional_entropy(model, x, y)


@dataclass(frozen=True)
class MiAnnotation:
    mi_preferred: float
    mi_dispreferred: float
    gap: float

    def __post_init__(self) -> None:
        if self.gap != abs(self.mi_preferred - self.mi_dispreferred):
            raise ValueError("gap must equal |mi_preferred - mi_dispreferred|")

    @classmethod
    def from_values(cls, mi_preferred: float, mi_dispreferred: float) -> MiAnnotation:
        return cls(
            mi_preferred=mi_preferred,
            mi_dispreferred=mi_dispreferred,
            gap=abs(mi_preferred - mi_dispreferred),
        )

    @property
    def preferred_higher(self) -> bool:
        return self.mi_preferred > self.mi_dispreferred


@dataclass(frozen=True)
class AnnotationTiming:
    total_seconds: float
    pairs: int

    @property
    def seconds_per_pair(self) -> float:
        if self.pairs == 0:
            return 0.0
        return self.total_seconds / self.pairs


@dataclass(frozen=True)
class AnnotationBatch:
    items: list[tuple[PreferencePair, MiAnnotation]]
    timing: AnnotationTiming


def annotate_pair(model: ModelLike, pair: PreferencePair) -> MiAnnotation:
    return MiAnnotation.from_values(
        mutual_information(model, pair.query, pair.preferred),
        mutual_information(model, pair.query, pair.dispreferred),
    )


def annotate_dataset(ref: ReferenceSnapshot, pairs: Sequence[PreferencePair], *, workers: int = 1) -> AnnotationBatch:
    """
    MI annotation of every pair against the frozen reference, in input order.

    With workers > 1 pairs are annotated on a thread pool; results do not depend on it.
    The first failing pair (lowest index) aborts the batch with AnnotationError.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def one(indexed: tuple[int, PreferencePair]) -> MiAnnotation:
        i, pair = indexed
        try:
            return annotate_pair(ref, pair)
        except (ValueError, RuntimeError) as e:
            raise AnnotationError(f"pair {i} ({pair.pair_id}): {e}", index=i) from e

    start = time.perf_counter()
    if workers == 1 or len(pairs) < 2:
        annotations = [one(item) for item in enumerate(pairs)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            annotations = list(pool.map(one, enumerate(pairs)))
    timing = AnnotationTiming(total_seconds=time.perf_counter() - start, pairs=len(pairs))

    logger.info(
        "annotated %d pairs in %.3fs (%.6fs per pair, workers=%d)",
        timing.pairs,
        timing.total_seconds,
        timing.seconds_per_pair,
        workers,
    )
    return AnnotationBatch(items=list(zip(pairs, annotations)), timing=timing)
