from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.dataset.pairs import (
    DatasetError,
    PreferencePair,
    PreferenceRecordDTO,
    check_unique_ids,
    load_records,
    pair_to_record,
    write_records,
)
from app.information.entropy import MiAnnotation, annotate_dataset
from app.losses.weights import SUM_TOLERANCE, BalancedWeights, balanced_weights
from app.policy.model import ReferenceSnapshot
from app.policy.vocab import Vocabulary


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnotatedRecord:
    pair: PreferencePair
    annotation: MiAnnotation
    weights: BalancedWeights

    @property
    def pair_id(self) -> str:
        return self.pair.pair_id


@dataclass(frozen=True)
class AnnotatedDataset:
    """
    Pairs with their reference-model MI annotation and the balanced weights derived from it
    at `alpha`. `reference_fingerprint` identifies the snapshot the MI was measured on.
    """

    records: tuple[AnnotatedRecord, ...]
    reference_fingerprint: str
    alpha: float
    annotation_seconds: float = 0.0

    def __post_init__(self) -> None:
        if not self.reference_fingerprint:
            raise ValueError("reference_fingerprint must be nonempty")
        if not (self.alpha >= 0):
            raise ValueError("alpha must be >= 0")
        check_unique_ids(r.pair for r in self.records)
        for i, r in enumerate(self.records):
            expected = balanced_weights(r.annotation.mi_preferred, r.annotation.mi_dispreferred, self.alpha)
            if (
                abs(r.weights.lambda_w - expected.lambda_w) > SUM_TOLERANCE
                or abs(r.weights.lambda_l - expected.lambda_l) > SUM_TOLERANCE
            ):
                raise DatasetError(f"record {r.pair_id}: weights do not match its MI at alpha={self.alpha}", index=i)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def pairs(self) -> list[PreferencePair]:
        return [r.pair for r in self.records]

    def weights_by_id(self) -> dict[str, BalancedWeights]:
        return {r.pair_id: r.weights for r in self.records}


def build_annotated(
    pairs: Sequence[PreferencePair], ref: ReferenceSnapshot, alpha: float, *, workers: int = 1
) -> AnnotatedDataset:
    if not (alpha >= 0):
        raise ValueError("alpha must be >= 0")
    check_unique_ids(pairs)
    batch = annotate_dataset(ref, pairs, workers=workers)
    records = tuple(
        AnnotatedRecord(
            pair=pair,
            annotation=ann,
            weights=balanced_weights(ann.mi_preferred, ann.mi_dispreferred, alpha),
        )
        for pair, ann in batch.items
    )
    return AnnotatedDataset(
        records=records,
        reference_fingerprint=ref.fingerprint(),
        alpha=alpha,
        annotation_seconds=batch.timing.total_seconds,
    )


def reweight(dataset: AnnotatedDataset, alpha: float) -> AnnotatedDataset:
    """Same pairs and MI, weights recomputed at `alpha`."""
    records = tuple(
        AnnotatedRecord(
            pair=r.pair,
            annotation=r.annotation,
            weights=balanced_weights(r.annotation.mi_preferred, r.annotation.mi_dispreferred, alpha),
        )
        for r in dataset.records
    )
    return AnnotatedDataset(
        records=records,
        reference_fingerprint=dataset.reference_fingerprint,
        alpha=alpha,
        annotation_seconds=dataset.annotation_seconds,
    )


def subset(dataset: AnnotatedDataset, ids: Iterable[str]) -> AnnotatedDataset:
    """Records whose pair_id is in `ids`, in dataset order."""
    wanted = set(ids)
    known = {r.pair_id for r in dataset.records}
    missing = wanted - known
    if missing:
        raise DatasetError(f"unknown pair ids: {', '.join(sorted(missing))}")
    return AnnotatedDataset(
        records=tuple(r for r in dataset.records if r.pair_id in wanted),
        reference_fingerprint=dataset.reference_fingerprint,
        alpha=dataset.alpha,
        annotation_seconds=dataset.annotation_seconds,
    )


# --- persistence: JSONL records + `<stem>.meta.json` sidecar ---


class AnnotationMetaDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(..., ge=0)
    reference_fingerprint: str = Field(..., min_length=1)
    annotation_seconds: float = Field(default=0.0, ge=0)
    count: int = Field(..., ge=0)


def meta_path_for(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _record_to_dto(r: AnnotatedRecord, vocab: Vocabulary) -> PreferenceRecordDTO:
    return pair_to_record(r.pair, vocab).model_copy(
        update={
            "mi_chosen": r.annotation.mi_preferred,
            "mi_rejected": r.annotation.mi_dispreferred,
            "lambda_w": r.weights.lambda_w,
            "lambda_l": r.weights.lambda_l,
        }
    )


def save_annotated(path: Path, dataset: AnnotatedDataset, vocab: Vocabulary) -> None:
    write_records(path, (_record_to_dto(r, vocab) for r in dataset.records))
    meta = AnnotationMetaDTO(
        alpha=dataset.alpha,
        reference_fingerprint=dataset.reference_fingerprint,
        annotation_seconds=dataset.annotation_seconds,
        count=len(dataset.records),
    )
    meta_path_for(path).write_text(meta.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _load_meta(path: Path) -> AnnotationMetaDTO:
    meta_path = meta_path_for(path)
    if not meta_path.exists():
        raise DatasetError(f"{meta_path}: missing annotation metadata (run analyze first)")
    try:
        return AnnotationMetaDTO.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetError(f"{meta_path}: invalid annotation metadata: {e}") from e


def load_annotated(path: Path, vocab: Vocabulary) -> AnnotatedDataset:
    """
    Inverse of save_annotated. Every line must carry mi_chosen and mi_rejected; stored λ
    values are checked against a recomputation at the stored alpha.
    """
    meta = _load_meta(path)
    records: list[AnnotatedRecord] = []
    for i, (pair, rec) in enumerate(load_records(path, vocab)):
        if rec.mi_chosen is None or rec.mi_rejected is None:
            raise DatasetError(f"{path}: record {pair.pair_id} has no MI annotation (run analyze first)", index=i)
        ann = MiAnnotation.from_values(rec.mi_chosen, rec.mi_rejected)
        weights = balanced_weights(ann.mi_preferred, ann.mi_dispreferred, meta.alpha)
        if rec.lambda_w is not None and abs(rec.lambda_w - weights.lambda_w) > SUM_TOLERANCE:
            raise DatasetError(f"{path}: record {pair.pair_id} lambda_w disagrees with its MI", index=i)
        if rec.lambda_l is not None and abs(rec.lambda_l - weights.lambda_l) > SUM_TOLERANCE:
            raise DatasetError(f"{path}: record {pair.pair_id} lambda_l disagrees with its MI", index=i)
        records.append(AnnotatedRecord(pair=pair, annotation=ann, weights=weights))

    if len(records) != meta.count:
        raise DatasetError(f"{path}: {len(records)} records but metadata says {meta.count}")
    logger.info("loaded %d annotated pairs from %s (alpha=%g)", len(records), path, meta.alpha)
    return AnnotatedDataset(
        records=tuple(records),
        reference_fingerprint=meta.reference_fingerprint,
        alpha=meta.alpha,
        annotation_seconds=meta.annotation_seconds,
    )
