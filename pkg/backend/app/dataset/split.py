from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.dataset.annotated import AnnotatedDataset, save_annotated, subset
from app.dataset.pairs import SAFETY_LABELS, DatasetError
from app.policy.vocab import Vocabulary


logger = logging.getLogger(__name__)

BALANCED_FILE = "balanced.jsonl"
IMBALANCED_FILE = "imbalanced.jsonl"
SPLIT_MANIFEST_FILE = "split.json"


@dataclass(frozen=True)
class DatasetSplit:
    balanced: tuple[str, ...]
    imbalanced: tuple[str, ...]
    per_label_medians: dict[str, float]

    def __post_init__(self) -> None:
        if set(self.balanced) & set(self.imbalanced):
            raise ValueError("balanced and imbalanced halves must be disjoint")


def median_gap_split(dataset: AnnotatedDataset) -> DatasetSplit:
    """
    Within each safety label, gap <= that label's median goes to balanced, the rest to
    imbalanced. Ids keep dataset order in both halves.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot split an empty dataset")

    medians: dict[str, float] = {}
    for label in SAFETY_LABELS:
        gaps = [r.annotation.gap for r in dataset.records if r.pair.safety_label == label]
        if not gaps:
            continue
        if len(gaps) < 2:
            raise DatasetError(f"label {label!r} has {len(gaps)} record; the split needs at least 2 per label")
        medians[label] = float(np.median(np.asarray(gaps, dtype=np.float64)))

    balanced: list[str] = []
    imbalanced: list[str] = []
    for r in dataset.records:
        if r.annotation.gap <= medians[r.pair.safety_label]:
            balanced.append(r.pair_id)
        else:
            imbalanced.append(r.pair_id)
    return DatasetSplit(balanced=tuple(balanced), imbalanced=tuple(imbalanced), per_label_medians=medians)


class HalfCountsDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    balanced: int
    imbalanced: int


class SplitManifestDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    reference_fingerprint: str
    alpha: float
    per_label_medians: dict[str, float]
    counts: dict[str, HalfCountsDTO]
    balanced_file: str = BALANCED_FILE
    imbalanced_file: str = IMBALANCED_FILE


def _split_to_dto(dataset: AnnotatedDataset, split: DatasetSplit) -> SplitManifestDTO:
    labels = {r.pair_id: r.pair.safety_label for r in dataset.records}
    counts: dict[str, HalfCountsDTO] = {}
    for label in split.per_label_medians:
        counts[label] = HalfCountsDTO(
            balanced=sum(1 for i in split.balanced if labels[i] == label),
            imbalanced=sum(1 for i in split.imbalanced if labels[i] == label),
        )
    return SplitManifestDTO(
        reference_fingerprint=dataset.reference_fingerprint,
        alpha=dataset.alpha,
        per_label_medians=split.per_label_medians,
        counts=counts,
    )


def write_split(out_dir: Path, dataset: AnnotatedDataset, split: DatasetSplit, vocab: Vocabulary) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    balanced_path = out_dir / BALANCED_FILE
    imbalanced_path = out_dir / IMBALANCED_FILE
    manifest_path = out_dir / SPLIT_MANIFEST_FILE

    save_annotated(balanced_path, subset(dataset, split.balanced), vocab)
    save_annotated(imbalanced_path, subset(dataset, split.imbalanced), vocab)
    manifest_path.write_text(_split_to_dto(dataset, split).model_dump_json(indent=2) + "\n", encoding="utf-8")

    logger.info(
        "split %d pairs: %d balanced, %d imbalanced (medians %s)",
        len(dataset),
        len(split.balanced),
        len(split.imbalanced),
        {k: round(v, 6) for k, v in split.per_label_medians.items()},
    )
    return [balanced_path, imbalanced_path, manifest_path]
