from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.dataset.pairs import SAFETY_LABELS, PreferencePair
from app.information.entropy import MiAnnotation


SCATTER_HEADER = ("mi_dispreferred", "mi_preferred", "safety_label")


@dataclass(frozen=True)
class LabelSummary:
    count: int
    mean_mi_preferred: float
    median_mi_preferred: float
    mean_mi_dispreferred: float
    median_mi_dispreferred: float
    mean_gap: float
    median_gap: float
    preferred_higher: int

    @property
    def fraction_preferred_higher(self) -> float:
        if self.count == 0:
            return 0.0
        return self.preferred_higher / self.count


_EMPTY = LabelSummary(
    count=0,
    mean_mi_preferred=0.0,
    median_mi_preferred=0.0,
    mean_mi_dispreferred=0.0,
    median_mi_dispreferred=0.0,
    mean_gap=0.0,
    median_gap=0.0,
    preferred_higher=0,
)


def _summarize(annotations: list[MiAnnotation]) -> LabelSummary:
    if not annotations:
        return _EMPTY
    pref = np.array([a.mi_preferred for a in annotations], dtype=np.float64)
    dispref = np.array([a.mi_dispreferred for a in annotations], dtype=np.float64)
    gaps = np.array([a.gap for a in annotations], dtype=np.float64)
    return LabelSummary(
        count=len(annotations),
        mean_mi_preferred=float(pref.mean()),
        median_mi_preferred=float(np.median(pref)),
        mean_mi_dispreferred=float(dispref.mean()),
        median_mi_dispreferred=float(np.median(dispref)),
        mean_gap=float(gaps.mean()),
        median_gap=float(np.median(gaps)),
        preferred_higher=sum(1 for a in annotations if a.preferred_higher),
    )


def summarize_by_label(items: Iterable[tuple[PreferencePair, MiAnnotation]]) -> dict[str, LabelSummary]:
    """Per-safety-label statistics; both labels are always present (count 0 gives zeros)."""
    grouped: dict[str, list[MiAnnotation]] = {label: [] for label in SAFETY_LABELS}
    for pair, ann in items:
        grouped[pair.safety_label].append(ann)
    return {label: _summarize(anns) for label, anns in grouped.items()}


def scatter_rows(items: Iterable[tuple[PreferencePair, MiAnnotation]]) -> list[tuple[float, float, str]]:
    """(mi_dispreferred, mi_preferred, safety_label) per pair, in input order."""
    return [(ann.mi_dispreferred, ann.mi_preferred, pair.safety_label) for pair, ann in items]


class LabelSummaryDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int
    mean_mi_preferred: float
    median_mi_preferred: float
    mean_mi_dispreferred: float
    median_mi_dispreferred: float
    mean_gap: float
    median_gap: float
    fraction_preferred_higher: float


class AnalysisReportDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    reference_fingerprint: str
    alpha: float
    pairs: int
    annotation_seconds: float
    seconds_per_pair: float
    labels: dict[str, LabelSummaryDTO]


def _summary_to_dto(s: LabelSummary) -> LabelSummaryDTO:
    return LabelSummaryDTO(
        count=s.count,
        mean_mi_preferred=s.mean_mi_preferred,
        median_mi_preferred=s.median_mi_preferred,
        mean_mi_dispreferred=s.mean_mi_dispreferred,
        median_mi_dispreferred=s.median_mi_dispreferred,
        mean_gap=s.mean_gap,
        median_gap=s.median_gap,
        fraction_preferred_higher=s.fraction_preferred_higher,
    )


def build_report(
    summaries: dict[str, LabelSummary],
    *,
    reference_fingerprint: str,
    alpha: float,
    annotation_seconds: float,
) -> AnalysisReportDTO:
    pairs = sum(s.count for s in summaries.values())
    return AnalysisReportDTO(
        reference_fingerprint=reference_fingerprint,
        alpha=alpha,
        pairs=pairs,
        annotation_seconds=annotation_seconds,
        seconds_per_pair=annotation_seconds / pairs if pairs else 0.0,
        labels={label: _summary_to_dto(s) for label, s in summaries.items()},
    )


def write_report(path: Path, report: AnalysisReportDTO) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def write_scatter_csv(path: Path, rows: Iterable[tuple[float, float, str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCATTER_HEADER)
        for mi_l, mi_w, label in rows:
            w.writerow((repr(mi_l), repr(mi_w), label))
