from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from app.dataset.annotated import AnnotatedDataset, AnnotatedRecord, load_annotated
from app.dataset.pairs import SAFE, UNSAFE, DatasetError, PreferencePair
from app.dataset.split import (
    BALANCED_FILE,
    IMBALANCED_FILE,
    SPLIT_MANIFEST_FILE,
    median_gap_split,
    write_split,
)
from app.dataset.synthetic import default_vocabulary
from app.information.entropy import MiAnnotation
from app.losses.weights import balanced_weights
from app.policy.vocab import TokenSequence


def _dataset(gaps: list[tuple[str, float]], alpha: float = 1.0) -> AnnotatedDataset:
    records = []
    for i, (label, gap) in enumerate(gaps):
        pair = PreferencePair(
            query=TokenSequence.of([1 + i % 3]),
            preferred=TokenSequence.of([2]),
            dispreferred=TokenSequence.of([3]),
            safety_label=label,
            pair_id=f"p{i}",
        )
        ann = MiAnnotation.from_values(0.5 + gap, 0.5)
        records.append(
            AnnotatedRecord(pair=pair, annotation=ann, weights=balanced_weights(ann.mi_preferred, ann.mi_dispreferred, alpha))
        )
    return AnnotatedDataset(records=tuple(records), reference_fingerprint="ref", alpha=alpha)


def test_even_split() -> None:
    ds = _dataset([(SAFE, 1.0), (SAFE, 2.0), (SAFE, 3.0), (SAFE, 4.0)])
    split = median_gap_split(ds)
    assert split.per_label_medians == {SAFE: pytest.approx(2.5)}
    assert split.balanced == ("p0", "p1")
    assert split.imbalanced == ("p2", "p3")


def test_ties_go_to_balanced() -> None:
    ds = _dataset([(UNSAFE, 0.25)] * 5)
    split = median_gap_split(ds)
    assert len(split.balanced) == 5
    assert split.imbalanced == ()


def test_labels_split_independently() -> None:
    ds = _dataset([(SAFE, 0.0), (SAFE, 10.0), (UNSAFE, 1.0), (UNSAFE, 2.0), (UNSAFE, 3.0)])
    split = median_gap_split(ds)
    assert split.balanced == ("p0", "p2", "p3")
    assert split.imbalanced == ("p1", "p4")


def test_randomized_against_sort_oracle() -> None:
    rng = random.Random(0)
    for _ in range(50):
        rows = [(rng.choice((SAFE, UNSAFE)), round(rng.uniform(0, 2), rng.choice((1, 6)))) for _ in range(rng.randint(4, 30))]
        for label in (SAFE, UNSAFE):
            if sum(1 for lab, _ in rows if lab == label) == 1:
                rows.append((label, 0.5))
        ds = _dataset(rows)
        split = median_gap_split(ds)
        assert set(split.balanced) | set(split.imbalanced) == {r.pair_id for r in ds.records}
        assert not set(split.balanced) & set(split.imbalanced)

        for label in (SAFE, UNSAFE):
            gaps = sorted(r.annotation.gap for r in ds.records if r.pair.safety_label == label)
            if not gaps:
                continue
            n = len(gaps)
            median = gaps[n // 2] if n % 2 else (gaps[n // 2 - 1] + gaps[n // 2]) / 2
            ids = [r.pair_id for r in ds.records if r.pair.safety_label == label]
            gap_of = {r.pair_id: r.annotation.gap for r in ds.records}
            low = [i for i in ids if gap_of[i] <= median]
            assert [i for i in split.balanced if i in ids] == low
            if len(set(gaps)) == n:
                assert abs(len(low) - (n - len(low))) <= 1


def test_singleton_label_and_empty_dataset_rejected() -> None:
    with pytest.raises(DatasetError):
        median_gap_split(_dataset([(SAFE, 1.0), (SAFE, 2.0), (UNSAFE, 1.0)]))
    with pytest.raises(DatasetError):
        median_gap_split(AnnotatedDataset(records=(), reference_fingerprint="ref", alpha=1.0))


def test_write_split(tmp_path: Path) -> None:
    vocab = default_vocabulary()
    ds = _dataset([(SAFE, 1.0), (SAFE, 2.0), (UNSAFE, 0.5), (UNSAFE, 0.1), (UNSAFE, 0.3)])
    split = median_gap_split(ds)
    paths = write_split(tmp_path, ds, split, vocab)
    assert [p.name for p in paths] == [BALANCED_FILE, IMBALANCED_FILE, SPLIT_MANIFEST_FILE]

    balanced = load_annotated(tmp_path / BALANCED_FILE, vocab)
    imbalanced = load_annotated(tmp_path / IMBALANCED_FILE, vocab)
    assert tuple(r.pair_id for r in balanced.records) == split.balanced
    assert tuple(r.pair_id for r in imbalanced.records) == split.imbalanced
    assert balanced.reference_fingerprint == "ref"

    manifest = json.loads((tmp_path / SPLIT_MANIFEST_FILE).read_text(encoding="utf-8"))
    assert manifest["counts"][SAFE] == {"balanced": 1, "imbalanced": 1}
    assert manifest["counts"][UNSAFE] == {"balanced": 2, "imbalanced": 1}
