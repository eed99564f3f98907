from __future__ import annotations

from pathlib import Path

import pytest

from app.dataset.pairs import (
    SAFE,
    UNSAFE,
    DatasetError,
    PreferencePair,
    load_jsonl,
    load_vocabulary,
    longest_example,
    save_jsonl,
    save_vocabulary,
)
from app.policy.vocab import TokenSequence, Vocabulary


VOCAB = Vocabulary(symbols=("<s>", "a", "b", "c", "d"))


def _write(path: Path, *lines: str) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_empty_file_gives_empty_list(tmp_path: Path) -> None:
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    assert load_jsonl(path, VOCAB) == []


def test_fields_map_and_ids_default_to_line_number(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "d.jsonl",
        '{"query": "a b", "chosen": "c", "rejected": "d d", "is_safe_query": true}',
        "",
        '{"id": "x7", "query": "b", "chosen": "a", "rejected": "c", "is_safe_query": false, "extra": 1}',
    )
    pairs = load_jsonl(path, VOCAB)
    assert [p.pair_id for p in pairs] == ["1", "x7"]
    assert pairs[0].query.ids == (1, 2)
    assert pairs[0].dispreferred.ids == (4, 4)
    assert pairs[0].safety_label == SAFE
    assert pairs[1].safety_label == UNSAFE


def test_missing_field_names_the_line(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "d.jsonl",
        '{"query": "a", "chosen": "b", "rejected": "c", "is_safe_query": true}',
        '{"query": "a", "chosen": "b", "is_safe_query": true}',
    )
    with pytest.raises(DatasetError) as exc:
        load_jsonl(path, VOCAB)
    assert exc.value.line == 2
    assert "rejected" in str(exc.value)


@pytest.mark.parametrize(
    "line",
    [
        '{"query": "a", "chosen": "b", "rejected": "zzz", "is_safe_query": true}',
        '{"query": "a", "chosen": "b", "rejected": "b", "is_safe_query": true}',
        '{"query": "", "chosen": "b", "rejected": "c", "is_safe_query": true}',
        '{"query": "a", "chosen": "b", "rejected": "c", "is_safe_query": "yes"}',
        "not json",
    ],
)
def test_bad_records_rejected(tmp_path: Path, line: str) -> None:
    path = _write(tmp_path / "d.jsonl", line)
    with pytest.raises(DatasetError) as exc:
        load_jsonl(path, VOCAB)
    assert exc.value.line == 1


def test_duplicate_explicit_id_rejected(tmp_path: Path) -> None:
    rec = '{"id": "p", "query": "a", "chosen": "b", "rejected": "c", "is_safe_query": true}'
    path = _write(tmp_path / "d.jsonl", rec, rec)
    with pytest.raises(DatasetError) as exc:
        load_jsonl(path, VOCAB)
    assert exc.value.line == 2


def test_save_then_load_round_trip(tmp_path: Path) -> None:
    pairs = [
        PreferencePair(
            query=TokenSequence.of([1, 2]),
            preferred=TokenSequence.of([3]),
            dispreferred=TokenSequence.of([4, 1]),
            safety_label=SAFE if i % 2 else UNSAFE,
            pair_id=f"p{i}",
        )
        for i in range(5)
    ]
    path = tmp_path / "d.jsonl"
    save_jsonl(path, pairs, VOCAB)
    assert load_jsonl(path, VOCAB) == pairs
    assert longest_example(pairs) == 1 + 2 + 2


def test_pair_invariants() -> None:
    with pytest.raises(ValueError):
        PreferencePair(
            query=TokenSequence.of([1]),
            preferred=TokenSequence.of([2]),
            dispreferred=TokenSequence.of([2]),
            safety_label=SAFE,
            pair_id="p",
        )
    with pytest.raises(ValueError):
        PreferencePair(
            query=TokenSequence.of([1]),
            preferred=TokenSequence.of([2]),
            dispreferred=TokenSequence.of([3]),
            safety_label="maybe",
            pair_id="p",
        )


def test_vocabulary_file_round_trip(tmp_path: Path) -> None:
    save_vocabulary(tmp_path / "vocab.json", VOCAB)
    assert load_vocabulary(tmp_path / "vocab.json") == VOCAB
    (tmp_path / "bad.json").write_text('{"symbols": ["a", "a"]}', encoding="utf-8")
    with pytest.raises(DatasetError):
        load_vocabulary(tmp_path / "bad.json")
