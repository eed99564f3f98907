from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from pydantic import BaseModel, ConfigDict, Field, StrictBool, ValidationError

from app.policy.vocab import TokenSequence, Vocabulary


logger = logging.getLogger(__name__)

SAFE = "safe"
UNSAFE = "unsafe"
SAFETY_LABELS: tuple[str, ...] = (SAFE, UNSAFE)


class DatasetError(ValueError):
    """Malformed or inconsistent preference data. `line` is 1-based when known."""

    def __init__(self, message: str, *, line: int | None = None, index: int | None = None) -> None:
        super().__init__(message)
        self.line = line
        self.index = index


@dataclass(frozen=True)
class PreferencePair:
    """
    One (x, y_w, y_l) triple.

    - query: x
    - preferred: y_w
    - dispreferred: y_l
    - safety_label: "safe" | "unsafe" (the kind of query)
    """

    query: TokenSequence
    preferred: TokenSequence
    dispreferred: TokenSequence
    safety_label: str
    pair_id: str

    def __post_init__(self) -> None:
        if self.query.length == 0 or self.preferred.length == 0 or self.dispreferred.length == 0:
            raise ValueError("query, preferred and dispreferred must be nonempty")
        if self.preferred == self.dispreferred:
            raise ValueError("preferred and dispreferred responses must differ")
        if self.safety_label not in SAFETY_LABELS:
            raise ValueError("safety_label must be 'safe' or 'unsafe'")
        if not self.pair_id:
            raise ValueError("pair_id must be nonempty")

    @property
    def is_safe(self) -> bool:
        return self.safety_label == SAFE


class PreferenceRecordDTO(BaseModel):
    """One JSONL line. The mi_* / lambda_* fields are filled in by annotation."""

    model_config = ConfigDict(extra="ignore")

    id: str | int | None = None
    query: str
    chosen: str
    rejected: str
    is_safe_query: StrictBool
    mi_chosen: float | None = None
    mi_rejected: float | None = None
    lambda_w: float | None = None
    lambda_l: float | None = None


class VocabularyDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    symbols: list[str] = Field(..., min_length=2)
    bos_id: int = Field(default=0, ge=0)


def pair_to_record(pair: PreferencePair, vocab: Vocabulary) -> PreferenceRecordDTO:
    return PreferenceRecordDTO(
        id=pair.pair_id,
        query=vocab.decode(pair.query),
        chosen=vocab.decode(pair.preferred),
        rejected=vocab.decode(pair.dispreferred),
        is_safe_query=pair.is_safe,
    )


def record_to_pair(rec: PreferenceRecordDTO, vocab: Vocabulary, *, default_id: str) -> PreferencePair:
    return PreferencePair(
        query=vocab.encode(rec.query),
        preferred=vocab.encode(rec.chosen),
        dispreferred=vocab.encode(rec.rejected),
        safety_label=SAFE if rec.is_safe_query else UNSAFE,
        pair_id=str(rec.id) if rec.id is not None else default_id,
    )


def iter_records(path: Path) -> Iterator[tuple[int, PreferenceRecordDTO]]:
    """(line number, record) for every nonblank line."""
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, PreferenceRecordDTO.model_validate_json(line)
            except ValidationError as e:
                raise DatasetError(f"{path}:{lineno}: malformed record: {_brief(e)}", line=lineno) from e


def _brief(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err.get("loc", ())) or "line"
        parts.append(f"{loc}: {err.get('msg', 'invalid')}")
    return "; ".join(parts)


def load_records(path: Path, vocab: Vocabulary) -> list[tuple[PreferencePair, PreferenceRecordDTO]]:
    out: list[tuple[PreferencePair, PreferenceRecordDTO]] = []
    seen: set[str] = set()
    for lineno, rec in iter_records(path):
        try:
            pair = record_to_pair(rec, vocab, default_id=str(lineno))
        except ValueError as e:
            raise DatasetError(f"{path}:{lineno}: {e}", line=lineno) from e
        if pair.pair_id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate pair_id {pair.pair_id!r}", line=lineno)
        seen.add(pair.pair_id)
        out.append((pair, rec))
    return out


def load_jsonl(path: Path, vocab: Vocabulary) -> list[PreferencePair]:
    """Read preference pairs in file order; pair_id defaults to the line number."""
    pairs = [pair for pair, _ in load_records(path, vocab)]
    logger.info("loaded %d preference pairs from %s", len(pairs), path)
    return pairs


def write_records(path: Path, records: Iterable[PreferenceRecordDTO]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.model_dump_json(exclude_none=True) + "\n")


def save_jsonl(path: Path, pairs: Iterable[PreferencePair], vocab: Vocabulary) -> None:
    write_records(path, (pair_to_record(p, vocab) for p in pairs))


def check_unique_ids(pairs: Iterable[PreferencePair]) -> None:
    seen: set[str] = set()
    for i, p in enumerate(pairs):
        if p.pair_id in seen:
            raise DatasetError(f"duplicate pair_id {p.pair_id!r}", index=i)
        seen.add(p.pair_id)


def longest_example(pairs: Iterable[PreferencePair]) -> int:
    """Longest bos ⊕ query ⊕ response, the context_window a model needs for `pairs`."""
    return max(
        (1 + p.query.length + max(p.preferred.length, p.dispreferred.length) for p in pairs),
        default=0,
    )


def save_vocabulary(path: Path, vocab: Vocabulary) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    dto = VocabularyDTO(symbols=list(vocab.symbols), bos_id=vocab.bos_id)
    path.write_text(dto.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_vocabulary(path: Path) -> Vocabulary:
    try:
        dto = VocabularyDTO.model_validate_json(path.read_text(encoding="utf-8"))
        return Vocabulary(symbols=tuple(dto.symbols), bos_id=dto.bos_id)
    except ValueError as e:
        raise DatasetError(f"{path}: invalid vocabulary: {e}") from e
