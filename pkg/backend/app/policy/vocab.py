from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


MAX_VOCAB_SIZE = 256


class InvalidTokenError(ValueError):
    """A token id or symbol that is not part of the vocabulary."""


@dataclass(frozen=True)
class Vocabulary:
    """
    Ordered symbolic vocabulary.

    - symbols: distinct token symbols, index = token id
    - bos_id: reserved begin-of-sequence token; never part of a response
    """

    symbols: tuple[str, ...]
    bos_id: int = 0

    def __post_init__(self) -> None:
        if not (2 <= len(self.symbols) <= MAX_VOCAB_SIZE):
            raise ValueError(f"vocabulary size must be in [2, {MAX_VOCAB_SIZE}]")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if any((not s) or any(c.isspace() for c in s) for s in self.symbols):
            raise ValueError("vocabulary symbols must be nonempty and contain no whitespace")
        if not (0 <= self.bos_id < len(self.symbols)):
            raise ValueError("bos_id must index a vocabulary symbol")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def bos_symbol(self) -> str:
        return self.symbols[self.bos_id]

    def content_ids(self) -> tuple[int, ...]:
        """Every id that may appear inside a query or response."""
        return tuple(i for i in range(self.size) if i != self.bos_id)

    def encode(self, text: str) -> TokenSequence:
        """Whitespace-separated symbols -> TokenSequence."""
        index = {s: i for i, s in enumerate(self.symbols)}
        ids: list[int] = []
        for sym in text.split():
            if sym not in index:
                raise InvalidTokenError(f"unknown token symbol {sym!r}")
            if index[sym] == self.bos_id:
                raise InvalidTokenError(f"{sym!r} is the reserved begin-of-sequence symbol")
            ids.append(index[sym])
        return TokenSequence(tuple(ids))

    def decode(self, seq: TokenSequence) -> str:
        for i in seq.ids:
            if not (0 <= i < self.size):
                raise InvalidTokenError(f"token id {i} outside vocabulary of size {self.size}")
        return " ".join(self.symbols[i] for i in seq.ids)


@dataclass(frozen=True)
class TokenSequence:
    """
    Token ids. Emptiness is allowed as a value (the empty query); operations that need a
    nonempty sequence check it themselves.
    """

    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(i < 0 for i in self.ids):
            raise InvalidTokenError("token ids must be >= 0")

    @classmethod
    def of(cls, ids: Iterable[int]) -> TokenSequence:
        return cls(tuple(int(i) for i in ids))

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: TokenSequence) -> TokenSequence:
        return TokenSequence(self.ids + other.ids)

    def prefix(self, n: int) -> TokenSequence:
        return TokenSequence(self.ids[:n])


def with_bos(bos_id: int, seq: TokenSequence | Sequence[int] = ()) -> TokenSequence:
    """bos_id ⊕ seq, the context every model call starts from."""
    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
    return TokenSequence((bos_id, *ids))
