from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.dataset.pairs import SAFE, UNSAFE, PreferencePair
from app.policy.vocab import TokenSequence, Vocabulary


MIN_GRAMMAR_VOCAB = 8
CONTRAST_PROBABILITY = 0.5


def default_vocabulary(size: int = 16) -> Vocabulary:
    """`<s>` followed by `t01`, `t02`, ... up to `size` symbols."""
    if size < 2:
        raise ValueError("vocabulary size must be >= 2")
    return Vocabulary(symbols=("<s>", *(f"t{i:02d}" for i in range(1, size))), bos_id=0)


@dataclass(frozen=True)
class _Grammar:
    """
    Token families and templates over the content ids of a vocabulary.

    Queries come from one of two disjoint families (safe / unsafe). Response templates:
    - echo: every query token mapped through a fixed rotation, then an end marker
    - refusal: two fixed markers then the first query token rotated
    - mixed: rotated first/last query tokens interleaved with random tokens
    - noise: uniformly random tokens
    """

    content: tuple[int, ...]
    safe_family: tuple[int, ...]
    unsafe_family: tuple[int, ...]

    @classmethod
    def for_vocabulary(cls, vocab: Vocabulary) -> _Grammar:
        if vocab.size < MIN_GRAMMAR_VOCAB:
            raise ValueError(f"synthetic grammar needs a vocabulary of at least {MIN_GRAMMAR_VOCAB} symbols")
        content = vocab.content_ids()
        half = len(content) // 2
        return cls(content=content, safe_family=content[:half], unsafe_family=content[half:])

    def rotate(self, token: int) -> int:
        n = len(self.content)
        return self.content[(self.content.index(token) + n // 2 + 1) % n]

    def query(self, rng: np.random.Generator, family: tuple[int, ...]) -> list[int]:
        n = int(rng.integers(2, 4))
        return [int(t) for t in rng.choice(family, size=n)]

    def echo(self, q: list[int]) -> list[int]:
        return [self.rotate(t) for t in q] + [self.content[0]]

    def refusal(self, q: list[int]) -> list[int]:
        return [self.content[1], self.content[2], self.rotate(q[0])]

    def mixed(self, rng: np.random.Generator, q: list[int]) -> list[int]:
        return [self.rotate(q[0]), self._draw(rng), self.rotate(q[-1]), self._draw(rng)]

    def noise(self, rng: np.random.Generator) -> list[int]:
        n = int(rng.integers(3, 5))
        return [self._draw(rng) for _ in range(n)]

    def perturb_tail(self, rng: np.random.Generator, r: list[int]) -> list[int]:
        """Replace one token in the second half of `r` with a different token."""
        pos = int(rng.integers(len(r) // 2, len(r)))
        choices = [t for t in self.content if t != r[pos]]
        out = list(r)
        out[pos] = int(rng.choice(choices))
        return out

    def _draw(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.content))


def _unsafe_pair(g: _Grammar, rng: np.random.Generator) -> tuple[list[int], list[int], list[int]]:
    q = g.query(rng, g.unsafe_family)
    chosen = g.refusal(q)
    if rng.random() < CONTRAST_PROBABILITY:
        rejected = g.noise(rng)
        while rejected == chosen:
            rejected = g.noise(rng)
    else:
        rejected = g.perturb_tail(rng, chosen)
    return q, chosen, rejected


def _safe_pair(g: _Grammar, rng: np.random.Generator) -> tuple[list[int], list[int], list[int]]:
    q = g.query(rng, g.safe_family)
    if rng.random() < CONTRAST_PROBABILITY:
        chosen = g.mixed(rng, q)
        rejected = g.echo(q)
        while rejected == chosen:
            chosen = g.mixed(rng, q)
    else:
        chosen = g.echo(q)
        rejected = g.perturb_tail(rng, chosen)
    return q, chosen, rejected


def generate_synthetic(seed: int, n_safe: int, n_unsafe: int, vocab: Vocabulary) -> list[PreferencePair]:
    """
    Deterministic desk-scale corpus: n_safe safe-query pairs followed by n_unsafe
    unsafe-query pairs. About half of each label are contrast pairs (structurally different
    responses), the rest near-duplicates differing in one late token, so the MI gap
    distribution has real spread.
    """
    if n_safe < 0 or n_unsafe < 0:
        raise ValueError("n_safe and n_unsafe must be >= 0")
    g = _Grammar.for_vocabulary(vocab)
    rng = np.random.default_rng(seed)

    pairs: list[PreferencePair] = []
    for label, count, make in ((SAFE, n_safe, _safe_pair), (UNSAFE, n_unsafe, _unsafe_pair)):
        for _ in range(count):
            q, chosen, rejected = make(g, rng)
            pairs.append(
                PreferencePair(
                    query=TokenSequence.of(q),
                    preferred=TokenSequence.of(chosen),
                    dispreferred=TokenSequence.of(rejected),
                    safety_label=label,
                    pair_id=f"syn-{len(pairs):05d}",
                )
            )
    return pairs
