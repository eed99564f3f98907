from __future__ import annotations

import math
import random

import pytest

from app.dataset.pairs import SAFE, PreferencePair, longest_example
from app.dataset.synthetic import default_vocabulary, generate_synthetic
from app.information.entropy import (
    AnnotationError,
    MiAnnotation,
    annotate_dataset,
    conditional_entropy,
    mutual_information,
    prior_entropy,
)
from app.policy.model import ModelConfig, PolicyParameters, ReferenceSnapshot, init_params, next_token_distribution
from app.policy.vocab import TokenSequence, with_bos


def _model(seed: int, vocab_size: int, window: int) -> PolicyParameters:
    return init_params(ModelConfig(vocab_size=vocab_size, embed_dim=3, context_window=window, hidden_dim=4, seed=seed))


def _with_projection(p: PolicyParameters, bias: list[float]) -> PolicyParameters:
    values = p.values.clone()
    sl = p.layout.slices()
    values[sl["projection"]] = 0.0
    values[sl["projection_bias"]] = values.new_tensor(bias)
    return p.with_values(values)


def _seq(rng: random.Random, vocab_size: int, n: int) -> TokenSequence:
    return TokenSequence.of(rng.randrange(1, vocab_size) for _ in range(n))


def _naive_entropy(model: PolicyParameters, x: TokenSequence, y: TokenSequence) -> float:
    total = 0.0
    for t in range(y.length):
        context = with_bos(model.config.bos_id, x) + y.prefix(t)
        dist = next_token_distribution(model, context).tolist()
        total += -sum(p * math.log(p) for p in dist if p > 0)
    return total / y.length


def test_uniform_model_gives_log_v() -> None:
    model = _with_projection(_model(0, 6, 8), [0.0] * 6)
    y = TokenSequence.of([1, 2, 3])
    x = TokenSequence.of([4, 5])
    assert prior_entropy(model, y) == pytest.approx(math.log(6), abs=1e-12)
    assert conditional_entropy(model, x, y) == pytest.approx(math.log(6), abs=1e-12)
    assert mutual_information(model, x, y) == pytest.approx(0.0, abs=1e-12)


def test_point_mass_model_has_zero_entropy() -> None:
    model = _with_projection(_model(0, 5, 6), [0.0, 0.0, 1000.0, 0.0, 0.0])
    assert prior_entropy(model, TokenSequence.of([1, 2])) < 1e-9
    assert conditional_entropy(model, TokenSequence.of([3]), TokenSequence.of([1, 2])) < 1e-9


@pytest.mark.parametrize("seed", range(25))
def test_entropies_match_naive_double_sum(seed: int) -> None:
    rng = random.Random(seed)
    for case in range(20):
        vocab_size = rng.randint(2, 8)
        y_len = rng.randint(1, 5)
        x_len = rng.randint(0, 3)
        model = _model(seed * 100 + case, vocab_size, 1 + x_len + y_len)
        x = _seq(rng, vocab_size, x_len)
        y = _seq(rng, vocab_size, y_len)

        h_prior = prior_entropy(model, y)
        h_cond = conditional_entropy(model, x, y)
        assert h_prior == pytest.approx(_naive_entropy(model, TokenSequence(()), y), abs=1e-10)
        assert h_cond == pytest.approx(_naive_entropy(model, x, y), abs=1e-10)
        for h in (h_prior, h_cond):
            assert -1e-9 <= h <= math.log(vocab_size) + 1e-9
        assert mutual_information(model, x, y) == pytest.approx(h_prior - h_cond, abs=1e-10)


def test_empty_query_gives_exactly_zero_mi() -> None:
    rng = random.Random(3)
    for seed in range(50):
        model = _model(seed, 7, 6)
        y = _seq(rng, 7, rng.randint(1, 5))
        assert conditional_entropy(model, TokenSequence(()), y) == prior_entropy(model, y)
        assert mutual_information(model, TokenSequence(()), y) == 0.0


def test_annotation_gap_invariant() -> None:
    a = MiAnnotation.from_values(0.25, 0.75)
    assert a.gap == 0.5
    assert not a.preferred_higher
    with pytest.raises(ValueError):
        MiAnnotation(mi_preferred=0.25, mi_dispreferred=0.75, gap=0.4)


def _corpus(n: int = 10) -> tuple[ReferenceSnapshot, list[PreferencePair]]:
    vocab = default_vocabulary()
    pairs = generate_synthetic(0, n, n, vocab)
    ref = ReferenceSnapshot.freeze(_model(5, vocab.size, longest_example(pairs)))
    return ref, pairs


def test_annotate_empty_list() -> None:
    ref, _ = _corpus(1)
    batch = annotate_dataset(ref, [])
    assert batch.items == []
    assert batch.timing.pairs == 0
    assert batch.timing.seconds_per_pair == 0.0


def test_annotate_matches_per_pair_calls() -> None:
    ref, pairs = _corpus(10)
    batch = annotate_dataset(ref, pairs)
    assert len(batch.items) == 20
    assert batch.timing.pairs == 20
    for (pair, ann), original in zip(batch.items, pairs):
        assert pair is original
        assert ann.mi_preferred == mutual_information(ref, pair.query, pair.preferred)
        assert ann.mi_dispreferred == mutual_information(ref, pair.query, pair.dispreferred)


def test_annotate_is_a_pure_map() -> None:
    ref, pairs = _corpus(6)
    forward = annotate_dataset(ref, pairs).items
    shuffled = list(reversed(pairs)) + [pairs[0]]
    backward = annotate_dataset(ref, shuffled).items
    assert [a for _, a in backward[:-1]] == [a for _, a in reversed(forward)]
    assert backward[-1][1] == forward[0][1]


def test_annotate_independent_of_workers() -> None:
    ref, pairs = _corpus(8)
    serial = annotate_dataset(ref, pairs, workers=1).items
    threaded = annotate_dataset(ref, pairs, workers=4).items
    assert [a for _, a in serial] == [a for _, a in threaded]


def test_annotate_reports_failing_index() -> None:
    ref, pairs = _corpus(3)
    too_long = PreferencePair(
        query=TokenSequence.of([1] * 20),
        preferred=TokenSequence.of([2]),
        dispreferred=TokenSequence.of([3]),
        safety_label=SAFE,
        pair_id="long",
    )
    with pytest.raises(AnnotationError) as exc:
        annotate_dataset(ref, [pairs[0], pairs[1], too_long, pairs[2]])
    assert exc.value.index == 2
