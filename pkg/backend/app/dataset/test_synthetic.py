from __future__ import annotations

import numpy as np
import pytest

from app.dataset.pairs import SAFE, UNSAFE, check_unique_ids, longest_example
from app.dataset.synthetic import default_vocabulary, generate_synthetic
from app.information.entropy import annotate_dataset
from app.policy.model import ModelConfig, ReferenceSnapshot, init_params
from app.policy.vocab import Vocabulary


def test_empty_corpus() -> None:
    assert generate_synthetic(0, 0, 0, default_vocabulary()) == []


def test_same_seed_same_corpus() -> None:
    vocab = default_vocabulary()
    assert generate_synthetic(3, 20, 20, vocab) == generate_synthetic(3, 20, 20, vocab)
    assert generate_synthetic(3, 20, 20, vocab) != generate_synthetic(4, 20, 20, vocab)


def test_counts_labels_and_shape() -> None:
    vocab = default_vocabulary()
    pairs = generate_synthetic(0, 30, 12, vocab)
    assert sum(1 for p in pairs if p.safety_label == SAFE) == 30
    assert sum(1 for p in pairs if p.safety_label == UNSAFE) == 12
    check_unique_ids(pairs)
    assert longest_example(pairs) <= 10
    for p in pairs:
        for seq in (p.query, p.preferred, p.dispreferred):
            assert vocab.bos_id not in seq.ids
            assert all(0 <= i < vocab.size for i in seq.ids)


def test_query_families_are_disjoint() -> None:
    pairs = generate_synthetic(1, 50, 50, default_vocabulary())
    safe_tokens = {t for p in pairs if p.safety_label == SAFE for t in p.query.ids}
    unsafe_tokens = {t for p in pairs if p.safety_label == UNSAFE for t in p.query.ids}
    assert safe_tokens.isdisjoint(unsafe_tokens)


def test_vocabulary_too_small() -> None:
    small = Vocabulary(symbols=("<s>", "a", "b", "c", "d", "e", "f"))
    with pytest.raises(ValueError):
        generate_synthetic(0, 1, 1, small)
    with pytest.raises(ValueError):
        generate_synthetic(0, -1, 1, default_vocabulary())


def test_annotated_corpus_has_gap_spread() -> None:
    vocab = default_vocabulary()
    pairs = generate_synthetic(0, 100, 100, vocab)
    config = ModelConfig(
        vocab_size=vocab.size, embed_dim=4, context_window=longest_example(pairs), hidden_dim=8, seed=0
    )
    ref = ReferenceSnapshot.freeze(init_params(config))
    gaps = np.array([a.gap for _, a in annotate_dataset(ref, pairs).items])
    assert gaps.var() > 0
