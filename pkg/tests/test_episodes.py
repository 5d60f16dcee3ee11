import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geomicl.data import ClassGroup, DatasetRecord, SyntheticSpec, synth_generate
from geomicl.episodes import (
    EpisodeError,
    EpisodeShape,
    assemble_sequences,
    flip_count,
    perturb_context_labels,
    sample_episode,
)


def _ds(n_classes, n_per, ident="d", dim=4):
    return DatasetRecord(
        ident, "D", dim,
        tuple(ClassGroup(f"c{i}", np.random.default_rng(i).standard_normal((n_per, dim)).astype(np.float32))
              for i in range(n_classes)),
    )


def _check_episode(ep, shape):
    assert ep.context_x.shape[0] == shape.n_context
    assert np.all(np.bincount(ep.context_y, minlength=shape.n_ways) == shape.k_shots)
    assert ep.query_y.shape == (shape.n_queries,)
    assert not set(ep.context_src) & set(ep.query_src)


def test_single_mode_counts():
    shape = EpisodeShape(5, 5, 10)
    ep = sample_episode([_ds(8, 20)], "single", shape, rng=0)
    _check_episode(ep, shape)
    assert len({s[0] for s in ep.context_src + ep.query_src}) == 1


def test_merged_spans_both_datasets():
    pool = [_ds(3, 20, "a"), _ds(3, 20, "b")]
    for seed in range(20):
        ep = sample_episode(pool, "merged", EpisodeShape(5, 5, 10), rng=seed)
        assert {s[0] for s in ep.context_src} == {"a", "b"}


def test_same_seed_identical():
    pool = [_ds(8, 20)]
    a = sample_episode(pool, rng=[3, 0, 1])
    b = sample_episode(pool, rng=[3, 0, 1])
    assert a.to_json(include_features=True) == b.to_json(include_features=True)


def test_insufficient_pool():
    with pytest.raises(EpisodeError, match="insufficient classes/samples"):
        sample_episode([_ds(4, 20)], shape=EpisodeShape(5, 5, 10), rng=0)
    with pytest.raises(EpisodeError, match="insufficient classes/samples"):
        sample_episode([_ds(8, 5)], shape=EpisodeShape(5, 5, 10), rng=0)


@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 4), st.integers(1, 6))
def test_episode_invariants(seed, n, k, q):
    shape = EpisodeShape(n, k, q)
    pool = [_ds(6, 20, "a"), _ds(7, 15, "b")]
    for mode in ("single", "merged"):
        _check_episode(sample_episode(pool, mode, shape, rng=seed), shape)


def test_balanced_queries():
    ep = sample_episode([_ds(8, 20)], shape=EpisodeShape(5, 5, 10), rng=0, balance_queries=True)
    assert np.all(np.bincount(ep.query_y, minlength=5) == 2)


def test_label_bijection_uniform():
    ds = _ds(5, 10)
    counts = Counter()
    for seed in range(10_000):
        ep = sample_episode([ds], shape=EpisodeShape(5, 1, 1), rng=seed)
        for (_, cid, _), y in zip(ep.context_src, ep.context_y):
            counts[(cid, int(y))] += 1
    freq = np.array([counts[(f"c{c}", y)] for c in range(5) for y in range(5)]) / 10_000
    assert np.all(np.abs(freq - 0.2) <= 0.02)


def test_split_restricts_classes(small_registry):
    ds = small_registry[0]
    for seed in range(20):
        ep = sample_episode([ds], shape=EpisodeShape(5, 2, 3), split="train", rng=seed, min_eval=3)
        assert {s[1] for s in ep.context_src} <= {"c000", "c001", "c002", "c003", "c004"}


def test_assemble_shapes():
    ep = sample_episode([_ds(8, 20, dim=16)], shape=EpisodeShape(5, 5, 3), rng=1)
    emb = np.random.default_rng(0).standard_normal((5, 4))
    unk = np.arange(4.0)
    batch = assemble_sequences(ep, emb, unk)
    assert batch.tokens.shape == (3, 26, 20)
    np.testing.assert_array_equal(batch.tokens[:, -1, 16:], np.broadcast_to(unk, (3, 4)))
    np.testing.assert_array_equal(batch.tokens[0, :25, 16:], emb[ep.context_y])
    one = sample_episode([_ds(8, 20, dim=16)], shape=EpisodeShape(5, 5, 1), rng=1)
    assert assemble_sequences(one, emb, unk).tokens.shape[0] == 1


def test_assemble_full_width():
    ep = sample_episode([_ds(6, 8, dim=2048)], shape=EpisodeShape(5, 1, 1), rng=0)
    batch = assemble_sequences(ep, np.zeros((5, 256)), np.zeros(256))
    assert batch.tokens.shape[-1] == 2304


def test_assemble_dimension_mismatch():
    ep = sample_episode([_ds(8, 20)], rng=0)
    with pytest.raises(EpisodeError, match="dimension mismatch"):
        assemble_sequences(ep, np.zeros((5, 4)), np.zeros(3))


@pytest.mark.parametrize("frac,flips", [(1.0, 0), (0.9, 2), (0.75, 6), (0.5, 12)])
def test_perturb_counts(frac, flips):
    ep = sample_episode([_ds(8, 20)], shape=EpisodeShape(5, 5, 10), rng=4)
    for seed in range(50):
        noisy = perturb_context_labels(ep, frac, rng=seed)
        assert flip_count(25, frac) == flips
        assert int(np.sum(noisy.context_y != ep.context_y)) == flips
        np.testing.assert_array_equal(noisy.query_y, ep.query_y)
    if flips == 0:
        assert perturb_context_labels(ep, 1.0, rng=0) is ep


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_perturb_property(frac, seed):
    ep = sample_episode([_ds(8, 20)], shape=EpisodeShape(5, 5, 4), rng=seed)
    noisy = perturb_context_labels(ep, frac, rng=seed)
    assert int(np.sum(noisy.context_y != ep.context_y)) == flip_count(25, frac)
    assert noisy.context_y.min() >= 0 and noisy.context_y.max() < 5


def test_episode_json_debug():
    ep = sample_episode([_ds(8, 20)], rng=0)
    doc = json.loads(ep.to_json())
    assert len(doc["context"]) == 25 and "x" not in doc["context"][0]
