import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geomicl.data import ClassGroup, DatasetRecord, SyntheticSpec, synth_generate
from geomicl.episodes import EpisodeError, EpisodeShape
from geomicl.unsup import (
    DEFAULT_AUGMENTATIONS,
    AugmentationSpec,
    MixupConfig,
    mixup_query,
    sample_lambda,
    sample_unsupervised_episode,
)


def test_lambda_mean_truncated():
    rng = np.random.default_rng(0)
    cfg = MixupConfig()
    draws = np.array([sample_lambda(cfg, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.25) < 0.01
    assert draws.min() > 0 and draws.max() < 0.5


def test_lambda_mean_full_range():
    rng = np.random.default_rng(1)
    cfg = MixupConfig(lambda_range=(0.0, 1.0))
    draws = np.array([sample_lambda(cfg, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01


def test_lambda_pathological_range():
    with pytest.raises(ValueError):
        sample_lambda(MixupConfig(alpha=50, beta=1, lambda_range=(0.0, 0.01)), 0)


def test_mixup_examples():
    np.testing.assert_allclose(mixup_query([4, 8], [0, 0], 0.25), [3, 6])
    np.testing.assert_allclose(mixup_query([1.5, -2], [9, 9], 0.0), [1.5, -2])
    np.testing.assert_allclose(mixup_query([0, 10], [10, 0], 0.4), [4, 6])
    with pytest.raises(ValueError, match="length mismatch"):
        mixup_query([1, 2], [1, 2, 3], 0.1)


def test_augmentation_validation():
    with pytest.raises(ValueError):
        AugmentationSpec("blur", 0.1)
    with pytest.raises(ValueError):
        AugmentationSpec("coordinate_mask", 1.0)
    with pytest.raises(ValueError):
        AugmentationSpec("gaussian_jitter", -1)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(SyntheticSpec(1, 1, 6, samples_per_class=10, seed=4))[0]


def test_episode_structure(ds):
    ep = sample_unsupervised_episode(ds, EpisodeShape(5, 5, 10), rng=0)
    assert ep.context_x.shape[0] == 25 and ep.query_x.shape[0] == 10
    anchors = set(ep.context_src)
    assert len(anchors) == 5
    for a in anchors:
        assert sum(s == a for s in ep.context_src) == 5
    # each pseudo-label maps to one source sample
    for lab in range(5):
        assert len({s for s, y in zip(ep.context_src, ep.context_y) if y == lab}) == 1
    assert np.all((ep.lambdas > 0) & (ep.lambdas < 0.5))


def test_identity_views_and_zero_lambda(ds):
    augs = tuple(AugmentationSpec(k, 0.0) for k in ("gaussian_jitter", "coordinate_mask", "random_scale", "random_rotation_2plane", "gaussian_jitter"))
    ep = sample_unsupervised_episode(ds, EpisodeShape(5, 5, 10), augs, rng=3, lam=0.0)
    anchor = {int(y): x for x, y in zip(ep.context_x, ep.context_y)}
    for x, y in zip(ep.query_x, ep.query_y):
        np.testing.assert_array_equal(x, anchor[int(y)])


def test_same_seed_identical(ds):
    a = sample_unsupervised_episode(ds, rng=[1, 2])
    b = sample_unsupervised_episode(ds, rng=[1, 2])
    assert a.to_json(include_features=True) == b.to_json(include_features=True)
    np.testing.assert_array_equal(a.lambdas, b.lambdas)


def test_errors():
    tiny = DatasetRecord("t", "D", 2, (ClassGroup("a", np.zeros((5, 2), dtype=np.float32)),))
    with pytest.raises(EpisodeError, match="insufficient samples"):
        sample_unsupervised_episode(tiny, EpisodeShape(5, 1, 1), rng=0)
    big = synth_generate(SyntheticSpec(1, 1, 3))[0]
    with pytest.raises(EpisodeError, match="insufficient augmentations"):
        sample_unsupervised_episode(big, EpisodeShape(5, 5, 1), DEFAULT_AUGMENTATIONS[:3], rng=0)


@given(st.integers(0, 2**32 - 1))
def test_lambda_always_in_range(seed):
    ds = synth_generate(SyntheticSpec(1, 1, 3, samples_per_class=4))[0]
    ep = sample_unsupervised_episode(ds, EpisodeShape(5, 2, 6), rng=seed)
    assert np.all((ep.lambdas > 0) & (ep.lambdas < 0.5))


def test_nearest_neighbor_solvable():
    # one sample per class keeps every anchor in its own cluster; anchors sharing a
    # class would be near duplicates and make their pseudo-labels indistinguishable
    ds = synth_generate(SyntheticSpec(1, 1, 60, samples_per_class=1, class_separation=6.0, noise_scale=0.5, seed=9))[0]
    augs = tuple(AugmentationSpec("gaussian_jitter", 0.0) for _ in range(5))
    correct = total = 0
    for seed in range(200):
        ep = sample_unsupervised_episode(ds, EpisodeShape(5, 5, 10), augs, rng=seed, lam=0.49)
        d = ((ep.query_x[:, None, :] - ep.context_x[None]) ** 2).sum(-1)
        pred = ep.context_y[d.argmin(1)]
        correct += int(np.sum(pred == ep.query_y))
        total += len(pred)
    assert correct / total > 0.9
