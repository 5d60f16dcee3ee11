"""Pseudo-labelled episodes from unlabelled data.

N anchors are drawn from one dataset; each anchor yields K augmented context
views sharing its pseudo-label.  Queries are augmented anchors mixed with an
external sample ``z`` as ``lam * z + (1 - lam) * anchor_view`` where ``lam``
follows a Beta law truncated to ``lambda_range``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .data import DatasetRecord
from .episodes import Episode, EpisodeError, EpisodeShape, make_rng

AUGMENTATION_KINDS = ("gaussian_jitter", "coordinate_mask", "random_scale", "random_rotation_2plane")


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    strength: float = 0.0

    def __post_init__(self):
        if self.kind not in AUGMENTATION_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.strength < 0:
            raise ValueError("augmentation strength must be >= 0")
        if self.kind == "coordinate_mask" and self.strength >= 1:
            raise ValueError("mask fraction must lie in [0, 1)")

    def apply(self, x: np.ndarray, rng) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        s = self.strength
        if self.kind == "gaussian_jitter":
            return (x + s * rng.standard_normal(x.shape)).astype(np.float32)
        if self.kind == "coordinate_mask":
            n_mask = int(np.floor(s * x.shape[-1]))
            out = x.copy()
            if n_mask:
                out[rng.choice(x.shape[-1], size=n_mask, replace=False)] = 0.0
            return out
        if self.kind == "random_scale":
            return (x * np.exp(s * rng.standard_normal())).astype(np.float32)
        # planar rotation in a random coordinate pair
        i, j = rng.choice(x.shape[-1], size=2, replace=False)
        theta = rng.uniform(-s, s) if s > 0 else 0.0
        c, sn = np.cos(theta), np.sin(theta)
        out = x.copy()
        out[i] = c * x[i] - sn * x[j]
        out[j] = sn * x[i] + c * x[j]
        return out


DEFAULT_AUGMENTATIONS = (
    AugmentationSpec("gaussian_jitter", 0.3),
    AugmentationSpec("coordinate_mask", 0.1),
    AugmentationSpec("random_scale", 0.1),
    AugmentationSpec("random_rotation_2plane", 0.3),
    AugmentationSpec("gaussian_jitter", 0.15),
    AugmentationSpec("coordinate_mask", 0.2),
)


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_range: tuple[float, float] = (0.0, 0.5)

    def __post_init__(self):
        lo, hi = self.lambda_range
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be > 0")
        if not 0 <= lo < hi <= 1:
            raise ValueError("lambda_range must satisfy 0 <= lo < hi <= 1")

    @functools.cached_property
    def range_mass(self) -> float:
        lo, hi = self.lambda_range
        dist = stats.beta(self.alpha, self.beta)
        return float(dist.cdf(hi) - dist.cdf(lo))


_MIN_RANGE_MASS = 1e-6


def sample_lambda(cfg: MixupConfig, rng=None) -> float:
    """Beta(alpha, beta) conditioned on the open ``lambda_range`` by rejection."""
    rng = make_rng(rng)
    mass = cfg.range_mass
    if mass < _MIN_RANGE_MASS:
        raise ValueError(f"lambda_range carries probability mass {mass:.3g} < {_MIN_RANGE_MASS}")
    lo, hi = cfg.lambda_range
    max_tries = int(50 / mass) + 100
    for _ in range(max_tries):
        lam = float(rng.beta(cfg.alpha, cfg.beta))
        if lo < lam < hi:
            return lam
    raise RuntimeError(f"lambda rejection sampling failed after {max_tries} attempts")


def mixup_query(anchor_aug: np.ndarray, external: np.ndarray, lam: float) -> np.ndarray:
    anchor_aug = np.asarray(anchor_aug)
    external = np.asarray(external)
    if anchor_aug.shape != external.shape:
        raise ValueError(f"length mismatch: {anchor_aug.shape} vs {external.shape}")
    return lam * external + (1.0 - lam) * anchor_aug


def _flat_index(ds: DatasetRecord):
    offsets = np.cumsum([0] + [len(g) for g in ds.classes])
    return offsets


def sample_unsupervised_episode(
    ds: DatasetRecord,
    shape: EpisodeShape = EpisodeShape(),
    augs: Sequence[AugmentationSpec] = DEFAULT_AUGMENTATIONS,
    mix: MixupConfig = MixupConfig(),
    rng=None,
    lam: float | None = None,
) -> Episode:
    """Build a pseudo-labelled episode; class labels of ``ds`` are ignored.

    ``lam`` pins the mixing coefficient instead of drawing it.  The drawn (or
    pinned) coefficients are returned on ``Episode.lambdas``.
    """
    rng = make_rng(rng)
    n = ds.n_samples
    if n < shape.n_ways + 1:
        raise EpisodeError(f"insufficient samples: {ds.id!r} has {n} < {shape.n_ways + 1}")
    if len(augs) < shape.k_shots:
        raise EpisodeError(f"insufficient augmentations: {len(augs)} < K={shape.k_shots}")

    offsets = _flat_index(ds)

    def locate(flat: int):
        c = int(np.searchsorted(offsets, flat, side="right") - 1)
        g = ds.classes[c]
        i = flat - int(offsets[c])
        return g.samples[i], (ds.id, g.class_id, i)

    anchors = rng.choice(n, size=shape.n_ways, replace=False)
    anchor_x, anchor_src = zip(*(locate(int(a)) for a in anchors))

    cx, cy, csrc = [], [], []
    for lab in range(shape.n_ways):
        for k in rng.choice(len(augs), size=shape.k_shots, replace=False):
            cx.append(augs[k].apply(anchor_x[lab], rng))
            cy.append(lab)
            csrc.append(anchor_src[lab])

    anchor_set = set(int(a) for a in anchors)
    qx, qy, qsrc, lams = [], [], [], []
    for _ in range(shape.n_queries):
        lab = int(rng.integers(shape.n_ways))
        view = augs[int(rng.integers(len(augs)))].apply(anchor_x[lab], rng)
        # external sample drawn uniformly from the non-anchor samples
        z_flat = int(rng.integers(n - shape.n_ways))
        for a in sorted(anchor_set):
            if z_flat >= a:
                z_flat += 1
        z, _ = locate(z_flat)
        l = sample_lambda(mix, rng) if lam is None else float(lam)
        qx.append(mixup_query(view, z, l))
        qy.append(lab)
        qsrc.append(anchor_src[lab])
        lams.append(l)

    return Episode(
        n_ways=shape.n_ways,
        context_x=np.stack(cx).astype(np.float32),
        context_y=np.asarray(cy, dtype=np.int64),
        query_x=np.stack(qx).astype(np.float32),
        query_y=np.asarray(qy, dtype=np.int64),
        context_src=tuple(csrc),
        query_src=tuple(qsrc),
        lambdas=np.asarray(lams),
    )
