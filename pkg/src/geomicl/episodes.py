"""N-way K-shot episode sampling, sequence assembly and context-label noise.

Episode labels are 0-based (``0..N-1``) throughout the package.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import DataError, DatasetRecord, apply_split, selection_probabilities


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeShape:
    n_ways: int = 5
    k_shots: int = 5
    n_queries: int = 10

    def __post_init__(self):
        if self.n_ways < 2 or self.k_shots < 1 or self.n_queries < 1:
            raise EpisodeError(f"invalid episode shape {self}")

    @property
    def n_context(self) -> int:
        return self.n_ways * self.k_shots


# (dataset id, class id, sample index within the class pool)
Provenance = tuple[str, str, int]


@dataclass(frozen=True, eq=False)
class Episode:
    n_ways: int
    context_x: np.ndarray  # (NK, d)
    context_y: np.ndarray  # (NK,) int
    query_x: np.ndarray  # (Q, d)
    query_y: np.ndarray  # (Q,) int
    context_src: tuple[Provenance, ...]
    query_src: tuple[Provenance, ...]
    lambdas: np.ndarray | None = None  # mixing coefficients of unsupervised queries

    @property
    def n_context(self) -> int:
        return int(self.context_y.shape[0])

    @property
    def n_queries(self) -> int:
        return int(self.query_y.shape[0])

    def to_json(self, include_features: bool = False) -> str:
        doc = {
            "n_ways": self.n_ways,
            "context": [
                {"label": int(y), "src": list(s)} for y, s in zip(self.context_y, self.context_src)
            ],
            "queries": [{"label": int(y), "src": list(s)} for y, s in zip(self.query_y, self.query_src)],
        }
        if include_features:
            for item, x in zip(doc["context"], self.context_x):
                item["x"] = [float(v) for v in x]
            for item, x in zip(doc["queries"], self.query_x):
                item["x"] = [float(v) for v in x]
        return json.dumps(doc)


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    tokens: np.ndarray  # (Q, NK+1, feat_width + label_width)
    truth: np.ndarray  # (Q,)
    n_ways: int


def make_rng(seed) -> np.random.Generator:
    """Accepts a Generator, an int, or a sequence of ints (seed-stream key)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@functools.lru_cache(maxsize=4096)
def _split_view(ds: DatasetRecord, split: str, eval_fraction: float, min_eval: int) -> DatasetRecord:
    return apply_split(ds, split, eval_fraction, min_eval)


def split_pool(pool: Sequence[DatasetRecord], split: str, eval_fraction: float = 0.2, min_eval: int = 5):
    try:
        return [_split_view(ds, split, eval_fraction, min_eval) for ds in pool]
    except DataError as exc:
        raise EpisodeError(str(exc)) from None


def _query_labels(rng, shape: EpisodeShape, balance: bool) -> np.ndarray:
    if balance:
        labels = np.arange(shape.n_queries) % shape.n_ways
        return rng.permutation(labels)
    return rng.integers(0, shape.n_ways, size=shape.n_queries)


def sample_episode(
    pool: Sequence[DatasetRecord],
    mode: str = "single",
    shape: EpisodeShape = EpisodeShape(),
    split: str = "all",
    rng=None,
    balance_queries: bool = False,
    eval_fraction: float = 0.2,
    min_eval: int = 5,
) -> Episode:
    """Draw one supervised episode.

    ``single`` picks a dataset with probability proportional to its size and
    then N classes inside it; ``merged`` picks N (dataset, class) pairs from
    the union of the pool, weighted by class size.  Classes are mapped to
    episode labels by a uniformly random bijection and queries never reuse a
    context sample.
    """
    rng = make_rng(rng)
    if not pool:
        raise EpisodeError("insufficient classes/samples: empty pool")
    views = split_pool(pool, split, eval_fraction, min_eval)
    need = shape.k_shots + 1

    if mode == "single":
        probs = selection_probabilities(views)
        ds = views[rng.choice(len(views), p=probs)]
        eligible = [(ds, g) for g in ds.classes if len(g) >= need]
        if len(eligible) < shape.n_ways:
            raise EpisodeError(
                f"insufficient classes/samples: dataset {ds.id!r} has {len(eligible)} classes with >= {need} samples"
            )
        pick = rng.choice(len(eligible), size=shape.n_ways, replace=False)
    elif mode == "merged":
        eligible = [(ds, g) for ds in views for g in ds.classes if len(g) >= need]
        if len(eligible) < shape.n_ways:
            raise EpisodeError(f"insufficient classes/samples: pool has {len(eligible)} eligible classes")
        weights = np.array([len(g) for _, g in eligible], dtype=np.float64)
        pick = rng.choice(len(eligible), size=shape.n_ways, replace=False, p=weights / weights.sum())
    else:
        raise EpisodeError(f"unknown sampling mode {mode!r}")

    chosen = [eligible[i] for i in pick]
    # chosen[i] receives episode label labels_of[i]
    labels_of = rng.permutation(shape.n_ways)
    class_of_label = [None] * shape.n_ways
    for i, lab in enumerate(labels_of):
        class_of_label[lab] = chosen[i]

    q_labels = _query_labels(rng, shape, balance_queries)
    q_counts = np.bincount(q_labels, minlength=shape.n_ways)

    cx, cy, csrc = [], [], []
    q_rows: dict[int, list] = {}
    for lab in range(shape.n_ways):
        ds, g = class_of_label[lab]
        take = shape.k_shots + int(q_counts[lab])
        if len(g) < take:
            raise EpisodeError(
                f"insufficient classes/samples: class {g.class_id!r} of {ds.id!r} has {len(g)} < {take} samples"
            )
        idx = rng.choice(len(g), size=take, replace=False)
        ctx_idx, qry_idx = idx[: shape.k_shots], idx[shape.k_shots :]
        cx.append(g.samples[ctx_idx])
        cy.extend([lab] * shape.k_shots)
        csrc.extend((ds.id, g.class_id, int(i)) for i in ctx_idx)
        q_rows[lab] = [(g.samples[i], (ds.id, g.class_id, int(i))) for i in qry_idx]

    qx, qsrc = [], []
    cursor = {lab: 0 for lab in q_rows}
    for lab in q_labels:
        x, src = q_rows[lab][cursor[lab]]
        cursor[lab] += 1
        qx.append(x)
        qsrc.append(src)

    return Episode(
        n_ways=shape.n_ways,
        context_x=np.concatenate(cx).astype(np.float32, copy=False),
        context_y=np.asarray(cy, dtype=np.int64),
        query_x=np.stack(qx).astype(np.float32, copy=False),
        query_y=np.asarray(q_labels, dtype=np.int64),
        context_src=tuple(csrc),
        query_src=tuple(qsrc),
    )


def assemble_sequences(
    ep: Episode,
    label_embed: np.ndarray,
    unknown_vec: np.ndarray,
    feat_embed: Callable[[np.ndarray], np.ndarray] | None = None,
) -> SequenceBatch:
    """One sequence per query: the NK context tokens followed by the query
    token, each token being ``[features, label embedding]``.  The query slot
    carries ``unknown_vec`` in place of a label embedding."""
    if label_embed.ndim != 2 or label_embed.shape[0] < ep.n_ways:
        raise EpisodeError(f"dimension mismatch: label_embed needs >= {ep.n_ways} rows")
    if unknown_vec.shape != (label_embed.shape[1],):
        raise EpisodeError("dimension mismatch: unknown_vec width must equal label-embedding width")
    feat_embed = feat_embed or (lambda x: x)
    fc = feat_embed(ep.context_x)
    fq = feat_embed(ep.query_x)
    if fc.shape[1] != fq.shape[1]:
        raise EpisodeError("dimension mismatch between context and query features")
    dtype = np.result_type(fc.dtype, label_embed.dtype)
    ctx = np.concatenate([fc, label_embed[ep.context_y]], axis=1).astype(dtype, copy=False)
    qry = np.concatenate([fq, np.broadcast_to(unknown_vec, (fq.shape[0], unknown_vec.shape[0]))], axis=1)
    n_q = fq.shape[0]
    tokens = np.empty((n_q, ctx.shape[0] + 1, ctx.shape[1]), dtype=dtype)
    tokens[:, :-1] = ctx
    tokens[:, -1] = qry
    return SequenceBatch(tokens=tokens, truth=ep.query_y.copy(), n_ways=ep.n_ways)


def flip_count(n_context: int, correct_fraction: float) -> int:
    if not 0.0 <= correct_fraction <= 1.0:
        raise EpisodeError("correct_fraction must lie in [0, 1]")
    return math.floor((1.0 - correct_fraction) * n_context + 1e-9)


def perturb_context_labels(ep: Episode, correct_fraction: float, rng=None) -> Episode:
    """Replace ``floor((1-f)*NK)`` context labels, chosen without replacement,
    by a uniformly drawn different label.  Queries are left alone."""
    rng = make_rng(rng)
    n_flip = flip_count(ep.n_context, correct_fraction)
    if n_flip == 0:
        return ep
    idx = rng.choice(ep.n_context, size=n_flip, replace=False)
    y = ep.context_y.copy()
    y[idx] = (y[idx] + rng.integers(1, ep.n_ways, size=n_flip)) % ep.n_ways
    return replace(ep, context_y=y)
