"""Dataset orderings for sequential streams.

Two difficulty signals feed the constructors: a transfer-learning probe
(accuracy of a small MLP head trained on the dataset alone, higher = easier)
and an optimal-transport dataset distance whose ground cost on
feature-label pairs is ``||x - x'||^2 + W2^2(a_y, a_y')``, with ``a_y`` the
Gaussian fitted to the samples of class ``y``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import META_ALBUM_DOMAINS, DatasetRecord, default_threads
from .ot import EXACT_SUPPORT_CAP, OTError, exact_ot, sinkhorn

STRATEGIES = ("domain_based", "e2h", "h2e", "e2e", "h2h", "switch")


class CurriculumError(ValueError):
    pass


# --------------------------------------------------------------------------
# transfer-learning probe


@dataclass(frozen=True)
class DifficultyScore:
    dataset_id: str
    probe_accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.probe_accuracy <= 1.0:
            raise CurriculumError("probe accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 8
    test_fraction: float = 0.2
    seed: int = 0
    shuffle_labels: bool = False


def _probe_split(ds: DatasetRecord, frac: float):
    """Per-class sample split: the last ``ceil(frac * n)`` samples of every
    class are scored, the rest train the head."""
    xtr, ytr, xte, yte = [], [], [], []
    for c, g in enumerate(ds.classes):
        n = len(g)
        n_te = int(np.ceil(frac * n))
        if n < 2 or n_te < 1 or n_te >= n:
            raise CurriculumError(f"degenerate split: class {g.class_id!r} of {ds.id!r} has {n} samples")
        xtr.append(g.samples[: n - n_te])
        xte.append(g.samples[n - n_te :])
        ytr += [c] * (n - n_te)
        yte += [c] * n_te
    if len(ds.classes) < 2:
        raise CurriculumError(f"degenerate split: {ds.id!r} has a single class")
    f64 = np.float64
    return np.vstack(xtr).astype(f64), np.array(ytr), np.vstack(xte).astype(f64), np.array(yte)


def probe_difficulty(ds: DatasetRecord, cfg: ProbeConfig = ProbeConfig()) -> DifficultyScore:
    """Train a one-hidden-layer ReLU head on standardized features with Adam
    and cosine annealing; the score is held-out sample accuracy."""
    xtr, ytr, xte, yte = _probe_split(ds, cfg.test_fraction)
    rng = np.random.default_rng([cfg.seed, 0])
    if cfg.shuffle_labels:
        ytr = rng.permutation(ytr)
    n_cls = len(ds.classes)
    mu = xtr.mean(0)
    sd = xtr.std(0) + 1e-8
    xtr = (xtr - mu) / sd
    d = xtr.shape[1]
    ps = [
        rng.standard_normal((d, cfg.hidden)) * np.sqrt(2.0 / d),
        np.zeros(cfg.hidden),
        rng.standard_normal((cfg.hidden, n_cls)) * np.sqrt(1.0 / cfg.hidden),
        np.zeros(n_cls),
    ]
    m = [np.zeros_like(p) for p in ps]
    v = [np.zeros_like(p) for p in ps]
    n = len(xtr)
    total = cfg.epochs * int(np.ceil(n / cfg.batch_size))
    t = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            h = xb @ ps[0] + ps[1]
            a = np.maximum(h, 0)
            z = a @ ps[2] + ps[3]
            z -= z.max(1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(1, keepdims=True)
            p[np.arange(len(yb)), yb] -= 1
            dz = p / len(yb)
            dh = (dz @ ps[2].T) * (h > 0)
            grads = [xb.T @ dh, dh.sum(0), a.T @ dz, dz.sum(0)]
            lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * t / total))
            t += 1
            for i, g in enumerate(grads):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                ps[i] -= lr * (m[i] / (1 - 0.9**t)) / (np.sqrt(v[i] / (1 - 0.999**t)) + 1e-8)
    hte = np.maximum(((xte - mu) / sd) @ ps[0] + ps[1], 0)
    pred = np.argmax(hte @ ps[2] + ps[3], axis=1)
    return DifficultyScore(ds.id, float(np.mean(pred == yte)))


# --------------------------------------------------------------------------
# label Gaussians


@dataclass(frozen=True, eq=False)
class LabelGaussian:
    class_id: str
    mean: np.ndarray
    cov: np.ndarray  # (d,) variances when diagonal, (d, d) when full

    @property
    def diagonal(self) -> bool:
        return self.cov.ndim == 1

    def full_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.diagonal else self.cov


def label_gaussian_stats(ds: DatasetRecord, class_id: str, covariance: str = "diagonal") -> LabelGaussian:
    """Sample mean and unbiased (co)variance of one class."""
    groups = {g.class_id: g for g in ds.classes}
    if class_id not in groups:
        raise CurriculumError(f"{ds.id!r} has no class {class_id!r}")
    x = groups[class_id].samples.astype(np.float64)
    if len(x) < 2:
        raise CurriculumError(f"singleton class {class_id!r} in {ds.id!r}: covariance undefined")
    mu = x.mean(0)
    if covariance == "diagonal":
        cov = x.var(0, ddof=1)
    elif covariance == "full":
        cov = np.cov(x, rowvar=False, ddof=1).reshape(ds.dim, ds.dim)
    else:
        raise CurriculumError(f"unknown covariance mode {covariance!r}")
    return LabelGaussian(class_id, mu, cov)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    tol = 1e-10 * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        raise CurriculumError(f"covariance is not positive semidefinite (eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def gaussian_w2_sq(a: LabelGaussian, b: LabelGaussian) -> float:
    if a.mean.shape != b.mean.shape:
        raise CurriculumError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    gap = float(np.sum((a.mean - b.mean) ** 2))
    if a.diagonal and b.diagonal:
        if (a.cov < 0).any() or (b.cov < 0).any():
            raise CurriculumError("covariance is not positive semidefinite (negative variance)")
        return gap + float(np.sum((np.sqrt(a.cov) - np.sqrt(b.cov)) ** 2))
    Sa, Sb = a.full_cov(), b.full_cov()
    rb = _psd_sqrt(Sb)
    _psd_sqrt(Sa)
    cross = _psd_sqrt(rb @ Sa @ rb)
    return max(gap + float(np.trace(Sa) + np.trace(Sb) - 2 * np.trace(cross)), 0.0)


def gaussian_w2(a: LabelGaussian, b: LabelGaussian) -> float:
    """2-Wasserstein distance between two Gaussians."""
    return float(np.sqrt(gaussian_w2_sq(a, b)))


# --------------------------------------------------------------------------
# dataset distance


def _supports(ds: DatasetRecord, support: str, covariance: str):
    gauss = [label_gaussian_stats(ds, g.class_id, covariance) for g in ds.classes]
    counts = np.array([len(g) for g in ds.classes], dtype=np.float64)
    if support == "class_mean":
        x = np.stack([lg.mean for lg in gauss])
        return x, counts / counts.sum(), gauss, np.arange(len(gauss))
    if support == "samples":
        x = np.vstack([g.samples.astype(np.float64) for g in ds.classes])
        labels = np.repeat(np.arange(len(gauss)), counts.astype(np.int64))
        return x, np.full(len(x), 1.0 / len(x)), gauss, labels
    raise CurriculumError(f"unknown support mode {support!r}")


def otdd_from_supports(
    xa, wa, ga: Sequence[LabelGaussian], la, xb, wb, gb: Sequence[LabelGaussian], lb,
    solver: str = "sinkhorn", eps: float | None = None, p: int = 2,
) -> float:
    """Distance between two weighted supports of feature-label pairs.  ``la``
    and ``lb`` index each support point's label Gaussian."""
    if p != 2:
        raise CurriculumError("only p = 2 is supported (closed-form Gaussian W2)")
    xa, xb = np.asarray(xa, np.float64), np.asarray(xb, np.float64)
    wa, wb = np.asarray(wa, np.float64), np.asarray(wb, np.float64)
    if len(xa) == 0 or len(xb) == 0:
        raise CurriculumError("empty dataset")
    label_cost = np.array([[gaussian_w2_sq(u, v) for v in gb] for u in ga])
    feat = np.sum(xa**2, 1)[:, None] + np.sum(xb**2, 1)[None, :] - 2 * xa @ xb.T
    C = np.clip(feat, 0, None) + label_cost[np.ix_(la, lb)]
    if solver == "exact":
        if max(C.shape) > EXACT_SUPPORT_CAP:
            raise OTError(f"exact solver support cap: {max(C.shape)} > {EXACT_SUPPORT_CAP} support points")
        value = exact_ot(wa, wb, C)[0]
    elif solver == "sinkhorn":
        scale = float(C.mean())
        if scale == 0:
            return 0.0
        P = sinkhorn(wa, wb, C, 0.05 * scale if eps is None else eps)
        value = float(np.sum(C * P))
    else:
        raise CurriculumError(f"unknown solver {solver!r}")
    return float(np.sqrt(max(value, 0.0)))


def otdd(
    ds_a: DatasetRecord,
    ds_b: DatasetRecord,
    solver: str = "sinkhorn",
    p: int = 2,
    eps: float | None = None,
    support: str = "class_mean",
    covariance: str = "diagonal",
) -> float:
    """Optimal-transport dataset distance.  By default every class is one
    support point (its mean, weighted by class mass); ``support="samples"``
    uses every sample instead."""
    if ds_a.dim != ds_b.dim:
        raise CurriculumError(f"dimension mismatch: {ds_a.dim} vs {ds_b.dim}")
    xa, wa, ga, la = _supports(ds_a, support, covariance)
    xb, wb, gb, lb = _supports(ds_b, support, covariance)
    return otdd_from_supports(xa, wa, ga, la, xb, wb, gb, lb, solver=solver, eps=eps, p=p)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.shape != (len(self.ids), len(self.ids)):
            raise CurriculumError("distance matrix shape does not match ids")
        if len(set(self.ids)) != len(self.ids):
            raise CurriculumError("duplicate ids in distance matrix")
        if not np.all(np.isfinite(v)) or (v < 0).any():
            raise CurriculumError("distances must be finite and nonnegative")
        if np.abs(v - v.T).max(initial=0) > 1e-6:
            raise CurriculumError("distance matrix is not symmetric")

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DistanceMatrix":
        return cls(tuple(d["ids"]), np.asarray(d["values"], dtype=np.float64))


def _pair_job(args):
    a, b, kw = args
    return otdd(a, b, **kw)


def distance_matrix(
    registry: Sequence[DatasetRecord], solver: str = "sinkhorn", eps=None, workers: int | None = None, **kw
) -> DistanceMatrix:
    """Pairwise distances over ``i < j``, mirrored; the diagonal is zero (the
    identity coupling).  Jobs may run in worker processes; results are placed
    by index so the matrix does not depend on completion order."""
    n = len(registry)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    opts = dict(solver=solver, eps=eps, **kw)
    jobs = [(registry[i], registry[j], opts) for i, j in pairs]
    workers = default_threads() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            vals = list(pool.map(_pair_job, jobs))
    else:
        vals = [_pair_job(job) for job in jobs]
    D = np.zeros((n, n))
    for (i, j), v in zip(pairs, vals):
        D[i, j] = D[j, i] = v
    return DistanceMatrix(tuple(ds.id for ds in registry), D)


# --------------------------------------------------------------------------
# orderings


@dataclass(frozen=True)
class CurriculumOrder:
    strategy: str
    order: tuple[str, ...]

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise CurriculumError(f"unknown strategy {self.strategy!r}")
        if len(set(self.order)) != len(self.order):
            raise CurriculumError("order is not a permutation: repeated ids")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "order": list(self.order)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CurriculumOrder":
        try:
            return cls(d["strategy"], tuple(d["order"]))
        except (KeyError, TypeError) as exc:
            raise CurriculumError(f"malformed curriculum: {exc}") from None

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CurriculumOrder":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CurriculumError(f"cannot read curriculum {path}: {exc}") from None


def _greedy(D: DistanceMatrix, start: str, picks: Sequence[str]) -> list[str]:
    ids = list(D.ids)
    pos = {k: i for i, k in enumerate(ids)}
    order = [start]
    left = set(ids) - {start}
    step = 0
    while left:
        row = D.values[pos[order[-1]]]
        cand = sorted(left)
        if picks[step % len(picks)] == "near":
            nxt = min(cand, key=lambda k: (row[pos[k]], k))
        else:
            nxt = min(cand, key=lambda k: (-row[pos[k]], k))
        order.append(nxt)
        left.remove(nxt)
        step += 1
    return order


def build_curriculum(
    strategy: str,
    scores: Sequence[DifficultyScore] | Mapping[str, float] | None = None,
    distances: DistanceMatrix | None = None,
    start: str | None = None,
    domains: Sequence[tuple[str, str]] | None = None,
    domain_order: Sequence[str] = META_ALBUM_DOMAINS,
) -> CurriculumOrder:
    """Build an ordering.

    ``e2h``/``h2e`` sort probe scores (ties by id); ``e2e``/``h2h`` greedily
    append the nearest/farthest unvisited dataset relative to the last one;
    ``switch`` alternates farthest and nearest starting with farthest;
    ``domain_based`` concatenates domains in ``domain_order`` keeping the
    given (release) order within each domain.  ``domains`` is a sequence of
    ``(dataset_id, domain)`` pairs.
    """
    if strategy in ("e2h", "h2e"):
        if scores is None:
            raise CurriculumError(f"{strategy} needs difficulty scores")
        if isinstance(scores, Mapping):
            table = dict(scores)
        else:
            table = {s.dataset_id: s.probe_accuracy for s in scores}
            if len(table) != len(scores):
                raise CurriculumError("duplicate dataset ids in scores")
        sign = -1.0 if strategy == "e2h" else 1.0
        order = sorted(table, key=lambda k: (sign * table[k], k))
        return CurriculumOrder(strategy, tuple(order))
    if strategy in ("e2e", "h2h", "switch"):
        if distances is None:
            raise CurriculumError(f"{strategy} needs a distance matrix")
        if start is None:
            raise CurriculumError("start dataset required")
        if start not in distances.ids:
            raise CurriculumError(f"start dataset {start!r} not in distance matrix")
        picks = {"e2e": ("near",), "h2h": ("far",), "switch": ("far", "near")}[strategy]
        return CurriculumOrder(strategy, tuple(_greedy(distances, start, picks)))
    if strategy == "domain_based":
        if domains is None:
            raise CurriculumError("domain_based needs a dataset-to-domain map")
        known = list(domain_order)
        extra = sorted({d for _, d in domains} - set(known))
        rank = {d: i for i, d in enumerate(known + extra)}
        order = [k for _, k in sorted((rank[d], i) for i, (_, d) in enumerate(domains))]
        return CurriculumOrder(strategy, tuple(domains[i][0] for i in order))
    raise CurriculumError(f"unknown strategy {strategy!r}")


def map_order(order: CurriculumOrder, mapping: Mapping[str, str | Sequence[str]]) -> CurriculumOrder:
    """Transfer an order computed on a proxy registry to the full one.  Each
    proxy id maps to one full id or to a list of them (kept in list order)."""
    out: list[str] = []
    for k in order.order:
        if k not in mapping:
            raise CurriculumError(f"proxy id {k!r} has no mapping")
        target = mapping[k]
        out.extend([target] if isinstance(target, str) else list(target))
    if len(set(out)) != len(out):
        raise CurriculumError("id mapping sends two proxy datasets to the same full dataset")
    return CurriculumOrder(order.strategy, tuple(out))
