"""Accuracy aggregation, backward transfer and forgetting heatmaps.

Accuracy matrices are square float arrays with NaN marking undefined
entries; ``R[a, b]`` is the accuracy on dataset ``b`` after training through
dataset ``a`` (0-based, so only ``b <= a`` is defined).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n_runs: int
    n_tasks: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_runs": self.n_runs, "n_tasks": self.n_tasks}


def empty_matrix(n: int) -> np.ndarray:
    return np.full((n, n), np.nan)


def bwt(R) -> float:
    R = np.asarray(R, dtype=np.float64)
    A = R.shape[0]
    if R.ndim != 2 or R.shape[1] != A or A < 2:
        raise MetricsError("BWT needs a square matrix over at least two datasets")
    last = R[A - 1, : A - 1]
    diag = np.diagonal(R)[: A - 1]
    if np.isnan(last).any() or np.isnan(np.diagonal(R)).any():
        raise MetricsError("missing entries: BWT needs the last row and the diagonal")
    return float(np.mean(last - diag))


def heatmap_deltas(R) -> np.ndarray:
    """``e[r, c] = R[r, c] - R[c, c]`` on and below the diagonal, NaN above."""
    R = np.asarray(R, dtype=np.float64)
    A = R.shape[0]
    low = np.tril(np.ones((A, A), dtype=bool))
    if np.isnan(R[low]).any():
        raise MetricsError("missing entries in the lower triangle")
    e = np.full((A, A), np.nan)
    e[low] = (R - np.diagonal(R)[None, :])[low]
    np.fill_diagonal(e, 0.0)
    return e


def delta_at(e: np.ndarray, r: int, c: int) -> float:
    if c > r:
        raise MetricsError(f"undefined region: e[{r}][{c}] lies above the diagonal")
    return float(e[r, c])


def group_by_domain(R, domains: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Collapse a dataset-level matrix to domain level.  Row ``i`` of the
    result is the checkpoint after the last dataset of domain ``i``; entries
    average the dataset accuracies of each column domain."""
    R = np.asarray(R, dtype=np.float64)
    order = []
    for d in domains:
        if d not in order:
            order.append(d)
    last_row = {d: max(i for i, x in enumerate(domains) if x == d) for d in order}
    cols = {d: [i for i, x in enumerate(domains) if x == d] for d in order}
    G = np.full((len(order), len(order)), np.nan)
    for i, dr in enumerate(order):
        for j, dc in enumerate(order[: i + 1]):
            G[i, j] = np.mean(R[last_row[dr], cols[dc]])
    return G, order


def relative_accuracy(a: Aggregate, baseline: Aggregate) -> float:
    return a.mean - baseline.mean


def aggregate(per_task: Sequence[Sequence[float]]) -> Aggregate:
    """Per-run means first, then mean and sample std across runs."""
    if not per_task:
        raise MetricsError("empty input")
    run_means = []
    n_tasks = 0
    for run in per_task:
        run = np.asarray(run, dtype=np.float64)
        if run.size == 0:
            raise MetricsError("empty run")
        run_means.append(run.mean())
        n_tasks += run.size
    m = np.asarray(run_means)
    std = float(m.std(ddof=1)) if len(m) > 1 else 0.0
    return Aggregate(float(m.mean()), std, len(m), n_tasks)


def long_form_csv(rows: Sequence[tuple]) -> str:
    """CSV with columns run, tag, task, accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "tag", "task", "accuracy"])
    for row in rows:
        w.writerow(row)
    return buf.getvalue()
