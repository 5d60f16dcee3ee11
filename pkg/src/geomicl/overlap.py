"""Class-overlap audit between label vocabularies.

Two passes: exact matching on normalized label strings, then concept
matching on precomputed label embeddings by cosine similarity against a
global threshold (median over datasets of each dataset's nearest-rank 90th
percentile of max-similarity scores).

A vocabulary on disk is a directory with ``labels.csv`` (column ``label``)
and optionally ``embeddings.bin``, one little-endian float32 row per label.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class OverlapError(ValueError):
    pass


def normalize_label(raw: str) -> str:
    """Keep the last name of a comma-separated synonym list, lowercase it and
    drop underscores and apostrophes."""
    name = raw.split(",")[-1].strip().lower()
    for ch in ("_", "'", "’"):
        name = name.replace(ch, "")
    return name


@dataclass(frozen=True)
class LabelVocab:
    source: str
    labels: tuple[str, ...]

    @property
    def normalized(self) -> tuple[str, ...]:
        return tuple(normalize_label(s) for s in self.labels)


def exact_overlap(a: LabelVocab, b: LabelVocab) -> list[tuple[int, int]]:
    """Index pairs with equal normalized forms; each label is used at most once."""
    free: dict[str, list[int]] = {}
    for j, s in enumerate(b.normalized):
        free.setdefault(s, []).append(j)
    pairs = []
    for i, s in enumerate(a.normalized):
        slots = free.get(s)
        if slots:
            pairs.append((i, slots.pop(0)))
    return pairs


def nearest_rank(values, q: float = 90.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise OverlapError("empty similarity set")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def concept_threshold(similarity_sets: Sequence[Sequence[float]], q: float = 90.0) -> float:
    if len(similarity_sets) == 0:
        raise OverlapError("empty similarity set")
    return float(np.median([nearest_rank(s, q) for s in similarity_sets]))


def _unit(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e, axis=1, keepdims=True)
    if (n == 0).any():
        raise OverlapError("zero-norm label embedding")
    return e / n


def max_similarity(emb_a: np.ndarray, emb_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``emb_a``: best cosine similarity against ``emb_b`` and its index."""
    S = _unit(emb_a) @ _unit(emb_b).T
    best = S.argmax(1)
    return S[np.arange(len(S)), best], best


@dataclass
class DatasetOverlap:
    source: str
    vocab_size: int
    exact: list[tuple[str, str]] = field(default_factory=list)
    concept: list[tuple[str, str, float]] = field(default_factory=list)
    p90: float | None = None


@dataclass
class OverlapReport:
    reference: str
    datasets: list[DatasetOverlap]
    threshold: float | None

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "threshold": self.threshold,
            "datasets": [
                {
                    "source": d.source,
                    "vocab_size": d.vocab_size,
                    "exact_count": len(d.exact),
                    "concept_count": len(d.concept),
                    "p90": d.p90,
                    "exact": [list(p) for p in d.exact],
                    "concept": [list(p) for p in d.concept],
                }
                for d in self.datasets
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "vocab_size", "exact", "concept", "p90"])
        for d in self.datasets:
            w.writerow([d.source, d.vocab_size, len(d.exact), len(d.concept), "" if d.p90 is None else d.p90])
        return buf.getvalue()


def audit(
    reference: tuple[LabelVocab, np.ndarray | None],
    datasets: Sequence[tuple[LabelVocab, np.ndarray | None]],
    threshold: float | None = None,
) -> OverlapReport:
    """Compare every dataset vocabulary with the reference vocabulary.

    Exact matches come first; the remaining labels are scored by their best
    cosine similarity against the reference.  Concept matching needs
    embeddings on both sides; datasets without them get exact matches only.
    ``threshold=None`` derives the global threshold from the datasets that
    have embeddings.
    """
    ref_vocab, ref_emb = reference
    if ref_emb is not None and len(ref_emb) != len(ref_vocab.labels):
        raise OverlapError(f"{ref_vocab.source}: embedding count does not match labels")
    rows, sims = [], {}
    for vocab, emb in datasets:
        pairs = exact_overlap(vocab, ref_vocab)
        row = DatasetOverlap(vocab.source, len(vocab.labels))
        row.exact = [(vocab.labels[i], ref_vocab.labels[j]) for i, j in pairs]
        rows.append(row)
        if emb is None or ref_emb is None:
            continue
        if len(emb) != len(vocab.labels):
            raise OverlapError(f"{vocab.source}: {len(emb)} embeddings for {len(vocab.labels)} labels")
        # only labels without an exact match enter the similarity distribution
        matched = {i for i, _ in pairs}
        left = np.array([i for i in range(len(vocab.labels)) if i not in matched], dtype=np.int64)
        if left.size:
            score, best = max_similarity(emb[left], ref_emb)
            sims[vocab.source] = (left, score, best)
            row.p90 = nearest_rank(score)
    if threshold is None and sims:
        threshold = concept_threshold([s for _, s, _ in sims.values()])
    if threshold is not None and not -1.0 <= threshold <= 1.0:
        raise OverlapError("threshold must lie in [-1, 1]")
    for row, (vocab, _) in zip(rows, datasets):
        if vocab.source not in sims or threshold is None:
            continue
        left, score, best = sims[vocab.source]
        row.concept = [
            (vocab.labels[i], ref_vocab.labels[b], float(sc))
            for i, sc, b in zip(left, score, best)
            if sc >= threshold
        ]
    return OverlapReport(ref_vocab.source, rows, threshold)


def load_vocab(path) -> tuple[LabelVocab, np.ndarray | None]:
    path = Path(path)
    try:
        with open(path / "labels.csv", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "label" not in reader.fieldnames:
                raise OverlapError(f"{path}: labels.csv needs a 'label' column")
            labels = tuple(r["label"] for r in reader)
    except OSError as exc:
        raise OverlapError(f"{path}: cannot read labels ({exc})") from None
    emb = None
    bin_path = path / "embeddings.bin"
    if bin_path.exists():
        raw = np.fromfile(bin_path, dtype="<f4")
        if not labels or raw.size % len(labels):
            raise OverlapError(f"{path}: payload size mismatch for {len(labels)} labels")
        emb = raw.reshape(len(labels), -1).astype(np.float64)
        if not np.all(np.isfinite(emb)):
            raise OverlapError(f"{path}: non-finite embedding values")
    return LabelVocab(path.name, labels), emb


def save_vocab(vocab: LabelVocab, path, emb: np.ndarray | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"])
        for s in vocab.labels:
            w.writerow([s])
    if emb is not None:
        np.ascontiguousarray(emb, dtype="<f4").tofile(path / "embeddings.bin")
    return path


def write_report(report: OverlapReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    j = out / "overlap.json"
    j.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    c = out / "overlap.csv"
    c.write_text(report.to_csv())
    return j, c
