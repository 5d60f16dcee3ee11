"""Dataset records, class-disjoint splits, leave-one-domain-out partitions and
the synthetic multi-domain generator.

On disk a dataset is a directory holding ``manifest.json`` and
``embeddings.bin`` (row-major little-endian float32), plus an optional
``labels.csv`` used only for cross-checking.  A registry is a JSON file
``{"seed": int, "datasets": [path, ...]}`` with paths relative to the file.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# Meta-Album domain listing, used to name synthetic domains and as the
# default domain-based stream order.
META_ALBUM_DOMAINS = (
    "LargeAnimals",
    "SmallAnimals",
    "Plants",
    "PlantDiseases",
    "Microscopy",
    "RemoteSensing",
    "Vehicles",
    "Manufacturing",
    "HumanActions",
    "OCR",
)


class DataError(ValueError):
    """Raised for malformed datasets, registries or partitions."""


@dataclass(frozen=True, eq=False)
class ClassGroup:
    class_id: str
    samples: np.ndarray  # (n, dim) float32

    def __len__(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    id: str
    domain: str
    dim: int
    classes: tuple[ClassGroup, ...]
    source: str = "ingested"

    def __post_init__(self):
        if self.dim < 1:
            raise DataError(f"dataset {self.id!r}: dim must be positive")
        if self.source not in ("ingested", "synthetic"):
            raise DataError(f"dataset {self.id!r}: unknown source {self.source!r}")
        seen = set()
        for group in self.classes:
            if group.class_id in seen:
                raise DataError(f"dataset {self.id!r}: duplicate class {group.class_id!r}")
            seen.add(group.class_id)
            if group.samples.ndim != 2 or group.samples.shape[1] != self.dim:
                raise DataError(
                    f"dataset {self.id!r}, class {group.class_id!r}: samples must have shape (n, {self.dim})"
                )
            if group.samples.shape[0] < 1:
                raise DataError(f"dataset {self.id!r}, class {group.class_id!r}: empty class")
            if not np.all(np.isfinite(group.samples)):
                raise DataError(f"dataset {self.id!r}, class {group.class_id!r}: non-finite values")

    @property
    def n_samples(self) -> int:
        return sum(len(g) for g in self.classes)

    @property
    def class_ids(self) -> list[str]:
        return [g.class_id for g in self.classes]

    def restrict(self, class_ids) -> "DatasetRecord":
        """Same dataset limited to ``class_ids`` (manifest order is kept)."""
        keep = set(class_ids)
        return DatasetRecord(
            id=self.id,
            domain=self.domain,
            dim=self.dim,
            classes=tuple(g for g in self.classes if g.class_id in keep),
            source=self.source,
        )


@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple[str, ...]
    test_classes: tuple[str, ...]


@dataclass(frozen=True)
class LooPartition:
    held_out_domain: str
    train_ids: tuple[str, ...]
    eval_ids: tuple[str, ...]


@dataclass(frozen=True)
class SyntheticSpec:
    n_domains: int
    datasets_per_domain: int
    classes_per_dataset: int
    samples_per_class: int = 40
    dim: int = 16
    class_separation: float = 6.0
    noise_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_domains", "datasets_per_domain", "classes_per_dataset", "samples_per_class", "dim"):
            if getattr(self, name) < 1:
                raise DataError(f"SyntheticSpec.{name} must be >= 1")
        if not self.class_separation > 0:
            raise DataError("SyntheticSpec.class_separation must be > 0")
        if self.noise_scale < 0:
            raise DataError("SyntheticSpec.noise_scale must be >= 0")


# --------------------------------------------------------------------------
# disk format


def load_dataset(path) -> DatasetRecord:
    path = Path(path)
    manifest_path = path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt manifest.json ({exc})") from None
    try:
        ds_id = str(manifest["id"])
        domain = str(manifest["domain"])
        dim = int(manifest["dim"])
        entries = manifest["classes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: corrupt manifest.json (missing {exc})") from None

    payload_path = path / "embeddings.bin"
    try:
        payload = payload_path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"dataset {ds_id!r}: missing embeddings.bin") from None

    n_total = sum(int(e["n_samples"]) for e in entries)
    expected = n_total * dim * 4
    if len(payload) != expected:
        raise DataError(
            f"dataset {ds_id!r}: payload size mismatch ({len(payload)} bytes, expected {expected})"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)

    groups = []
    seen = set()
    for entry in entries:
        cid = str(entry["class_id"])
        if cid in seen:
            raise DataError(f"dataset {ds_id!r}: duplicate class {cid!r}")
        seen.add(cid)
        n = int(entry["n_samples"])
        offset = int(entry["offset"])
        if offset % 4 or offset + n * dim * 4 > len(payload):
            raise DataError(f"dataset {ds_id!r}, class {cid!r}: bad byte offset {offset}")
        start = offset // 4
        block = flat[start : start + n * dim].reshape(n, dim).copy()
        if not np.all(np.isfinite(block)):
            raise DataError(f"dataset {ds_id!r}, class {cid!r}: non-finite values")
        block.setflags(write=False)
        groups.append(ClassGroup(cid, block))

    record = DatasetRecord(ds_id, domain, dim, tuple(groups), source=manifest.get("source", "ingested"))

    labels_path = path / "labels.csv"
    if labels_path.exists():
        _check_labels(record, labels_path)
    return record


def _check_labels(record: DatasetRecord, labels_path: Path) -> None:
    expected = [g.class_id for g in record.classes for _ in range(len(g))]
    with open(labels_path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and r[0] != "row_index"]
    got = [None] * len(expected)
    for row_index, class_id in rows:
        i = int(row_index)
        if not 0 <= i < len(expected):
            raise DataError(f"dataset {record.id!r}: labels.csv row {i} out of range")
        got[i] = class_id
    if got != expected:
        raise DataError(f"dataset {record.id!r}: labels.csv disagrees with manifest")


def save_dataset(ds: DatasetRecord, path, write_labels: bool = True) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for g in ds.classes:
        entries.append({"class_id": g.class_id, "n_samples": len(g), "offset": offset})
        raw = np.ascontiguousarray(g.samples, dtype="<f4").tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = {"id": ds.id, "domain": ds.domain, "dim": ds.dim, "source": ds.source, "classes": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (path / "embeddings.bin").write_bytes(b"".join(chunks))
    if write_labels:
        with open(path / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_index", "class_id"])
            row = 0
            for g in ds.classes:
                for _ in range(len(g)):
                    w.writerow([row, g.class_id])
                    row += 1
    return path


def load_registry(path) -> tuple[list[DatasetRecord], int]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing registry {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt registry {path} ({exc})") from None
    base = path.parent
    records = [load_dataset(base / p) for p in doc["datasets"]]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"registry {path}: duplicate dataset ids")
    return records, int(doc.get("seed", 0))


def save_registry(records: Sequence[DatasetRecord], out_dir, seed: int = 0) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds in records:
        save_dataset(ds, out_dir / ds.id)
        paths.append(ds.id)
    reg = out_dir / "registry.json"
    reg.write_text(json.dumps({"seed": seed, "datasets": paths}, indent=1) + "\n")
    return reg


# --------------------------------------------------------------------------
# splits and partitions


def split_classes(ds: DatasetRecord, eval_fraction: float = 0.2, min_eval: int = 5) -> ClassSplit:
    """Class-disjoint split: the last ``max(floor(f*C), min_eval)`` classes in
    manifest order become the test split."""
    if not 0 < eval_fraction < 1:
        raise DataError("eval_fraction must be in (0, 1)")
    return _split_cached(ds, float(eval_fraction), int(min_eval))


@functools.lru_cache(maxsize=4096)
def _split_cached(ds: DatasetRecord, eval_fraction: float, min_eval: int) -> ClassSplit:
    n_test = split_counts(len(ds.classes), eval_fraction, min_eval)[1]
    ids = ds.class_ids
    return ClassSplit(tuple(ids[: len(ids) - n_test]), tuple(ids[len(ids) - n_test :]))


def split_counts(n_classes: int, eval_fraction: float = 0.2, min_eval: int = 5) -> tuple[int, int]:
    if n_classes <= min_eval:
        raise DataError(f"dataset too small to split ({n_classes} classes, min_eval={min_eval})")
    # the epsilon guards against products like 0.2*315 landing just under an integer
    n_test = max(math.floor(eval_fraction * n_classes + 1e-9), min_eval)
    return n_classes - n_test, n_test


def apply_split(ds: DatasetRecord, split: str, eval_fraction: float = 0.2, min_eval: int = 5) -> DatasetRecord:
    if split == "all":
        return ds
    cs = split_classes(ds, eval_fraction, min_eval)
    if split == "train":
        return ds.restrict(cs.train_classes)
    if split == "test":
        return ds.restrict(cs.test_classes)
    raise DataError(f"unknown split {split!r}")


def loo_partition(registry: Sequence[DatasetRecord], held_out: str) -> LooPartition:
    domains = {ds.domain for ds in registry}
    if held_out not in domains:
        raise DataError(f"unknown domain {held_out!r}")
    train_ids = tuple(ds.id for ds in registry if ds.domain != held_out)
    eval_ids = tuple(ds.id for ds in registry if ds.domain == held_out)
    if not train_ids:
        raise DataError("no training data: every dataset belongs to the held-out domain")
    return LooPartition(held_out, train_ids, eval_ids)


def selection_probabilities(registry: Sequence[DatasetRecord]) -> np.ndarray:
    """Dataset sampling weights proportional to total sample count."""
    if not registry:
        raise DataError("empty registry")
    sizes = np.array([ds.n_samples if isinstance(ds, DatasetRecord) else ds for ds in registry], dtype=np.float64)
    return sizes / sizes.sum()


def by_id(registry: Sequence[DatasetRecord]) -> dict[str, DatasetRecord]:
    return {ds.id: ds for ds in registry}


# --------------------------------------------------------------------------
# synthetic registry


def domain_names(n_domains: int) -> list[str]:
    if n_domains <= len(META_ALBUM_DOMAINS):
        return list(META_ALBUM_DOMAINS[:n_domains])
    return [f"Domain{i:02d}" for i in range(n_domains)]


def synth_generate(spec: SyntheticSpec) -> list[DatasetRecord]:
    """Each domain gets a random orthonormal transform and sphere radius; class
    means lie on that sphere scaled by ``class_separation`` and samples add
    isotropic Gaussian noise.  Every dataset draws from its own seed stream so
    generation is order-independent."""
    records = []
    for d, domain in enumerate(domain_names(spec.n_domains)):
        drng = np.random.default_rng([spec.seed, d])
        basis, _ = np.linalg.qr(drng.standard_normal((spec.dim, spec.dim)))
        radius = drng.uniform(0.75, 1.25)
        for j in range(spec.datasets_per_domain):
            rng = np.random.default_rng([spec.seed, d, j + 1])
            groups = []
            for c in range(spec.classes_per_dataset):
                u = rng.standard_normal(spec.dim)
                u /= np.linalg.norm(u)
                mean = spec.class_separation * radius * (basis @ u)
                noise = rng.standard_normal((spec.samples_per_class, spec.dim))
                samples = (mean + spec.noise_scale * noise).astype(np.float32)
                samples.setflags(write=False)
                groups.append(ClassGroup(f"c{c:03d}", samples))
            records.append(
                DatasetRecord(f"{domain}-{j}", domain, spec.dim, tuple(groups), source="synthetic")
            )
    return records


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GEOM_THREADS", "1")))
    except ValueError:
        return 1
