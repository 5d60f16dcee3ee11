import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geomicl.data import (
    ClassGroup,
    DataError,
    DatasetRecord,
    SyntheticSpec,
    apply_split,
    load_dataset,
    load_registry,
    loo_partition,
    save_dataset,
    save_registry,
    selection_probabilities,
    split_classes,
    split_counts,
    synth_generate,
)

# (images, train, eval) for the Mini size; every class there has 40 images
MINI_ROWS = [
    (12600, 252, 63), (4800, 96, 24), (2000, 40, 10), (3440, 69, 17), (4080, 82, 20),
    (4160, 84, 20), (4080, 82, 20), (1000, 20, 5), (1000, 20, 5), (1520, 31, 7),
    (1000, 20, 5), (1080, 22, 5), (1320, 27, 6), (760, 14, 5), (840, 16, 5),
    (1800, 36, 9), (1800, 36, 9), (1520, 31, 7), (7840, 157, 39), (840, 16, 5),
    (1040, 21, 5), (2560, 52, 12), (1880, 38, 9), (10000, 200, 50), (2920, 59, 14),
    (1560, 32, 7), (1160, 24, 5), (28240, 565, 141), (28240, 565, 141), (28120, 563, 140),
]
# (train, eval) for the Extended size, whose class sizes vary
EXTENDED_ROWS = [
    (252, 63), (96, 24), (40, 10), (77, 19), (82, 20), (94, 23), (82, 20), (20, 5), (20, 5),
    (31, 7), (21, 5), (22, 5), (27, 6), (14, 5), (16, 5), (36, 9), (36, 9), (32, 8), (157, 39),
    (16, 5), (21, 5), (52, 12), (38, 9), (200, 50), (59, 14), (32, 8), (24, 5),
]


def _record(n_classes, n_per=3, dim=4, ident="ds", domain="D"):
    groups = tuple(
        ClassGroup(f"c{i}", np.full((n_per, dim), i, dtype=np.float32)) for i in range(n_classes)
    )
    return DatasetRecord(ident, domain, dim, groups)


def _write_manifest(path, classes, dim=4, payload=None):
    path.mkdir(parents=True, exist_ok=True)
    offset, items = 0, []
    for cid, n in classes:
        items.append({"class_id": cid, "n_samples": n, "offset": offset})
        offset += n * dim * 4
    (path / "manifest.json").write_text(json.dumps({"id": "toy", "domain": "D", "dim": dim, "classes": items}))
    if payload is None:
        payload = np.arange(offset // 4, dtype="<f4").tobytes()
    (path / "embeddings.bin").write_bytes(payload)


def test_load_two_by_three(tmp_path):
    _write_manifest(tmp_path / "a", [("x", 3), ("y", 3)])
    assert (tmp_path / "a" / "embeddings.bin").stat().st_size == 96
    ds = load_dataset(tmp_path / "a")
    assert ds.n_samples == 6
    np.testing.assert_array_equal(ds.classes[1].samples[0], [12, 13, 14, 15])


def test_load_payload_size_mismatch(tmp_path):
    _write_manifest(tmp_path / "a", [("x", 3), ("y", 3)], payload=b"\0" * 95)
    with pytest.raises(DataError, match="payload size mismatch"):
        load_dataset(tmp_path / "a")


def test_load_duplicate_class(tmp_path):
    _write_manifest(tmp_path / "a", [("x", 3), ("x", 3)])
    with pytest.raises(DataError, match="duplicate class"):
        load_dataset(tmp_path / "a")


def test_load_non_finite_names_record(tmp_path):
    vals = np.zeros(24, dtype="<f4")
    vals[5] = np.nan
    _write_manifest(tmp_path / "a", [("x", 3), ("y", 3)], payload=vals.tobytes())
    with pytest.raises(DataError, match="toy"):
        load_dataset(tmp_path / "a")


def test_load_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nothing")


def test_save_load_roundtrip(tmp_path, small_registry):
    reg = save_registry(small_registry, tmp_path / "reg", seed=5)
    loaded, seed = load_registry(reg)
    assert seed == 5
    assert [d.id for d in loaded] == [d.id for d in small_registry]
    for a, b in zip(loaded, small_registry):
        assert a.domain == b.domain
        for ga, gb in zip(a.classes, b.classes):
            assert ga.class_id == gb.class_id
            np.testing.assert_array_equal(ga.samples, gb.samples)


def test_split_examples():
    assert split_counts(315) == (252, 63)
    assert split_counts(19) == (14, 5)
    assert split_counts(10) == (5, 5)


def test_split_mini_rows():
    for images, train, test in MINI_ROWS:
        assert split_counts(images // 40) == (train, test), images


def test_split_extended_rows():
    for train, test in EXTENDED_ROWS:
        assert split_counts(train + test) == (train, test)


def test_split_too_small():
    with pytest.raises(DataError, match="dataset too small to split"):
        split_classes(_record(5))


@given(st.integers(6, 800))
def test_split_partition(c):
    cs = split_classes(_record(c, n_per=1, dim=1))
    assert set(cs.train_classes).isdisjoint(cs.test_classes)
    assert len(cs.train_classes) + len(cs.test_classes) == c
    assert len(cs.test_classes) == max(math.floor(0.2 * c + 1e-9), 5)


def test_split_takes_last_classes():
    cs = split_classes(_record(10))
    assert cs.test_classes == ("c5", "c6", "c7", "c8", "c9")
    assert [g.class_id for g in apply_split(_record(10), "train").classes] == ["c0", "c1", "c2", "c3", "c4"]


def test_loo_counts():
    reg = [_record(6, ident=f"{d}-{j}", domain=d) for d in "ABCDEFGHIJ" for j in range(3)]
    part = loo_partition(reg, "C")
    assert len(part.train_ids) == 27 and len(part.eval_ids) == 3
    assert set(part.train_ids) | set(part.eval_ids) == {r.id for r in reg}
    assert not set(part.train_ids) & set(part.eval_ids)


def test_loo_errors():
    reg = [_record(6, ident="a", domain="A")]
    with pytest.raises(DataError, match="no training data"):
        loo_partition(reg, "A")
    with pytest.raises(DataError, match="unknown domain"):
        loo_partition(reg, "Nonexistent")


def test_selection_probabilities_examples():
    np.testing.assert_allclose(selection_probabilities([100, 300]), [0.25, 0.75])
    np.testing.assert_allclose(selection_probabilities([50]), [1.0])
    np.testing.assert_allclose(selection_probabilities([1, 1, 2]), [0.25, 0.25, 0.5])
    with pytest.raises(DataError):
        selection_probabilities([])


@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=20), st.randoms())
def test_selection_probabilities_properties(sizes, rnd):
    p = selection_probabilities(sizes)
    assert abs(p.sum() - 1) < 1e-12
    perm = list(range(len(sizes)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(selection_probabilities([sizes[i] for i in perm]), p[perm], rtol=0, atol=1e-15)


def test_synth_deterministic_and_shapes():
    spec = SyntheticSpec(2, 1, 5, 40, 16, seed=7)
    a, b = synth_generate(spec), synth_generate(spec)
    assert len(a) == 2
    for ra, rb in zip(a, b):
        for ga, gb in zip(ra.classes, rb.classes):
            assert ga.samples.tobytes() == gb.samples.tobytes()


def test_synth_across_processes():
    code = (
        "from geomicl.data import synth_generate, SyntheticSpec;import hashlib;"
        "h=hashlib.sha256();"
        "[h.update(g.samples.tobytes()) for r in synth_generate(SyntheticSpec(2,2,6,seed=3)) for g in r.classes];"
        "print(h.hexdigest())"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)}
    assert len(outs) == 1


def test_synth_zero_noise():
    for ds in synth_generate(SyntheticSpec(2, 1, 4, noise_scale=0.0)):
        for g in ds.classes:
            assert np.all(g.samples == g.samples[0])


def test_synth_nearest_centroid_oracle():
    # well separated classes: nearest centroid on held-out draws is perfect
    ds = synth_generate(SyntheticSpec(1, 1, 5, samples_per_class=40, class_separation=10.0, noise_scale=0.1, seed=2))[0]
    rng = np.random.default_rng(0)
    centroids = np.stack([g.samples[:20].mean(0) for g in ds.classes])
    correct = 0
    for _ in range(1000):
        c = rng.integers(5)
        x = ds.classes[c].samples[20 + rng.integers(20)]
        correct += int(np.argmin(((centroids - x) ** 2).sum(1)) == c)
    assert correct == 1000


def test_synthetic_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(0, 1, 1)
    with pytest.raises(DataError):
        SyntheticSpec(1, 1, 1, class_separation=0)


def test_record_invariants():
    with pytest.raises(DataError, match="non-finite"):
        DatasetRecord("x", "D", 2, (ClassGroup("a", np.array([[np.inf, 0]], dtype=np.float32)),))
    with pytest.raises(DataError, match="empty class"):
        DatasetRecord("x", "D", 2, (ClassGroup("a", np.zeros((0, 2), dtype=np.float32)),))
