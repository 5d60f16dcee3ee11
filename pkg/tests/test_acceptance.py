"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line through the ``verdict`` fixture; the
lines are repeated in the terminal summary.  Criteria 9 to 12 train desk-scale
models and take several minutes each.
"""
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from geomicl.curricula import build_curriculum, DistanceMatrix, gaussian_w2, otdd, otdd_from_supports
from geomicl.data import SyntheticSpec, loo_partition, split_counts, synth_generate
from geomicl.episodes import EpisodeShape, flip_count, perturb_context_labels, sample_episode
from geomicl.metrics import bwt
from geomicl.model import PRESETS, episode_loss, forward_logits
from geomicl.ot import exact_ot
from geomicl.trainers import TrainPlan, allocate_iterations, evaluate, train_offline, train_sequential

from test_cli import PLAN, SYNTH, _cfg, _files
from test_curricula import _g, greedy_reference
from test_data import MINI_ROWS
from test_metrics import bwt_reference
from test_model import _gradient_check, _jittered, _zero_head

SEEDS = (0, 1, 2)
STEPS = 20_000
DESK_SPEC = SyntheticSpec(6, 2, 15, samples_per_class=40, dim=16, class_separation=6.0, noise_scale=0.5)
NOISE_LEVELS = (1.0, 0.9, 0.75, 0.5)


@pytest.fixture(scope="module")
def desk_registry():
    return synth_generate(DESK_SPEC)


@pytest.fixture(scope="module")
def held_out(desk_registry):
    return loo_partition(desk_registry, desk_registry[-1].domain)


# ---------------------------------------------------------------- model


def test_c01_gradient_check(small_registry, verdict):
    t0 = time.perf_counter()
    params = _jittered(PRESETS["desk"], 0, dtype=np.float64)
    ep = sample_episode(small_registry, shape=EpisodeShape(5, 5, 4), rng=0)
    ep = replace(ep, context_x=ep.context_x.astype(np.float64), query_x=ep.query_x.astype(np.float64))
    worst = _gradient_check(params, ep, 200, np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    verdict(1, worst < 1e-4 and elapsed < 60, f"max rel err {worst:.2e} over 200 coords in {elapsed:.1f}s")


def test_c02_permutation_invariance(small_registry, verdict):
    worst = 0.0
    for seed in range(100):
        params = _jittered(PRESETS["desk"], 1000 + seed)
        ep = sample_episode(small_registry, shape=EpisodeShape(5, 5, 4), rng=1000 + seed)
        perm = np.random.default_rng(seed).permutation(ep.n_context)
        shuffled = replace(ep, context_x=ep.context_x[perm], context_y=ep.context_y[perm],
                           context_src=tuple(ep.context_src[i] for i in perm))
        worst = max(worst, float(np.abs(forward_logits(params, ep) - forward_logits(params, shuffled)).max()))
    verdict(2, worst < 1e-5, f"max |delta logit| {worst:.2e} over 100 pairs")


def test_c03_zero_head_loss(small_registry, verdict):
    worst = 0.0
    for seed in range(50):
        params = _zero_head(_jittered(PRESETS["desk"], seed))
        shape = EpisodeShape(5, 1 + seed % 5, 1 + seed % 7)
        ep = sample_episode(small_registry, shape=shape, rng=seed)
        worst = max(worst, abs(episode_loss(params, ep) - math.log(5)))
    verdict(3, worst < 1e-6, f"max |loss - ln 5| {worst:.2e} over 50 batches")


# ---------------------------------------------------------------- data and episodes


def test_c04_split_rows(verdict):
    bad = [(images, train, test) for images, train, test in MINI_ROWS if split_counts(images // 40) != (train, test)]
    verdict(4, not bad, f"{len(MINI_ROWS) - len(bad)}/{len(MINI_ROWS)} rows reproduced" + (f", mismatches {bad}" if bad else ""))


def test_c05_noise_counts(small_registry, verdict):
    shape = EpisodeShape(5, 5, 3)
    seen = {}
    for frac in NOISE_LEVELS:
        counts = set()
        for seed in range(200):
            ep = sample_episode(small_registry, shape=shape, rng=seed)
            noisy = perturb_context_labels(ep, frac, rng=seed)
            counts.add(int(np.sum(noisy.context_y != ep.context_y)))
        counts.add(flip_count(25, frac))
        seen[frac] = sorted(counts)
    ok = [seen[f] for f in NOISE_LEVELS] == [[0], [2], [6], [12]]
    verdict(5, ok, f"flips per fraction {seen}")


# ---------------------------------------------------------------- metrics and orderings


def test_c06_bwt_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        R = rng.random((5, 5))
        worst = max(worst, abs(bwt(R) - bwt_reference(R.tolist())))
    const = bwt(np.full((5, 5), 0.731))
    verdict(6, worst < 1e-12 and const == 0.0, f"max |bwt - reference| {worst:.1e}, constant matrix bwt {const}")


def test_c07_otdd_oracles(verdict):
    a, b = synth_generate(SyntheticSpec(1, 2, 6, samples_per_class=10, dim=5, seed=21))
    self_dist = otdd(a, a, solver="exact")
    asym = abs(otdd(a, b, solver="exact") - otdd(b, a, solver="exact"))

    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(200):
        na, nb, d = int(rng.integers(1, 9)), int(rng.integers(1, 9)), 4
        ga = [_g(rng.normal(size=d), rng.exponential(size=d)) for _ in range(na)]
        gb = [_g(rng.normal(size=d), rng.exponential(size=d)) for _ in range(nb)]
        xa, xb = np.stack([g.mean for g in ga]), np.stack([g.mean for g in gb])
        wa, wb = rng.dirichlet(np.ones(na)), rng.dirichlet(np.ones(nb))
        C = ((xa[:, None] - xb[None]) ** 2).sum(-1) + np.array([[gaussian_w2(u, v) ** 2 for v in gb] for u in ga])
        exact = exact_ot(wa, wb, C)[0]
        sk = otdd_from_supports(xa, wa, ga, range(na), xb, wb, gb, range(nb), eps=1e-3 * C.mean()) ** 2
        worst = max(worst, abs(sk - exact) / exact)

    closed = [
        (gaussian_w2(_g([0, 0], [1, 1]), _g([3, 4], [1, 1])), 5.0),
        (gaussian_w2(_g([0, 0], np.eye(2)), _g([3, 4], np.eye(2))), 5.0),
        (gaussian_w2(_g([1, 2], [0.5, 3]), _g([1, 2], [0.5, 3])), 0.0),
        (gaussian_w2(_g([0], [4.0]), _g([0], [0.25])), 1.5),
        (gaussian_w2(_g([0], [[4.0]]), _g([0], [[0.25]])), 1.5),
    ]
    w2_err = max(abs(got - want) for got, want in closed)
    ok = self_dist < 1e-9 and asym < 1e-9 and worst <= 0.02 and w2_err < 1e-9
    verdict(7, ok, f"d(A,A) {self_dist:.1e}, asymmetry {asym:.1e}, sinkhorn rel gap {worst:.2%}, W2 err {w2_err:.1e}")


def test_c08_curriculum_constructors(verdict):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 8))
        # small integers make ties common so the tie-break is exercised too
        M = np.triu(rng.integers(0, 5, size=(n, n)).astype(float), 1)
        M = M + M.T
        ids = tuple(f"d{i}" for i in rng.permutation(n))
        D = DistanceMatrix(ids, M)
        start = ids[int(rng.integers(n))]
        for strategy in ("e2e", "h2h", "switch"):
            mismatches += build_curriculum(strategy, distances=D, start=start).order != greedy_reference(M, ids, start, strategy)
    reversal_fail = 0
    for _ in range(500):
        n = int(rng.integers(1, 20))
        scores = {f"s{i}": float(v) for i, v in enumerate(rng.permutation(1000)[:n] / 1000)}
        reversal_fail += build_curriculum("h2e", scores).order != build_curriculum("e2h", scores).order[::-1]
    verdict(8, mismatches == 0 and reversal_fail == 0,
            f"{mismatches} greedy mismatches over 30000 orders, {reversal_fail} H2E reversal failures over 500")


# ---------------------------------------------------------------- desk-scale training


@pytest.fixture(scope="module")
def loo_runs(desk_registry, held_out):
    plan = TrainPlan(regime="offline_loo", iterations_total=STEPS, seeds=SEEDS)
    runs, t0 = [], time.perf_counter()
    for seed in SEEDS:
        params, report = train_offline(plan, desk_registry, held_out, PRESETS["desk"], seed)
        runs.append((params, report))
    return runs, time.perf_counter() - t0


def test_c09_loo_generalization(loo_runs, held_out, verdict):
    runs, elapsed = loo_runs
    accs = [r.mean_accuracy for _, r in runs]
    assert all(set(r.eval) == set(held_out.eval_ids) for _, r in runs)
    mean = float(np.mean(accs))
    verdict(9, mean >= 0.85 and elapsed < 15 * 60,
            f"held-out {held_out.held_out_domain} accuracy {mean:.4f} (seeds {np.round(accs, 4).tolist()}) in {elapsed / 60:.1f} min")


def test_c10_sequential_bwt(desk_registry, verdict):
    plan = TrainPlan(regime="sequential", iterations_total=STEPS, split="train", per_dataset_eval=True, seeds=SEEDS)
    bwts, sums = [], []
    for seed in SEEDS:
        _, report, _ = train_sequential(plan, desk_registry, PRESETS["desk"], seed)
        bwts.append(report.bwt)
        sums.append(sum(report.allocations))
    # the allocator on its own, over budgets that do not divide evenly
    rng = np.random.default_rng(3)
    for _ in range(1000):
        sizes = rng.integers(1, 5000, size=int(rng.integers(1, 40))).tolist()
        total = int(rng.integers(0, 10**6))
        for how in ("static", "proportional"):
            sums.append(sum(allocate_iterations(total, sizes, how)) - total + STEPS)
    mean = float(np.mean(bwts))
    ok = mean > -0.05 and all(s == STEPS for s in sums)
    verdict(10, ok, f"mean BWT {mean:+.4f} (seeds {np.round(bwts, 4).tolist()}), all allocations sum to budget: {all(s == STEPS for s in sums)}")


def test_c11_unsupervised(desk_registry, held_out, verdict):
    plan = TrainPlan(regime="unsupervised", iterations_total=STEPS, seeds=SEEDS)
    accs, lambdas = [], []

    def record(step, ep):
        lambdas.append(ep.lambdas)

    for seed in SEEDS:
        _, report = train_offline(plan, desk_registry, held_out, PRESETS["desk"], seed, on_episode=record)
        accs.append(report.mean_accuracy)
    lam = np.concatenate(lambdas)
    mean = float(np.mean(accs))
    ok = mean >= 0.70 and lam.size > 0 and bool(np.all((lam > 0) & (lam < 0.5)))
    verdict(11, ok, f"held-out accuracy {mean:.4f} (seeds {np.round(accs, 4).tolist()}), "
                    f"{lam.size} lambdas in [{lam.min():.3g}, {lam.max():.6f}]")


def test_c12_noise_monotone(loo_runs, desk_registry, held_out, verdict):
    runs, _ = loo_runs
    pool = [ds for ds in desk_registry if ds.id in set(held_out.eval_ids)]
    shape = EpisodeShape(5, 5, 10)
    means = []
    for frac in NOISE_LEVELS:
        accs = [evaluate(params, [ds], shape, 200, "all", noise_fraction=frac, seed=[seed, 12, b])
                for seed, (params, _) in zip(SEEDS, runs) for b, ds in enumerate(pool)]
        means.append(float(np.mean(np.concatenate(accs))))
    ok = all(later <= earlier + 0.01 for earlier, later in zip(means, means[1:]))
    verdict(12, ok, "mean accuracy " + " -> ".join(f"{f}:{m:.4f}" for f, m in zip(NOISE_LEVELS, means)))


# ---------------------------------------------------------------- determinism


def test_c13_cli_determinism(tmp_path, verdict):
    from geomicl.cli import run
    from geomicl.overlap import LabelVocab, save_vocab

    def twice(name, argv):
        codes = [run(argv + ["--out", str(tmp_path / f"{name}_{k}")]) for k in "ab"]
        a, b = _files(tmp_path / f"{name}_a"), _files(tmp_path / f"{name}_b")
        return codes == [0, 0] and a == b and len(a) > 0

    results = {}
    synth = _cfg(tmp_path, "synth", {"synthetic": SYNTH})
    results["synth"] = twice("synth", ["synth", "--config", synth])
    reg = str(tmp_path / "synth_a" / "datasets" / "registry.json")
    loo = _cfg(tmp_path, "loo", {"registry": reg, "preset": "loo", "held_out": "SmallAnimals",
                                 "plan": {**PLAN, "log_trajectory": True}, "seeds": [0, 1]})
    results["train loo"] = twice("loo", ["train", "--config", loo, "--noise", "1.0", "0.5"])
    unsup = _cfg(tmp_path, "unsup", {"registry": reg, "preset": "unsupervised", "held_out": "SmallAnimals", "plan": PLAN, "seeds": [0]})
    results["train unsupervised"] = twice("unsup", ["train", "--config", unsup])
    cur = _cfg(tmp_path, "cur", {"registry": reg, "strategy": "switch", "solver": "exact", "start": "LargeAnimals-0"})
    results["curriculum"] = twice("cur", ["curriculum", "--config", cur])
    probe = _cfg(tmp_path, "probe", {"registry": reg, "strategy": "e2h", "probe": {"epochs": 3}})
    results["curriculum probe"] = twice("probe", ["curriculum", "--config", probe])
    seq = _cfg(tmp_path, "seq", {"registry": reg, "preset": "sequential-static", "plan": {**PLAN, "iterations_total": 40}, "seeds": [0]})
    results["train sequential"] = twice("seq", ["train", "--config", seq, "--curriculum", str(tmp_path / "cur_a" / "curriculum.json")])
    ck = json.loads((tmp_path / "loo_a" / "report.json").read_text())["payload"]["runs"][0]["checkpoints"][0][2]
    ev = _cfg(tmp_path, "ev", {"registry": reg, "checkpoints": [str(tmp_path / "loo_a" / ck)], "held_out": "SmallAnimals",
                               "tasks": 5, "n_ways": 3, "k_shots": 2, "n_queries": 2})
    results["eval"] = twice("ev", ["eval", "--config", ev, "--noise", "1.0", "0.75"])
    hm = _cfg(tmp_path, "hm", {"kind": "heatmap", "reports": [str(tmp_path / "seq_a")]})
    results["report"] = twice("hm", ["report", "--config", hm])
    save_vocab(LabelVocab("ref", ("dog", "cat", "owl")), tmp_path / "ref", np.eye(3))
    save_vocab(LabelVocab("ds", ("Dog", "kitty", "lamp")), tmp_path / "ds", np.array([[1, 0, 0], [0.2, 1, 0], [0.3, 0.3, 1.0]]))
    au = _cfg(tmp_path, "au", {"reference": str(tmp_path / "ref"), "datasets": [str(tmp_path / "ds")]})
    results["audit"] = twice("au", ["audit", "--config", au])
    failed = [k for k, v in results.items() if not v]
    verdict(13, not failed, f"{len(results) - len(failed)}/{len(results)} commands byte-identical on rerun"
                            + (f", differing: {failed}" if failed else ""))
