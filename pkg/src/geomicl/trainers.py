"""Training regimes: offline leave-one-domain-out (single-dataset or merged
episodes), unsupervised pseudo-task training, and sequential streaming over
an ordered list of datasets without replay.

Every random draw comes from a generator keyed by ``(seed, stream, index)``,
so a run is reproducible from its plan and seed alone and two regimes that
visit the same steps see the same episodes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as data_core
from .checkpoint import save_checkpoint
from .data import DatasetRecord, LooPartition
from .episodes import EpisodeShape, make_rng, perturb_context_labels, sample_episode, split_pool
from .metrics import bwt, empty_matrix
from .model import ModelConfig, ModelParams, init_params, loss_and_grads, predict
from .optim import OptimizerState, adam_step
from .unsup import DEFAULT_AUGMENTATIONS, AugmentationSpec, MixupConfig, sample_unsupervised_episode

log = logging.getLogger(__name__)

REGIMES = ("offline_loo", "offline_merged", "sequential", "unsupervised")

# seed-stream tags
TRAIN, VALID, EVAL, NOISE = 0, 1, 2, 3


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    regime: str = "offline_loo"
    iterations_total: int = 20000
    epoch_len: int = 500
    shape: EpisodeShape = EpisodeShape()
    allocation: str = "static"
    dataset_order: tuple[str, ...] | None = None
    eval_tasks: int = 200
    seeds: tuple[int, ...] = (0, 1, 2)
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.05
    val_tasks: int = 50
    split: str = "all"  # training split; "all" for LOO, "train" for in-domain protocols
    eval_split: str = "all"
    per_dataset_eval: bool = False
    log_trajectory: bool = False
    accumulate: int = 1
    eval_fraction: float = 0.2
    min_eval: int = 5
    balance_queries: bool = False
    augmentations: tuple[AugmentationSpec, ...] = DEFAULT_AUGMENTATIONS
    mixup: MixupConfig = MixupConfig()

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise TrainError(f"unknown regime {self.regime!r}")
        if self.iterations_total < 0 or self.epoch_len < 1:
            raise TrainError("iterations_total must be >= 0 and epoch_len >= 1")
        if 0 < self.iterations_total < self.epoch_len and self.regime != "sequential":
            raise TrainError("iterations_total must be at least one epoch")
        if self.allocation not in ("static", "proportional"):
            raise TrainError(f"unknown allocation {self.allocation!r}")
        if self.accumulate < 1:
            raise TrainError("accumulate must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = asdict(self.shape)
        d["augmentations"] = [asdict(a) for a in self.augmentations]
        d["mixup"] = asdict(self.mixup)
        d["dataset_order"] = list(self.dataset_order) if self.dataset_order is not None else None
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class CheckpointIndex:
    entries: list[tuple[str, int, str | None]] = field(default_factory=list)
    snapshots: dict[str, ModelParams] = field(default_factory=dict, repr=False)

    def add(self, tag: str, step: int, path, params: ModelParams) -> None:
        if self.entries and step <= self.entries[-1][1]:
            raise TrainError("checkpoint steps must be strictly increasing")
        self.entries.append((tag, step, None if path is None else str(path)))
        self.snapshots[tag] = params

    def latest(self) -> ModelParams:
        if not self.entries:
            raise TrainError("no checkpoint yet")
        return self.snapshots[self.entries[-1][0]]

    def get(self, tag: str) -> ModelParams:
        if tag not in self.snapshots:
            raise TrainError(f"no checkpoint tagged {tag!r}")
        return self.snapshots[tag]


@dataclass
class RunReport:
    regime: str
    seed: int
    eval: dict[str, list[float]] = field(default_factory=dict)
    best_step: int | None = None
    best_val: float | None = None
    trajectory: list[tuple[int, float]] | None = None
    allocations: list[int] | None = None
    dataset_order: list[str] | None = None
    R: list[list[float | None]] | None = None
    bwt: float | None = None
    lambda_range: tuple[float, float] | None = None
    checkpoints: list[tuple[str, int, str | None]] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        accs = [a for v in self.eval.values() for a in v]
        return float(np.mean(accs)) if accs else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_accuracy"] = self.mean_accuracy
        return d


# --------------------------------------------------------------------------
# allocation


def allocate_iterations(iterations_total: int, sizes: Sequence[int], allocation: str = "static") -> list[int]:
    """Per-dataset iteration budgets that always sum to ``iterations_total``."""
    A = len(sizes)
    if A == 0:
        raise TrainError("empty dataset order")
    I = int(iterations_total)
    if allocation == "static":
        base = I // A
        out = [base] * A
        out[-1] += I - base * A
        return out
    if allocation == "proportional":
        sizes = np.asarray(sizes, dtype=np.float64)
        exact = I * sizes / sizes.sum()
        out = np.floor(exact).astype(np.int64)
        # largest remainder; ties go to the earlier dataset
        rem = exact - out
        for i in np.argsort(-rem, kind="stable")[: I - int(out.sum())]:
            out[i] += 1
        return [int(v) for v in out]
    raise TrainError(f"unknown allocation {allocation!r}")


# --------------------------------------------------------------------------
# evaluation


def evaluate(
    params: ModelParams,
    pool: Sequence[DatasetRecord],
    shape: EpisodeShape,
    n_tasks: int,
    split: str = "test",
    noise_fraction: float | None = None,
    seed=0,
    mode: str = "single",
    eval_fraction: float = 0.2,
    min_eval: int = 5,
) -> np.ndarray:
    """Per-task query accuracy on ``n_tasks`` freshly sampled episodes.

    ``noise_fraction`` is the fraction of context labels kept correct.  Task
    ``i`` draws from the stream ``(seed, EVAL, i)`` and its label noise from
    ``(seed, NOISE, i)``, so vectors at different noise levels are paired.
    """
    key = list(np.atleast_1d(seed))
    accs = np.empty(n_tasks)
    for i in range(n_tasks):
        ep = sample_episode(
            pool, mode, shape, split, rng=key + [EVAL, i], eval_fraction=eval_fraction, min_eval=min_eval
        )
        if noise_fraction is not None:
            ep = perturb_context_labels(ep, noise_fraction, rng=key + [NOISE, i])
        accs[i] = np.mean(predict(params, ep) == ep.query_y)
    return accs


# --------------------------------------------------------------------------
# training loops


def _sample_training_episode(plan: TrainPlan, pool, rng):
    if plan.regime == "unsupervised":
        views = split_pool(pool, plan.split, plan.eval_fraction, plan.min_eval)
        ds = views[rng.choice(len(views), p=data_core.selection_probabilities(views))]
        return sample_unsupervised_episode(ds, plan.shape, plan.augmentations, plan.mixup, rng)
    mode = "merged" if plan.regime == "offline_merged" else "single"
    return sample_episode(
        pool,
        mode,
        plan.shape,
        plan.split,
        rng,
        balance_queries=plan.balance_queries,
        eval_fraction=plan.eval_fraction,
        min_eval=plan.min_eval,
    )


def _step(params, state, plan, pool, seed, step, on_episode, lam_seen):
    grads_sum = None
    for j in range(plan.accumulate):
        key = [seed, TRAIN, step] if plan.accumulate == 1 else [seed, TRAIN, step, j]
        ep = _sample_training_episode(plan, pool, make_rng(key))
        if on_episode is not None:
            on_episode(step, ep)
        if ep.lambdas is not None and len(ep.lambdas):
            lam_seen[0] = min(lam_seen[0], float(ep.lambdas.min()))
            lam_seen[1] = max(lam_seen[1], float(ep.lambdas.max()))
        _, grads = loss_and_grads(params, ep)
        if grads_sum is None:
            grads_sum = grads
        else:
            grads_sum = {k: grads_sum[k] + grads[k] for k in grads_sum}
    if plan.accumulate > 1:
        grads_sum = {k: v / plan.accumulate for k, v in grads_sum.items()}
    return adam_step(params, grads_sum, state)


def _optimizer(params, plan: TrainPlan) -> OptimizerState:
    total = plan.iterations_total
    return OptimizerState.create(params, plan.peak_lr, total, int(plan.warmup_fraction * total))


def train_offline(
    plan: TrainPlan,
    registry: Sequence[DatasetRecord],
    partition: LooPartition | None,
    cfg: ModelConfig,
    seed: int = 0,
    checkpoint_dir=None,
    on_episode: Callable | None = None,
) -> tuple[ModelParams, RunReport]:
    """Offline training on every non-held-out dataset at once.

    With ``partition=None`` the whole registry is used for training and
    evaluation runs on ``plan.eval_split`` of every dataset (the in-domain
    offline baseline).  Returns the best-validation parameters when
    validation is enabled, else the final ones.
    """
    if plan.regime == "sequential":
        raise TrainError("use train_sequential for the sequential regime")
    ids = data_core.by_id(registry)
    if partition is None:
        train_pool = list(registry)
        eval_pool = list(registry)
    else:
        train_pool = [ids[i] for i in partition.train_ids]
        eval_pool = [ids[i] for i in partition.eval_ids]

    params = init_params(_seeded(cfg, seed))
    state = _optimizer(params, plan)
    report = RunReport(plan.regime, seed)
    val_split = "test" if plan.split == "train" else "all"
    best = params
    trajectory = []
    lam_seen = [np.inf, -np.inf]

    for step in range(plan.iterations_total):
        params, state = _step(params, state, plan, train_pool, seed, step, on_episode, lam_seen)
        if plan.val_tasks and (step + 1) % plan.epoch_len == 0:
            val = np.mean(
                [
                    evaluate(params, [ds], plan.shape, plan.val_tasks, val_split, seed=[seed, VALID, k],
                             eval_fraction=plan.eval_fraction, min_eval=plan.min_eval).mean()
                    for k, ds in enumerate(train_pool)
                ]
            )
            trajectory.append((step + 1, float(val)))
            if report.best_val is None or val > report.best_val:
                report.best_val, report.best_step, best = float(val), step + 1, params
                log.debug("seed %d step %d: new best validation %.4f", seed, step + 1, val)

    final = best if report.best_step is not None else params
    if checkpoint_dir is not None:
        tag = "best" if report.best_step is not None else "final"
        path = save_checkpoint(final, state, Path(checkpoint_dir) / f"seed{seed}_{tag}.ckpt")
        report.checkpoints.append((tag, report.best_step or state.step, str(path)))
    for k, ds in enumerate(eval_pool):
        report.eval[ds.id] = evaluate(
            final, [ds], plan.shape, plan.eval_tasks, plan.eval_split, seed=[seed, EVAL, k],
            eval_fraction=plan.eval_fraction, min_eval=plan.min_eval,
        ).tolist()
    if plan.log_trajectory:
        report.trajectory = trajectory
    if plan.regime == "unsupervised" and np.isfinite(lam_seen[0]):
        report.lambda_range = (lam_seen[0], lam_seen[1])
    return final, report


def train_sequential(
    plan: TrainPlan,
    registry: Sequence[DatasetRecord],
    cfg: ModelConfig,
    seed: int = 0,
    checkpoint_dir=None,
    on_episode: Callable | None = None,
) -> tuple[ModelParams, RunReport, CheckpointIndex]:
    """Stream datasets in ``plan.dataset_order``; each is visible only during
    its iteration allocation and only through its train classes.  A
    checkpoint follows every dataset.  With ``per_dataset_eval`` the full
    accuracy matrix (and BWT) is filled, otherwise only the final row."""
    if plan.regime != "sequential":
        raise TrainError("train_sequential needs regime 'sequential'")
    ids = data_core.by_id(registry)
    order = list(plan.dataset_order) if plan.dataset_order is not None else [ds.id for ds in registry]
    if sorted(order) != sorted(ids) or len(set(order)) != len(order):
        raise TrainError("dataset_order must be a permutation of the registry ids")
    stream = [ids[i] for i in order]
    for ds in stream:
        data_core.split_classes(ds, plan.eval_fraction, plan.min_eval)
    alloc = allocate_iterations(plan.iterations_total, [ds.n_samples for ds in stream], plan.allocation)

    params = init_params(_seeded(cfg, seed))
    state = _optimizer(params, plan)
    index = CheckpointIndex()
    report = RunReport("sequential", seed, allocations=alloc, dataset_order=order)
    A = len(stream)
    R = empty_matrix(A)
    trajectory = []
    step = 0
    lam_seen = [np.inf, -np.inf]

    def eval_on(params, b):
        return evaluate(params, [stream[b]], plan.shape, plan.eval_tasks, "test", seed=[seed, EVAL, b],
                        eval_fraction=plan.eval_fraction, min_eval=plan.min_eval)

    for a, ds in enumerate(stream):
        for _ in range(alloc[a]):
            params, state = _step(params, state, plan, [ds], seed, step, on_episode, lam_seen)
            step += 1
        path = None
        if checkpoint_dir is not None:
            path = save_checkpoint(params, state, Path(checkpoint_dir) / f"seed{seed}_{a:03d}_{ds.id}.ckpt")
        if index.entries and step == index.entries[-1][1]:
            raise TrainError(f"dataset {ds.id!r} received no iterations")
        index.add(ds.id, step, path, params)
        if plan.per_dataset_eval or a == A - 1:
            for b in range(a + 1):
                accs = eval_on(params, b)
                R[a, b] = accs.mean()
                if a == A - 1:
                    report.eval[stream[b].id] = accs.tolist()
            trajectory.append((step, float(np.mean(R[a, : a + 1]))))

    report.R = [[None if np.isnan(v) else float(v) for v in row] for row in R]
    if plan.per_dataset_eval and A >= 2:
        report.bwt = bwt(R)
    if plan.log_trajectory:
        report.trajectory = trajectory
    report.checkpoints = list(index.entries)
    return params, report, index


def _seeded(cfg: ModelConfig, seed: int) -> ModelConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return ModelConfig(**d)
