"""Command-line entry point: ``geomicl {synth,train,eval,curriculum,audit,report}``.

Every command validates its config against a schema and front-loads the
semantic checks that later stages would fail on, then writes into ``--out``:

* ``report.json``  deterministic body (config echo, config hash, artifact
  version, payload); identical bytes for identical config and seeds
* ``header.json``  wall-clock timestamp and argv, the only varying file
* CSV sidecars with long-form data for plotting

Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import data as data_core
from .checkpoint import CheckpointError, load_checkpoint
from .curricula import (
    CurriculumError,
    CurriculumOrder,
    ProbeConfig,
    build_curriculum,
    distance_matrix,
    map_order,
    probe_difficulty,
)
from .data import DataError, SyntheticSpec
from .episodes import EpisodeError, EpisodeShape
from .metrics import MetricsError, aggregate, heatmap_deltas, long_form_csv
from .model import PRESETS, ModelConfig, ModelError
from .ot import EXACT_SUPPORT_CAP, OTError
from .overlap import OverlapError, audit, load_vocab, write_report
from .schema import SCHEMAS
from .trainers import EVAL, TrainError, TrainPlan, evaluate, train_offline, train_sequential
from .unsup import AugmentationSpec, MixupConfig

log = logging.getLogger("geomicl")

DEFAULT_SYNTHETIC = {"n_domains": 6, "datasets_per_domain": 2, "classes_per_dataset": 15}
DEFAULT_SEEDS = [0, 1, 2]

PRESET_PLANS = {
    "loo": {"regime": "offline_loo"},
    "merged": {"regime": "offline_merged"},
    "sequential-static": {"regime": "sequential", "allocation": "static", "split": "train", "per_dataset_eval": True},
    "sequential-proportional": {
        "regime": "sequential",
        "allocation": "proportional",
        "split": "train",
        "per_dataset_eval": True,
    },
    "unsupervised": {"regime": "unsupervised"},
}

RUNTIME_ERRORS = (
    DataError,
    TrainError,
    OTError,
    CurriculumError,
    OverlapError,
    CheckpointError,
    EpisodeError,
    ModelError,
    MetricsError,
    OSError,
)


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling


def validate(command: str, cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    err = jsonschema.exceptions.best_match(validator.iter_errors(cfg))
    if err is not None:
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"at {pointer}: {err.message}")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def artifact_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _registry(cfg: dict, base: Path) -> list[data_core.DatasetRecord]:
    if "registry" in cfg:
        return data_core.load_registry(_resolve(base, cfg["registry"]))[0]
    return data_core.synth_generate(SyntheticSpec(**cfg.get("synthetic", DEFAULT_SYNTHETIC)))


def _single_dim(registry) -> int:
    dims = {ds.dim for ds in registry}
    if len(dims) != 1:
        raise ConfigError(f"registry mixes embedding widths {sorted(dims)}")
    return dims.pop()


def _model_config(mcfg: dict, dim: int) -> ModelConfig:
    mcfg = dict(mcfg)
    base = PRESETS[mcfg.pop("preset", "desk")].to_dict()
    base.update(mcfg)
    if base["feat_mode"] == "trainable_mlp":
        base.setdefault("input_dim", None)
        if base["input_dim"] is None:
            base["input_dim"] = dim
        if base["input_dim"] != dim:
            raise ConfigError(f"at /model/input_dim: {base['input_dim']} does not match embedding width {dim}")
    elif "feat_width" not in mcfg:
        base["feat_width"] = dim
    elif base["feat_width"] != dim:
        raise ConfigError(f"at /model/feat_width: identity features need feat_width == embedding width {dim}")
    try:
        return ModelConfig(**base)
    except ModelError as exc:
        raise ConfigError(f"at /model: {exc}") from None


def _shape(d: dict) -> EpisodeShape:
    try:
        return EpisodeShape(d.get("n_ways", 5), d.get("k_shots", 5), d.get("n_queries", 10))
    except EpisodeError as exc:
        raise ConfigError(str(exc)) from None


def _check_shape(shape: EpisodeShape, model: ModelConfig, pools, split: str, frac: float, min_eval: int, where: str):
    if shape.n_ways > model.n_ways_max:
        raise ConfigError(f"at {where}: n_ways {shape.n_ways} exceeds the model's n_ways_max {model.n_ways_max}")
    for ds in pools:
        try:
            n_cls = len(data_core.apply_split(ds, split, frac, min_eval).classes)
        except DataError as exc:
            raise ConfigError(f"dataset {ds.id!r}: {exc}") from None
        if n_cls < shape.n_ways:
            raise ConfigError(f"dataset {ds.id!r} has {n_cls} classes in split {split!r}, fewer than n_ways")


def _map(fn, jobs):
    n = min(data_core.default_threads(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(n) as ex:
        return list(ex.map(fn, jobs))


def _write(out: Path, command: str, cfg: dict, payload: dict, sidecars: dict[str, str], argv) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {
        "command": command,
        "artifact_version": artifact_version(),
        "config": cfg,
        "config_hash": config_hash(cfg),
        "payload": payload,
    }
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    for name, text in sidecars.items():
        (out / name).write_text(text)
    header = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "command": command,
        "argv": list(argv),
    }
    (out / "header.json").write_text(json.dumps(header, indent=2) + "\n")


def _agg(runs: list[list[float]]) -> dict:
    return aggregate(runs).to_dict()


# --------------------------------------------------------------------------
# synth


def cmd_synth(cfg: dict, base: Path, out: Path) -> tuple[dict, dict]:
    spec = SyntheticSpec(**cfg["synthetic"])
    records = data_core.synth_generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    reg = data_core.save_registry(records, out / "datasets", seed=spec.seed)
    payload = {
        "registry": os.path.relpath(reg, out),
        "datasets": [{"id": ds.id, "domain": ds.domain, "classes": len(ds.classes), "samples": ds.n_samples} for ds in records],
    }
    return payload, {}


# --------------------------------------------------------------------------
# train


def _plan(preset: str, pcfg: dict, seeds, order) -> TrainPlan:
    kw = dict(PRESET_PLANS[preset])
    pcfg = dict(pcfg)
    shape = _shape(pcfg)
    for k in ("n_ways", "k_shots", "n_queries"):
        pcfg.pop(k, None)
    try:
        if "augmentations" in pcfg:
            pcfg["augmentations"] = tuple(AugmentationSpec(**a) for a in pcfg["augmentations"])
        if "mixup" in pcfg:
            m = dict(pcfg["mixup"])
            if "lambda_range" in m:
                m["lambda_range"] = tuple(m["lambda_range"])
            pcfg["mixup"] = MixupConfig(**m)
        kw.update(pcfg)
        return TrainPlan(shape=shape, seeds=tuple(seeds), dataset_order=order, **kw)
    except (TrainError, ValueError) as exc:
        raise ConfigError(f"at /plan: {exc}") from None


def _train_job(job) -> dict:
    plan, registry, partition, model_cfg, seed, ckpt_dir, noise = job
    if plan.regime == "sequential":
        params, report, _ = train_sequential(plan, registry, model_cfg, seed, ckpt_dir)
        ids = data_core.by_id(registry)
        eval_pool = [ids[i] for i in report.dataset_order]
        split = "test"
    else:
        params, report = train_offline(plan, registry, partition, model_cfg, seed, ckpt_dir)
        ids = data_core.by_id(registry)
        eval_pool = [ids[i] for i in partition.eval_ids] if partition is not None else list(registry)
        split = plan.eval_split
    noisy = {}
    for f in noise:
        noisy[repr(float(f))] = {
            ds.id: evaluate(
                params, [ds], plan.shape, plan.eval_tasks, split, noise_fraction=f,
                seed=[seed, EVAL, k],
                eval_fraction=plan.eval_fraction, min_eval=plan.min_eval,
            ).tolist()
            for k, ds in enumerate(eval_pool)
        }
    return {"report": report.to_dict(), "noise": noisy}


def cmd_train(cfg: dict, base: Path, out: Path) -> tuple[dict, dict]:
    registry = _registry(cfg, base)
    dim = _single_dim(registry)
    preset = cfg["preset"]
    seeds = cfg.get("seeds", DEFAULT_SEEDS)
    model_cfg = _model_config(cfg.get("model", {}), dim)
    regime = PRESET_PLANS[preset]["regime"]
    ids = [ds.id for ds in registry]

    partition, order = None, None
    if regime == "sequential":
        if "held_out" in cfg:
            raise ConfigError("at /held_out: sequential presets stream the whole registry")
        if "curriculum" in cfg:
            path = _resolve(base, cfg["curriculum"])
            if not path.exists():
                raise ConfigError(f"at /curriculum: curriculum file {str(path)!r} not found")
            try:
                order = CurriculumOrder.load(path).order
            except CurriculumError as exc:
                raise ConfigError(f"at /curriculum: {exc}") from None
            if sorted(order) != sorted(ids):
                raise ConfigError("at /curriculum: order is not a permutation of the registry ids")
        else:
            order = build_curriculum("domain_based", domains=[(ds.id, ds.domain) for ds in registry]).order
    else:
        if "curriculum" in cfg:
            raise ConfigError("at /curriculum: only sequential presets take a curriculum")
        if "held_out" not in cfg:
            raise ConfigError(f"at /held_out: preset {preset!r} needs a held-out domain")
        try:
            partition = data_core.loo_partition(registry, cfg["held_out"])
        except DataError as exc:
            raise ConfigError(f"at /held_out: {exc}") from None

    plan = _plan(preset, cfg.get("plan", {}), seeds, order)
    if regime == "sequential":
        for ds in registry:
            try:
                data_core.split_classes(ds, plan.eval_fraction, plan.min_eval)
            except DataError as exc:
                raise ConfigError(f"dataset {ds.id!r}: {exc}") from None
        _check_shape(plan.shape, model_cfg, registry, plan.split, plan.eval_fraction, plan.min_eval, "/plan")
        _check_shape(plan.shape, model_cfg, registry, "test", plan.eval_fraction, plan.min_eval, "/plan")
        if plan.iterations_total < len(registry):
            raise ConfigError("at /plan/iterations_total: fewer iterations than datasets in the stream")
    else:
        by = data_core.by_id(registry)
        train_pool = [by[i] for i in partition.train_ids]
        eval_pool = [by[i] for i in partition.eval_ids]
        if plan.regime != "unsupervised":
            _check_shape(plan.shape, model_cfg, train_pool, plan.split, plan.eval_fraction, plan.min_eval, "/plan")
        elif plan.shape.k_shots > len(plan.augmentations):
            raise ConfigError("at /plan/augmentations: need at least k_shots distinct augmentations")
        _check_shape(plan.shape, model_cfg, eval_pool, plan.eval_split, plan.eval_fraction, plan.min_eval, "/plan")

    noise = cfg.get("noise", [])
    ckpt_dir = out / "checkpoints" if cfg.get("checkpoints", True) else None
    jobs = [(plan, registry, partition, model_cfg, s, ckpt_dir, noise) for s in seeds]
    results = _map(_train_job, jobs)

    runs = []
    rows = []
    for s, res in zip(seeds, results):
        rep = res["report"]
        rep["checkpoints"] = [
            [tag, step, None if p is None else os.path.relpath(p, out)] for tag, step, p in rep["checkpoints"]
        ]
        runs.append(rep)
        for ds_id, accs in rep["eval"].items():
            rows += [(s, ds_id, t, a) for t, a in enumerate(accs)]
        for f, per in res["noise"].items():
            for ds_id, accs in per.items():
                rows += [(s, f"{ds_id}@{f}", t, a) for t, a in enumerate(accs)]

    eval_ids = list(runs[0]["eval"])
    payload = {
        "preset": preset,
        "regime": regime,
        "held_out": cfg.get("held_out"),
        "dataset_order": list(order) if order is not None else None,
        "plan": plan.to_dict(),
        "model": model_cfg.to_dict(),
        "runs": runs,
        "aggregate": {
            "overall": _agg([[a for i in eval_ids for a in r["eval"][i]] for r in runs]),
            "per_dataset": {i: _agg([r["eval"][i] for r in runs]) for i in eval_ids},
        },
    }
    if noise:
        payload["noise"] = {
            f: _agg([[a for i in eval_ids for a in res["noise"][f][i]] for res in results])
            for f in results[0]["noise"]
        }
    sidecars = {"accuracies.csv": long_form_csv(rows)}
    if regime == "sequential":
        bw = [r["bwt"] for r in runs if r["bwt"] is not None]
        payload["bwt"] = {"per_run": bw, "mean": float(np.mean(bw)) if bw else None}
        mrows = []
        for s, r in zip(seeds, runs):
            for a, row in enumerate(r["R"]):
                for b, v in enumerate(row):
                    if v is not None:
                        mrows.append((s, f"{a}:{b}", f"{order[a]}|{order[b]}", v))
        sidecars["accuracy_matrix.csv"] = long_form_csv(mrows)
    return payload, sidecars


# --------------------------------------------------------------------------
# eval


def _eval_job(job):
    params, pool, shape, tasks, split, noise, seed, mode, frac, min_eval = job
    out = {}
    for f in noise:
        key = "clean" if f is None else repr(float(f))
        if mode == "merged":
            out[key] = {"merged": evaluate(params, pool, shape, tasks, split, f, [seed, EVAL, 0], "merged", frac, min_eval).tolist()}
        else:
            out[key] = {
                ds.id: evaluate(params, [ds], shape, tasks, split, f, [seed, EVAL, k], "single", frac, min_eval).tolist()
                for k, ds in enumerate(pool)
            }
    return out


def cmd_eval(cfg: dict, base: Path, out: Path) -> tuple[dict, dict]:
    registry = _registry(cfg, base)
    by = data_core.by_id(registry)
    if "datasets" in cfg and "held_out" in cfg:
        raise ConfigError("at /: give either datasets or held_out, not both")
    if "datasets" in cfg:
        missing = [i for i in cfg["datasets"] if i not in by]
        if missing:
            raise ConfigError(f"at /datasets: unknown dataset ids {missing}")
        pool = [by[i] for i in cfg["datasets"]]
    elif "held_out" in cfg:
        try:
            pool = [by[i] for i in data_core.loo_partition(registry, cfg["held_out"]).eval_ids]
        except DataError as exc:
            raise ConfigError(f"at /held_out: {exc}") from None
    else:
        pool = list(registry)
    shape = _shape(cfg)
    split = cfg.get("split", "all")
    frac, min_eval = cfg.get("eval_fraction", 0.2), cfg.get("min_eval", 5)
    models = []
    for p in cfg["checkpoints"]:
        path = _resolve(base, p)
        if not path.exists():
            raise ConfigError(f"at /checkpoints: checkpoint {str(path)!r} not found")
        params, _ = load_checkpoint(path)
        if params.config.in_dim != _single_dim(pool):
            raise ConfigError(f"at /checkpoints: {p!r} expects width {params.config.in_dim}")
        _check_shape(shape, params.config, pool, split, frac, min_eval, "/")
        models.append((p, params))
    seeds = cfg.get("seeds", [0])
    noise = cfg.get("noise", [None])
    jobs = [
        (params, pool, shape, cfg.get("tasks", 200), split, noise, s, cfg.get("mode", "single"), frac, min_eval)
        for _, params in models
        for s in seeds
    ]
    results = _map(_eval_job, jobs)
    runs, rows = [], []
    keys = [(name, s) for name, _ in models for s in seeds]
    for (name, s), res in zip(keys, results):
        runs.append({"checkpoint": name, "seed": s, "eval": res})
        for key, per in res.items():
            for tag, accs in per.items():
                rows += [(f"{name}#{s}", f"{tag}@{key}", t, a) for t, a in enumerate(accs)]
    payload = {
        "datasets": [ds.id for ds in pool],
        "split": split,
        "runs": runs,
        "aggregate": {
            key: _agg([[a for accs in r["eval"][key].values() for a in accs] for r in runs]) for key in runs[0]["eval"]
        },
    }
    return payload, {"accuracies.csv": long_form_csv(rows)}


# --------------------------------------------------------------------------
# curriculum


def cmd_curriculum(cfg: dict, base: Path, out: Path) -> tuple[dict, dict]:
    registry = _registry(cfg, base)
    strategy = cfg["strategy"]
    work = registry
    mapping = None
    if "proxy" in cfg:
        work = _registry(cfg["proxy"], base)
        mapping = cfg["proxy"].get("mapping")
        if mapping is None:
            mapping = {ds.id: ds.id for ds in work}
        unmapped = [ds.id for ds in work if ds.id not in mapping]
        if unmapped:
            raise ConfigError(f"at /proxy/mapping: proxy ids without a mapping {unmapped}")
    work_ids = [ds.id for ds in work]
    solver = cfg.get("solver", "sinkhorn")
    support = cfg.get("support", "class_mean")
    start = cfg.get("start")
    needs_dist = strategy in ("e2e", "h2h", "switch")
    if needs_dist:
        if start is None:
            raise ConfigError("at /start: start dataset required")
        if start != "tl-easiest" and start not in work_ids:
            raise ConfigError(f"at /start: unknown dataset {start!r}")
        if solver == "exact":
            for ds in work:
                n = len(ds.classes) if support == "class_mean" else ds.n_samples
                if n > EXACT_SUPPORT_CAP:
                    raise ConfigError(
                        f"at /solver: exact solver support cap: {ds.id!r} has {n} > {EXACT_SUPPORT_CAP} support points"
                    )
        for ds in work:
            small = [g.class_id for g in ds.classes if len(g) < 2]
            if small:
                raise ConfigError(f"dataset {ds.id!r}: singleton classes {small} have no covariance")
    probe_cfg = ProbeConfig(**cfg.get("probe", {}))
    needs_scores = strategy in ("e2h", "h2e") or start == "tl-easiest"

    payload: dict = {"strategy": strategy}
    sidecars: dict[str, str] = {}
    scores = None
    if needs_scores:
        scores = _map(_probe_job, [(ds, probe_cfg) for ds in work])
        payload["scores"] = {s.dataset_id: s.probe_accuracy for s in scores}
        sidecars["scores.json"] = json.dumps(payload["scores"], indent=2, sort_keys=True) + "\n"
        if start == "tl-easiest":
            start = build_curriculum("e2h", scores=scores).order[0]
    D = None
    if needs_dist:
        D = distance_matrix(work, solver=solver, eps=cfg.get("eps"), support=support, covariance=cfg.get("covariance", "diagonal"))
        payload["distances"] = D.to_dict()
        payload["start"] = start
        sidecars["distances.json"] = json.dumps(D.to_dict(), indent=2) + "\n"
    if strategy == "domain_based":
        order = build_curriculum(strategy, domains=[(ds.id, ds.domain) for ds in work])
    else:
        order = build_curriculum(strategy, scores=scores, distances=D, start=start)
    if mapping is not None:
        order = map_order(order, mapping)
    if sorted(order.order) != sorted(ds.id for ds in registry):
        raise CurriculumError("order does not cover the registry exactly once")
    payload["order"] = list(order.order)
    sidecars["curriculum.json"] = json.dumps(order.to_dict(), indent=2) + "\n"
    return payload, sidecars


def _probe_job(job):
    ds, cfg = job
    return probe_difficulty(ds, cfg)


# --------------------------------------------------------------------------
# audit


def cmd_audit(cfg: dict, base: Path, out: Path) -> tuple[dict, dict]:
    ref = load_vocab(_resolve(base, cfg["reference"]))
    sets = [load_vocab(_resolve(base, p)) for p in cfg["datasets"]]
    rep = audit(ref, sets, cfg.get("threshold"))
    write_report(rep, out)
    return rep.to_dict(), {}


# --------------------------------------------------------------------------
# report


def _load_report(path: Path) -> dict:
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"missing report {str(path)!r}")
    rep = json.loads(path.read_text())
    if rep.get("command") != "train":
        raise MetricsError(f"{path}: not a train report")
    rep["_name"] = rep["config"].get("name") or path.parent.name
    return rep


def cmd_report(cfg: dict, base: Path, out: Path) -> tuple[dict, dict]:
    kind = cfg["kind"]
    reps = [_load_report(_resolve(base, p)) for p in cfg["reports"]]
    rows = []
    if kind == "relative":
        baseline = _load_report(_resolve(base, cfg["baseline"])) if "baseline" in cfg else reps[0]
        ref = baseline["payload"]["aggregate"]["overall"]["mean"]
        seen = []
        for rep in [baseline] + reps:
            if rep["_name"] in seen:
                continue
            seen.append(rep["_name"])
            rows.append(("relative", rep["_name"], "relative_accuracy", rep["payload"]["aggregate"]["overall"]["mean"] - ref))
    elif kind == "heatmap":
        for rep in reps:
            mats = []
            for run in rep["payload"]["runs"]:
                if run["R"] is None:
                    raise MetricsError(f"{rep['_name']}: no accuracy matrix recorded")
                R = np.array([[np.nan if v is None else v for v in row] for row in run["R"]])
                mats.append(heatmap_deltas(R))
            E = np.mean(mats, axis=0)
            order = rep["payload"]["dataset_order"]
            for r in range(len(order)):
                for c in range(r + 1):
                    rows.append(("heatmap", order[c], f"{rep['_name']}|{order[r]}", float(E[r, c])))
    else:
        for rep in reps:
            trajs = [run["trajectory"] for run in rep["payload"]["runs"]]
            if any(t is None for t in trajs):
                raise MetricsError(f"{rep['_name']}: no trajectory recorded (enable plan.log_trajectory)")
            steps = [s for s, _ in trajs[0]]
            for k, step in enumerate(steps):
                rows.append(("trend", step, rep["_name"], float(np.mean([t[k][1] for t in trajs]))))
    lines = ["figure_kind,x,series,value"] + [",".join(str(v) for v in row) for row in rows]
    payload = {"kind": kind, "rows": [list(r) for r in rows]}
    return payload, {f"plot_{kind}.csv": "\n".join(lines) + "\n"}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "curriculum": cmd_curriculum,
    "audit": cmd_audit,
    "report": cmd_report,
}

# flag -> (config key, commands accepting it)
FLAG_KEYS = {
    "preset": ("preset", {"train"}),
    "seed": ("seeds", {"train", "eval"}),
    "held_out": ("held_out", {"train", "eval"}),
    "curriculum": ("curriculum", {"train"}),
    "noise": ("noise", {"train", "eval"}),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geomicl", description="Desk-scale in-context learner experiments.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--preset", help="training preset")
    ap.add_argument("--seed", type=int, nargs="+", help="seed list")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--held-out", dest="held_out", help="held-out domain")
    ap.add_argument("--curriculum", help="curriculum order file")
    ap.add_argument("--noise", type=float, nargs="+", help="fractions of context labels kept correct")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        if args.config:
            cpath = Path(args.config)
            try:
                cfg = json.loads(cpath.read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
            if not isinstance(cfg, dict):
                raise ConfigError("at /: config must be a JSON object")
            base = cpath.parent
        else:
            cfg, base = {}, Path(".")
        for flag, (key, allowed) in FLAG_KEYS.items():
            val = getattr(args, flag)
            if val is None:
                continue
            if args.command not in allowed:
                raise ConfigError(f"--{flag.replace('_', '-')} does not apply to {args.command}")
            if key == "curriculum":
                val = str(Path(val).resolve())
            cfg[key] = val
        if args.command == "synth" and "synthetic" not in cfg:
            cfg["synthetic"] = dict(DEFAULT_SYNTHETIC)
        validate(args.command, cfg)
        payload, sidecars = COMMANDS[args.command](cfg, base, out)
        _write(out, args.command, cfg, payload, sidecars, argv)
    except ConfigError as exc:
        print(f"config error {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
