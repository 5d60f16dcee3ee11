"""JSON schemas for command configs.  Unknown keys are rejected everywhere."""

from __future__ import annotations

PRESET_NAMES = ("loo", "merged", "sequential-static", "sequential-proportional", "unsupervised")

_int1 = {"type": "integer", "minimum": 1}
_int0 = {"type": "integer", "minimum": 0}
_pos = {"type": "number", "exclusiveMinimum": 0}
_frac_open = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_unit = {"type": "number", "minimum": 0, "maximum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**63 - 1}
_seeds = {"type": "array", "items": _seed, "minItems": 1, "uniqueItems": True}
_noise = {"type": "array", "items": _unit, "minItems": 1}
_split = {"enum": ["all", "train", "test"]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SYNTHETIC = _obj(
    {
        "n_domains": _int1,
        "datasets_per_domain": _int1,
        "classes_per_dataset": _int1,
        "samples_per_class": _int1,
        "dim": _int1,
        "class_separation": _pos,
        "noise_scale": {"type": "number", "minimum": 0},
        "seed": _seed,
    },
    required=("n_domains", "datasets_per_domain", "classes_per_dataset"),
)

MODEL = _obj(
    {
        "preset": {"enum": ["desk", "full"]},
        "feat_mode": {"enum": ["identity", "trainable_mlp"]},
        "feat_width": _int1,
        "label_width": _int1,
        "n_layers": _int1,
        "n_heads": _int1,
        "mlp_width": _int1,
        "n_ways_max": {"type": "integer", "minimum": 2},
        "input_dim": _int1,
    }
)

SHAPE_PROPS = {"n_ways": {"type": "integer", "minimum": 2}, "k_shots": _int1, "n_queries": _int1}

PLAN = _obj(
    {
        "iterations_total": _int0,
        "epoch_len": _int1,
        **SHAPE_PROPS,
        "allocation": {"enum": ["static", "proportional"]},
        "eval_tasks": _int1,
        "peak_lr": _pos,
        "warmup_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "val_tasks": _int0,
        "split": _split,
        "eval_split": _split,
        "per_dataset_eval": {"type": "boolean"},
        "log_trajectory": {"type": "boolean"},
        "accumulate": _int1,
        "eval_fraction": _frac_open,
        "min_eval": _int1,
        "balance_queries": {"type": "boolean"},
        "augmentations": {
            "type": "array",
            "minItems": 1,
            "items": _obj(
                {
                    "kind": {"enum": ["gaussian_jitter", "coordinate_mask", "random_scale", "random_rotation_2plane"]},
                    "strength": {"type": "number", "minimum": 0},
                },
                required=("kind",),
            ),
        },
        "mixup": _obj(
            {
                "alpha": _pos,
                "beta": _pos,
                "lambda_range": {"type": "array", "items": _unit, "minItems": 2, "maxItems": 2},
            }
        ),
    }
)

_data_source = {"synthetic": SYNTHETIC, "registry": {"type": "string", "minLength": 1}}
_one_source = {"not": {"required": ["synthetic", "registry"]}}

SYNTH = {**_obj({"synthetic": SYNTHETIC}, required=("synthetic",))}

TRAIN = {
    **_obj(
        {
            **_data_source,
            "name": {"type": "string"},
            "preset": {"enum": list(PRESET_NAMES)},
            "model": MODEL,
            "plan": PLAN,
            "held_out": {"type": "string"},
            "curriculum": {"type": "string"},
            "noise": _noise,
            "seeds": _seeds,
            "checkpoints": {"type": "boolean"},
        },
        required=("preset",),
    ),
    **_one_source,
}

EVAL = {
    **_obj(
        {
            **_data_source,
            "name": {"type": "string"},
            "checkpoints": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "datasets": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
            "held_out": {"type": "string"},
            "split": _split,
            "mode": {"enum": ["single", "merged"]},
            "tasks": _int1,
            **SHAPE_PROPS,
            "eval_fraction": _frac_open,
            "min_eval": _int1,
            "noise": _noise,
            "seeds": _seeds,
        },
        required=("checkpoints",),
    ),
    **_one_source,
}

PROBE = _obj(
    {
        "hidden": _int1,
        "epochs": _int1,
        "lr": _pos,
        "batch_size": _int1,
        "test_fraction": _frac_open,
        "seed": _seed,
    }
)

CURRICULUM = {
    **_obj(
        {
            **_data_source,
            "strategy": {"enum": ["domain_based", "e2h", "h2e", "e2e", "h2h", "switch"]},
            "solver": {"enum": ["sinkhorn", "exact"]},
            "eps": _pos,
            "support": {"enum": ["class_mean", "samples"]},
            "covariance": {"enum": ["diagonal", "full"]},
            "start": {"type": "string"},
            "probe": PROBE,
            "proxy": {
                **_obj(
                    {
                        **_data_source,
                        "mapping": {
                            "type": "object",
                            "additionalProperties": {
                                "oneOf": [
                                    {"type": "string"},
                                    {"type": "array", "items": {"type": "string"}, "minItems": 1},
                                ]
                            },
                        },
                    }
                ),
                **_one_source,
            },
        },
        required=("strategy",),
    ),
    **_one_source,
}

AUDIT = _obj(
    {
        "reference": {"type": "string"},
        "datasets": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "threshold": {"type": "number", "minimum": -1, "maximum": 1},
    },
    required=("reference", "datasets"),
)

REPORT = _obj(
    {
        "kind": {"enum": ["relative", "heatmap", "trend"]},
        "reports": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "baseline": {"type": "string"},
    },
    required=("kind", "reports"),
)

SCHEMAS = {
    "synth": SYNTH,
    "train": TRAIN,
    "eval": EVAL,
    "curriculum": CURRICULUM,
    "audit": AUDIT,
    "report": REPORT,
}
