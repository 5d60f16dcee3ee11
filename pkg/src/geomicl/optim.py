"""Adam with a linear-warmup / cosine-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: ModelParams, peak_lr: float, total_steps: int, warmup_steps: int | None = None):
        if warmup_steps is None:
            warmup_steps = int(0.05 * total_steps)
        if not 0 <= warmup_steps <= total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls(peak_lr, warmup_steps, total_steps, 0, zeros, {k: v.copy() for k, v in zeros.items()})


def lr_at(step: int, state: OptimizerState) -> float:
    W, T, peak = state.warmup_steps, state.total_steps, state.peak_lr
    if not 0 <= step <= T:
        raise ValueError(f"step {step} out of range [0, {T}]")
    if step < W:
        return peak * step / W
    if T == W:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - W) / (T - W)))


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState):
    """One bias-corrected Adam update.  Update number ``t`` (1-based) uses
    ``lr_at(t)``, so the first update after warmup start is nonzero."""
    if grads.keys() != params.tensors.keys():
        raise ValueError("shape mismatch: gradient names differ from parameter names")
    t = state.step + 1
    lr = lr_at(min(t, state.total_steps), state) if state.total_steps else state.peak_lr
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    new_t, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + EPS)
        new_t[name] = (p - upd).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = OptimizerState(state.peak_lr, state.warmup_steps, state.total_steps, t, new_m, new_v)
    return ModelParams(params.config, new_t), new_state
