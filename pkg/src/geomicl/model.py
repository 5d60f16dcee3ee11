"""Non-causal transformer in-context classifier with explicit backprop.

Token layout: ``[feature embedding | label embedding]``.  Each query gets its
own sequence of NK context tokens plus one query token whose label slot holds
a learnable "unknown" vector.  The encoder is a stack of pre-LN residual
blocks (full self-attention, GeLU MLP) with no positional information, so the
output at the query position does not depend on context order.  Only that
output goes through a final LayerNorm and the linear head.

All tensors live in ``ModelParams.tensors``; computation runs in the dtype of
those tensors, which lets the gradient check promote everything to float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .episodes import Episode, EpisodeError, SequenceBatch, assemble_sequences

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_mode: str = "identity"
    feat_width: int = 16
    label_width: int = 4
    n_layers: int = 2
    n_heads: int = 4
    mlp_width: int = 64
    n_ways_max: int = 5
    seed: int = 0
    input_dim: int | None = None  # raw embedding width for trainable_mlp; defaults to feat_width

    def __post_init__(self):
        if self.feat_mode not in ("identity", "trainable_mlp"):
            raise ModelError(f"unknown feat_mode {self.feat_mode!r}")
        for name in ("feat_width", "label_width", "n_layers", "n_heads", "mlp_width", "n_ways_max"):
            if getattr(self, name) < 1:
                raise ModelError(f"invalid dims: {name} must be >= 1")
        if self.n_ways_max < 2:
            raise ModelError("invalid dims: n_ways_max must be >= 2")
        if self.token_width % self.n_heads:
            raise ModelError(
                f"invalid dims: token width {self.token_width} not divisible by {self.n_heads} heads"
            )
        if self.feat_mode == "identity" and self.input_dim not in (None, self.feat_width):
            raise ModelError("identity feature mode requires input_dim == feat_width")

    @property
    def token_width(self) -> int:
        return self.feat_width + self.label_width

    @property
    def in_dim(self) -> int:
        return self.input_dim or self.feat_width

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": ModelConfig(),
    "full": ModelConfig(feat_width=2048, label_width=256, n_layers=8, n_heads=8, mlp_width=3072),
}


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["head.w"].dtype


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, f = cfg.token_width, cfg.mlp_width, cfg.feat_width
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.feat_mode == "trainable_mlp":
        shapes.update({"feat.w1": (cfg.in_dim, f), "feat.b1": (f,), "feat.w2": (f, f), "feat.b2": (f,)})
    shapes["label_embed"] = (cfg.n_ways_max, cfg.label_width)
    shapes["unknown"] = (cfg.label_width,)
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "wqkv": (d, 3 * d),
                p + "bqkv": (3 * d,),
                p + "wo": (d, d),
                p + "bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "w1": (d, m),
                p + "b1": (m,),
                p + "w2": (m, d),
                p + "b2": (d,),
            }
        )
    shapes.update({"final_ln.g": (d,), "final_ln.b": (d,), "head.w": (d, cfg.n_ways_max), "head.b": (cfg.n_ways_max,)})
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "unknown":
            t = 0.02 * rng.standard_normal(shape)
        elif name == "label_embed":
            # a linear layer over one-hot labels has fan-in 1
            t = rng.standard_normal(shape)
        elif leaf == "g":
            t = np.ones(shape)
        elif len(shape) == 1:
            t = np.zeros(shape)
        else:
            t = rng.standard_normal(shape) / math.sqrt(shape[0])
        tensors[name] = t.astype(np.float32)
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------
# primitives


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(h):
    u = _GELU_C * (h + 0.044715 * (h * h * h))
    t = np.tanh(u)
    return 0.5 * h * (1.0 + t), t


def _gelu_bwd(dy, h, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * h * h)
    return dy * (0.5 * (1.0 + t) + 0.5 * h * (1.0 - t * t) * du)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise ModelError(f"non-finite activations at {where}")


# --------------------------------------------------------------------------
# embedding of an episode into token sequences


def _feat_fwd(params: ModelParams, x):
    cfg = params.config
    x = np.asarray(x, dtype=params.dtype)
    if x.shape[-1] != cfg.in_dim:
        raise ModelError(f"shape mismatch: features have width {x.shape[-1]}, expected {cfg.in_dim}")
    if cfg.feat_mode == "identity":
        return x, None
    t = params.tensors
    h = x @ t["feat.w1"] + t["feat.b1"]
    a, th = _gelu_fwd(h)
    return a @ t["feat.w2"] + t["feat.b2"], (x, h, th, a)


def embed_episode(params: ModelParams, ep: Episode) -> SequenceBatch:
    if ep.n_ways > params.config.n_ways_max:
        raise ModelError(f"shape mismatch: episode has {ep.n_ways} ways > n_ways_max")
    t = params.tensors
    try:
        return assemble_sequences(ep, t["label_embed"], t["unknown"], lambda x: _feat_fwd(params, x)[0])
    except EpisodeError as exc:
        raise ModelError(str(exc)) from None


# --------------------------------------------------------------------------
# transformer on token sequences


def _encoder_fwd(params: ModelParams, tokens: np.ndarray, keep: bool):
    cfg = params.config
    t = params.tensors
    B, T, D = tokens.shape
    if D != cfg.token_width:
        raise ModelError(f"shape mismatch: token width {D} != {cfg.token_width}")
    H = cfg.n_heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    x = tokens
    caches = []
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        a, ln1 = _ln_fwd(x, t[p + "ln1.g"], t[p + "ln1.b"])
        qkv = (a @ t[p + "wqkv"] + t[p + "bqkv"]).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        x1 = x + o @ t[p + "wo"] + t[p + "bo"]
        c, ln2 = _ln_fwd(x1, t[p + "ln2.g"], t[p + "ln2.b"])
        h = c @ t[p + "w1"] + t[p + "b1"]
        g, th = _gelu_fwd(h)
        x = x1 + g @ t[p + "w2"] + t[p + "b2"]
        _check_finite(x, f"layer {l}")
        if keep:
            caches.append((a, ln1, q, k, v, att, o, c, ln2, h, th, g))
    z, lnf = _ln_fwd(x[:, -1, :], t["final_ln.g"], t["final_ln.b"])
    logits = z @ t["head.w"] + t["head.b"]
    _check_finite(logits, "head")
    return logits, (caches, z, lnf, tokens.shape)


def _encoder_bwd(params: ModelParams, dlogits: np.ndarray, cache, grads: dict):
    cfg = params.config
    t = params.tensors
    caches, z, lnf, (B, T, D) = cache
    H = cfg.n_heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)

    grads["head.w"] = z.T @ dlogits
    grads["head.b"] = dlogits.sum(0)
    dz = dlogits @ t["head.w"].T
    dlast, grads["final_ln.g"], grads["final_ln.b"] = _ln_bwd(dz, t["final_ln.g"], lnf)
    dx = np.zeros((B, T, D), dtype=dlogits.dtype)
    dx[:, -1, :] = dlast

    for l in reversed(range(cfg.n_layers)):
        p = f"layer{l}."
        a, ln1, q, k, v, att, o, c, ln2, h, th, g = caches[l]
        # MLP block
        dflat = dx.reshape(-1, D)
        grads[p + "w2"] = g.reshape(-1, g.shape[-1]).T @ dflat
        grads[p + "b2"] = dflat.sum(0)
        dh_ = _gelu_bwd(dx @ t[p + "w2"].T, h, th)
        dhf = dh_.reshape(-1, dh_.shape[-1])
        grads[p + "w1"] = c.reshape(-1, D).T @ dhf
        grads[p + "b1"] = dhf.sum(0)
        dc = dh_ @ t[p + "w1"].T
        dx1_ln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_bwd(dc, t[p + "ln2.g"], ln2)
        dx1 = dx + dx1_ln
        # attention block
        d1 = dx1.reshape(-1, D)
        grads[p + "wo"] = o.reshape(-1, D).T @ d1
        grads[p + "bo"] = d1.sum(0)
        do = (dx1 @ t[p + "wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, T, 3 * D)
        dqf = dqkv.reshape(-1, 3 * D)
        grads[p + "wqkv"] = a.reshape(-1, D).T @ dqf
        grads[p + "bqkv"] = dqf.sum(0)
        da = dqkv @ t[p + "wqkv"].T
        dxa, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_bwd(da, t[p + "ln1.g"], ln1)
        dx = dx1 + dxa
    return dx


# --------------------------------------------------------------------------
# public operations


def forward_logits(params: ModelParams, batch) -> np.ndarray:
    """Q x N logits for an Episode or a pre-assembled SequenceBatch."""
    if isinstance(batch, Episode):
        batch = embed_episode(params, batch)
    tokens = np.asarray(batch.tokens, dtype=params.dtype)
    if tokens.ndim != 3:
        raise ModelError("shape mismatch: tokens must be (Q, NK+1, width)")
    logits, _ = _encoder_fwd(params, tokens, keep=False)
    return logits[:, : batch.n_ways]


def _cross_entropy(logits: np.ndarray, truth: np.ndarray):
    shifted = logits - logits.max(-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
    q = logits.shape[0]
    loss = -logp[np.arange(q), truth].mean()
    return float(loss), logp


def episode_loss(params: ModelParams, batch) -> float:
    """Mean over queries of the cross-entropy of the true column."""
    logits = forward_logits(params, batch)
    truth = np.asarray(batch.query_y if isinstance(batch, Episode) else batch.truth)
    if truth.min() < 0 or truth.max() >= logits.shape[1]:
        raise ModelError("truth labels out of range")
    return _cross_entropy(logits, truth)[0]


def loss_and_grads(params: ModelParams, ep: Episode) -> tuple[float, dict[str, np.ndarray]]:
    """Episode loss and its exact gradient w.r.t. every tensor of ``params``."""
    cfg = params.config
    t = params.tensors
    n_ways = ep.n_ways
    if n_ways > cfg.n_ways_max:
        raise ModelError(f"shape mismatch: episode has {n_ways} ways > n_ways_max")
    fc, fc_cache = _feat_fwd(params, ep.context_x)
    fq, fq_cache = _feat_fwd(params, ep.query_x)
    batch = assemble_sequences(ep, t["label_embed"], t["unknown"], lambda x: fc if x is ep.context_x else fq)
    tokens = batch.tokens.astype(params.dtype, copy=False)
    logits_full, cache = _encoder_fwd(params, tokens, keep=True)
    logits = logits_full[:, :n_ways]
    loss, logp = _cross_entropy(logits, ep.query_y)

    Q = logits.shape[0]
    dlogits = np.zeros_like(logits_full)
    dlogits[:, :n_ways] = np.exp(logp)
    dlogits[np.arange(Q), ep.query_y] -= 1.0
    dlogits /= Q

    grads: dict[str, np.ndarray] = {}
    dtok = _encoder_bwd(params, dlogits, cache, grads)

    F = cfg.feat_width
    nk = ep.n_context
    d_label = np.zeros_like(t["label_embed"])
    np.add.at(d_label, ep.context_y, dtok[:, :nk, F:].sum(0))
    grads["label_embed"] = d_label
    grads["unknown"] = dtok[:, nk, F:].sum(0)

    if cfg.feat_mode == "trainable_mlp":
        d_feat = np.concatenate([dtok[:, :nk, :F].sum(0), dtok[:, nk, :F]])
        x = np.concatenate([fc_cache[0], fq_cache[0]])
        h = np.concatenate([fc_cache[1], fq_cache[1]])
        th = np.concatenate([fc_cache[2], fq_cache[2]])
        a = np.concatenate([fc_cache[3], fq_cache[3]])
        grads["feat.w2"] = a.T @ d_feat
        grads["feat.b2"] = d_feat.sum(0)
        dh_ = _gelu_bwd(d_feat @ t["feat.w2"].T, h, th)
        grads["feat.w1"] = x.T @ dh_
        grads["feat.b1"] = dh_.sum(0)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for {name}")
    return loss, {name: grads[name] for name in t}


def grad_params(params: ModelParams, ep: Episode) -> dict[str, np.ndarray]:
    return loss_and_grads(params, ep)[1]


def feature_grad_block(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in grads.items() if k.startswith("feat.")}


def predict(params: ModelParams, ep: Episode) -> np.ndarray:
    """Argmax labels; ``np.argmax`` resolves ties toward the lowest index."""
    return np.argmax(forward_logits(params, ep), axis=1)
