"""Quality predictor: learned layer fusion, transformer trunk, attention-pooled heads.

The network maps a feature stack [L, T, F] to one score per head in (0, 1):

    fuse layers with learned scalar weights -> project F -> d -> add sinusoidal
    positions -> N pre-norm transformer blocks -> final layer norm -> per head:
    attention pooling over time -> linear -> sigmoid.

Forward and backward are implemented directly on numpy arrays so gradients are
exact, runs are bit-reproducible, and all arithmetic stays in the dtype of the
parameters (float64 by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .features import FeatureStack

SINGLE_HEAD = ("MOS",)
MULTI_HEAD = ("MOS", "NOI", "COL", "DIS", "LOUD")

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ArchConfig:
    """Shapes of the predictor; defaults follow the reference configuration."""

    layer_count: int
    frame_count: int
    feature_dim: int
    model_dim: int = 256
    transformer_layers: int = 4
    attention_heads: int = 4
    head_names: tuple[str, ...] = SINGLE_HEAD

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.transformer_layers < 1:
            raise ValueError("transformer_layers must be >= 1")
        if not self.head_names:
            raise ValueError("head_names must be nonempty")
        if self.model_dim % self.attention_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        object.__setattr__(self, "head_names", tuple(self.head_names))


@dataclass
class ModelParams:
    """All learnable parameters as an ordered name -> array mapping."""

    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def items(self):
        return self.arrays.items()

    def keys(self):
        return self.arrays.keys()

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})


@dataclass(frozen=True)
class Prediction:
    """One normalized quality score per head, each strictly inside (0, 1)."""

    scores: dict[str, float]

    def __post_init__(self):
        for name, value in self.scores.items():
            if not 0.0 < value < 1.0:
                raise ValueError(f"head {name}: score {value} outside (0, 1)")


def param_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter layout; init, Adam and checkpoints all follow it."""
    d = cfg.model_dim
    shapes: dict[str, tuple[int, ...]] = {
        "alpha": (cfg.layer_count,),
        "proj.w": (cfg.feature_dim, d),
        "proj.b": (d,),
    }
    for i in range(cfg.transformer_layers):
        p = f"block{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        # no key bias: softmax over key positions cancels it exactly
        for name in ("bq", "bv", "bo"):
            shapes[f"{p}.attn.{name}"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ff.w1"] = (d, 4 * d)
        shapes[f"{p}.ff.b1"] = (4 * d,)
        shapes[f"{p}.ff.w2"] = (4 * d, d)
        shapes[f"{p}.ff.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    for head in cfg.head_names:
        shapes[f"head.{head}.pool.w1"] = (d, d)
        shapes[f"head.{head}.pool.b1"] = (d,)
        shapes[f"head.{head}.pool.w2"] = (d,)
        shapes[f"head.{head}.out.w"] = (d,)
        shapes[f"head.{head}.out.b"] = (1,)
    return shapes


def init_params(cfg: ArchConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Deterministic init: alpha = 1/L, Glorot-uniform matrices, zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name == "alpha":
            arr = np.full(shape, 1.0 / cfg.layer_count)
        elif name.endswith((".g",)):
            arr = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2", ".bq", ".bv", ".bo")):
            arr = np.zeros(shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        else:
            # vector-valued weights (pool.w2, out.w) act as [n, 1] matrices
            limit = np.sqrt(6.0 / (shape[0] + 1))
            arr = rng.uniform(-limit, limit, size=shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(arrays)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def positional_encoding(frames: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(frames, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos * np.exp(-np.log(10000.0) * idx / dim)[None, :]
    pe = np.zeros((frames, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : dim // 2])
    return pe.astype(dtype)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def _softmax_backward(probs, dprobs, axis=-1):
    inner = np.sum(dprobs * probs, axis=axis, keepdims=True)
    return probs * (dprobs - inner)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv_std
    return xhat * g + b, (xhat, inv_std, g)


def _layernorm_backward(dout, ctx):
    xhat, inv_std, g = ctx
    dxhat = dout * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    axes = tuple(range(dout.ndim - 1))
    return dx, (dout * xhat).sum(axis=axes), dout.sum(axis=axes)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def fuse_layers(stack, alpha) -> np.ndarray:
    """Weighted sum over layers: out[t, f] = sum_l alpha[l] * stack[l, t, f]."""
    data = stack.data if isinstance(stack, FeatureStack) else np.asarray(stack)
    alpha = np.asarray(alpha, dtype=data.dtype if data.dtype.kind == "f" else np.float64)
    if alpha.ndim != 1 or alpha.shape[0] != data.shape[0]:
        raise ValueError(
            f"alpha has {alpha.shape} entries for a stack of {data.shape[0]} layers"
        )
    return np.einsum("l,ltf->tf", alpha, data)


def attention_pool(h: np.ndarray, pool_params) -> np.ndarray:
    """Softmax-weighted frame sum with scores w2 . tanh(W1 h_t + b1)."""
    w1, b1, w2 = pool_params
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise ValueError("attention_pool input contains non-finite values")
    u = np.tanh(h @ w1 + b1)
    weights = _softmax(u @ w2, axis=-1)
    return weights @ h


def attention_pool_weights(h: np.ndarray, pool_params) -> np.ndarray:
    """The softmax frame weights used by attention_pool (nonnegative, sum 1)."""
    w1, b1, w2 = pool_params
    u = np.tanh(np.asarray(h) @ w1 + b1)
    return _softmax(u @ w2, axis=-1)


def forward_batch(stacks: np.ndarray, params: ModelParams, cfg: ArchConfig):
    """Run a [B, L, T, F] batch; returns (head -> scores [B], cache for backward)."""
    p = params.arrays
    dtype = params.dtype
    x = np.asarray(stacks)
    if x.ndim != 4 or x.shape[1:] != (cfg.layer_count, cfg.frame_count, cfg.feature_dim):
        raise ValueError(
            f"stack batch shape {x.shape} does not match config "
            f"[B, {cfg.layer_count}, {cfg.frame_count}, {cfg.feature_dim}]"
        )
    x = x.astype(dtype, copy=False)
    n_heads = cfg.attention_heads
    scale = 1.0 / np.sqrt(cfg.model_dim // n_heads)

    fused = np.einsum("l,bltf->btf", p["alpha"], x)
    h = fused @ p["proj.w"] + p["proj.b"]
    h = h + positional_encoding(cfg.frame_count, cfg.model_dim, dtype)[None]

    blocks = []
    for i in range(cfg.transformer_layers):
        pre = f"block{i}"
        attn_in = h
        n1, ln1_ctx = _layernorm_forward(attn_in, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = _split_heads(n1 @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"], n_heads)
        k = _split_heads(n1 @ p[f"{pre}.attn.wk"], n_heads)
        v = _split_heads(n1 @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"], n_heads)
        logits = np.einsum("bhtd,bhsd->bhts", q, k) * scale
        probs = _softmax(logits, axis=-1)
        ctx = _merge_heads(np.einsum("bhts,bhsd->bhtd", probs, v))
        h = attn_in + ctx @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"]

        ff_in = h
        n2, ln2_ctx = _layernorm_forward(ff_in, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        f1 = n2 @ p[f"{pre}.ff.w1"] + p[f"{pre}.ff.b1"]
        g1 = _gelu(f1)
        h = ff_in + g1 @ p[f"{pre}.ff.w2"] + p[f"{pre}.ff.b2"]
        blocks.append((n1, ln1_ctx, q, k, v, probs, ctx, n2, ln2_ctx, f1, g1))

    hf, lnf_ctx = _layernorm_forward(h, p["final_ln.g"], p["final_ln.b"])

    scores: dict[str, np.ndarray] = {}
    heads = {}
    for head in cfg.head_names:
        hp = f"head.{head}"
        u = np.tanh(hf @ p[f"{hp}.pool.w1"] + p[f"{hp}.pool.b1"])
        s = u @ p[f"{hp}.pool.w2"]
        a = _softmax(s, axis=-1)
        pooled = np.einsum("bt,btd->bd", a, hf)
        z = pooled @ p[f"{hp}.out.w"] + p[f"{hp}.out.b"]
        y = _sigmoid(z)
        scores[head] = y
        heads[head] = (u, a, pooled, y)

    cache = (x, fused, blocks, hf, lnf_ctx, heads, params, cfg)
    return scores, cache


def backward_batch(cache, upstream: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Exact parameter gradients given dLoss/dScore per head, shape [B]."""
    x, fused, blocks, hf, lnf_ctx, heads, params, cfg = cache
    p = params.arrays
    if set(upstream) != set(cfg.head_names):
        raise ValueError(
            f"upstream heads {sorted(upstream)} do not match {sorted(cfg.head_names)}"
        )
    grads = zero_grads(params)
    n_heads = cfg.attention_heads
    scale = 1.0 / np.sqrt(cfg.model_dim // n_heads)

    dhf = np.zeros_like(hf)
    for head in cfg.head_names:
        hp = f"head.{head}"
        u, a, pooled, y = heads[head]
        dy = np.asarray(upstream[head], dtype=y.dtype)
        if dy.shape != y.shape:
            raise ValueError(f"head {head}: upstream shape {dy.shape} != {y.shape}")
        dz = dy * y * (1.0 - y)
        grads[f"{hp}.out.w"] += dz @ pooled
        grads[f"{hp}.out.b"] += dz.sum(keepdims=True)
        dpooled = dz[:, None] * p[f"{hp}.out.w"][None, :]
        da = np.einsum("bd,btd->bt", dpooled, hf)
        dhf += a[:, :, None] * dpooled[:, None, :]
        ds = _softmax_backward(a, da, axis=-1)
        grads[f"{hp}.pool.w2"] += np.einsum("bt,btj->j", ds, u)
        du = ds[:, :, None] * p[f"{hp}.pool.w2"][None, None, :]
        dpre = du * (1.0 - u * u)
        grads[f"{hp}.pool.w1"] += np.einsum("btd,btj->dj", hf, dpre)
        grads[f"{hp}.pool.b1"] += dpre.sum(axis=(0, 1))
        dhf += dpre @ p[f"{hp}.pool.w1"].T

    dh, grads["final_ln.g"], grads["final_ln.b"] = _layernorm_backward(dhf, lnf_ctx)

    for i in reversed(range(cfg.transformer_layers)):
        pre = f"block{i}"
        n1, ln1_ctx, q, k, v, probs, ctx, n2, ln2_ctx, f1, g1 = blocks[i]

        df2 = dh  # residual: d(ff_in) accumulates below
        grads[f"{pre}.ff.w2"] = np.einsum("btk,btd->kd", g1, df2)
        grads[f"{pre}.ff.b2"] = df2.sum(axis=(0, 1))
        dg1 = df2 @ p[f"{pre}.ff.w2"].T
        df1 = dg1 * _gelu_grad(f1)
        grads[f"{pre}.ff.w1"] = np.einsum("btd,btk->dk", n2, df1)
        grads[f"{pre}.ff.b1"] = df1.sum(axis=(0, 1))
        dn2 = df1 @ p[f"{pre}.ff.w1"].T
        dx2, grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = _layernorm_backward(dn2, ln2_ctx)
        dh = dh + dx2

        dattn = dh
        grads[f"{pre}.attn.wo"] = np.einsum("btd,bte->de", ctx, dattn)
        grads[f"{pre}.attn.bo"] = dattn.sum(axis=(0, 1))
        dctx = _split_heads(dattn @ p[f"{pre}.attn.wo"].T, n_heads)
        dprobs = np.einsum("bhtd,bhsd->bhts", dctx, v)
        dv = np.einsum("bhts,bhtd->bhsd", probs, dctx)
        dlogits = _softmax_backward(probs, dprobs, axis=-1) * scale
        dq = np.einsum("bhts,bhsd->bhtd", dlogits, k)
        dk = np.einsum("bhts,bhtd->bhsd", dlogits, q)
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        grads[f"{pre}.attn.wq"] = np.einsum("btd,bte->de", n1, dq)
        grads[f"{pre}.attn.bq"] = dq.sum(axis=(0, 1))
        grads[f"{pre}.attn.wk"] = np.einsum("btd,bte->de", n1, dk)
        grads[f"{pre}.attn.wv"] = np.einsum("btd,bte->de", n1, dv)
        grads[f"{pre}.attn.bv"] = dv.sum(axis=(0, 1))
        dn1 = dq @ p[f"{pre}.attn.wq"].T + dk @ p[f"{pre}.attn.wk"].T + dv @ p[f"{pre}.attn.wv"].T
        dx1, grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = _layernorm_backward(dn1, ln1_ctx)
        dh = dh + dx1

    grads["proj.w"] = np.einsum("btf,btd->fd", fused, dh)
    grads["proj.b"] = dh.sum(axis=(0, 1))
    dfused = dh @ p["proj.w"].T
    grads["alpha"] = np.einsum("btf,bltf->l", dfused, x)
    return grads


def forward(stack: FeatureStack, params: ModelParams, cfg: ArchConfig) -> Prediction:
    """Score a single stack; pure function of its inputs."""
    scores, _ = forward_batch(stack.data[None], params, cfg)
    return Prediction({head: float(scores[head][0]) for head in cfg.head_names})


def backward(
    stack: FeatureStack,
    params: ModelParams,
    cfg: ArchConfig,
    upstream: dict[str, float],
) -> dict[str, np.ndarray]:
    """Parameter gradients for one stack given dLoss/dScore per head."""
    _, cache = forward_batch(stack.data[None], params, cfg)
    vec = {head: np.asarray([upstream[head]], dtype=params.dtype) for head in upstream}
    return backward_batch(cache, vec)
