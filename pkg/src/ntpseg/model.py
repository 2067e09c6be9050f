"""Decoder-only causal transformer with hand-written forward and backward.

Llama-style trunk: RMSNorm (pre-norm), grouped-query attention with rotary
positions, SwiGLU feed-forward, no biases anywhere, weight-tied vocabulary
projection. k parallel prediction heads are realized as linear adapters over
the shared final hidden state: head 1 is the plain next-token head (adapter
fixed to the identity, not a parameter), heads 2..k own one dim x dim matrix
each and score future offsets through the tied embedding table.

Everything is plain numpy; gradients are derived by hand and verified
against central finite differences (see tests and the `gradcheck` CLI).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ntpseg.kernels import gemm, gemm_acc


class ModelError(ValueError):
    """Raised for inputs that violate the model contracts."""


@dataclass
class ModelConfig:
    vocab_size: int = 65862
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 2
    ffn_mult: float = 8.0 / 3.0
    max_seq_len: int = 640
    k_heads: int = 16
    dropout: float = 0.1
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ModelError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.dim % self.n_heads:
            raise ModelError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ModelError(f"head_dim {self.head_dim} must be even for rotary positions")
        if self.k_heads < 1:
            raise ModelError("k_heads must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def ffn_dim(self) -> int:
        # nearest multiple of 8 to ffn_mult * dim
        return max(8, int(round(self.ffn_mult * self.dim / 8)) * 8)


RMS_EPS = 1e-6


# --------------------- core ops ---------------------

def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """y = x / sqrt(mean(x^2) + eps) * gain, normalizing the last axis."""
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * r * gain


def _rmsnorm_fwd(x, gain, eps=RMS_EPS):
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * r * gain, r


def _rmsnorm_bwd(dy, x, gain, r):
    d = x.shape[-1]
    t = dy * gain
    dx = t * r - x * (r**3 / d) * (t * x).sum(axis=-1, keepdims=True)
    dgain = (dy * x * r).sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dgain


def _rope_tables(length: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    pos = np.arange(length, dtype=np.float64)
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(pos, freqs)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope_apply(x, cos, sin):
    """Rotate interleaved pairs; x is (..., L, head_dim), tables (L, head_dim/2)."""
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _rope_unapply(d, cos, sin):
    de, do = d[..., 0::2], d[..., 1::2]
    out = np.empty_like(d)
    out[..., 0::2] = de * cos + do * sin
    out[..., 1::2] = -de * sin + do * cos
    return out


def _split_heads(x, n_heads):
    L, _ = x.shape
    return x.reshape(L, n_heads, -1).transpose(1, 0, 2)  # (H, L, hd)


def _merge_heads(x):
    H, L, hd = x.shape
    return x.transpose(1, 0, 2).reshape(L, H * hd)


def _causal_softmax(scores):
    """Row-stable softmax over the last axis under a strict causal mask.

    Mutates and reuses `scores`, which must be a freshly computed temporary.
    """
    L = scores.shape[-1]
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores[..., mask] = -np.inf
    m = scores.max(axis=-1, keepdims=True)
    np.exp(scores - m, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def gqa_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                  n_heads: int, n_kv_heads: int) -> np.ndarray:
    """Causal grouped-query attention over projected streams.

    q is (L, n_heads*hd); k, v are (L, n_kv_heads*hd). Each contiguous group
    of n_heads/n_kv_heads query heads reads one kv head; scores scaled by
    1/sqrt(hd). Returns the (L, n_heads*hd) context (pre output projection).
    """
    if n_heads % n_kv_heads:
        raise ModelError("invalid head grouping")
    hd = q.shape[1] // n_heads
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_kv_heads)
    vh = _split_heads(v, n_kv_heads)
    group = n_heads // n_kv_heads
    kx = kh[np.arange(n_heads) // group]
    vx = vh[np.arange(n_heads) // group]
    scores = np.matmul(qh, kx.transpose(0, 2, 1)) / math.sqrt(hd)
    probs = _causal_softmax(scores)
    return _merge_heads(np.matmul(probs, vx))


# --------------------- parameters ---------------------

@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.tensors["embed.weight"].dtype

    @property
    def embedding(self) -> np.ndarray:
        return self.tensors["embed.weight"]

    def adapter(self, j: int) -> np.ndarray | None:
        """Head-j adapter matrix; head 1 is the identity (returns None)."""
        return None if j == 1 else self.tensors[f"heads.{j}.adapter"]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Canonical tensor name -> shape map; insertion order is the checkpoint order."""
    shapes: dict[str, tuple] = {"embed.weight": (cfg.vocab_size, cfg.dim)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm.gain"] = (cfg.dim,)
        shapes[p + "attn.wq"] = (cfg.dim, cfg.dim)
        shapes[p + "attn.wk"] = (cfg.dim, cfg.kv_dim)
        shapes[p + "attn.wv"] = (cfg.dim, cfg.kv_dim)
        shapes[p + "attn.wo"] = (cfg.dim, cfg.dim)
        shapes[p + "ffn_norm.gain"] = (cfg.dim,)
        shapes[p + "ffn.w_gate"] = (cfg.dim, cfg.ffn_dim)
        shapes[p + "ffn.w_up"] = (cfg.dim, cfg.ffn_dim)
        shapes[p + "ffn.w_down"] = (cfg.ffn_dim, cfg.dim)
    shapes["final_norm.gain"] = (cfg.dim,)
    for j in range(2, cfg.k_heads + 1):
        shapes[f"heads.{j}.adapter"] = (cfg.dim, cfg.dim)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    std = 0.02
    resid_std = std / math.sqrt(2 * cfg.n_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith("norm.gain"):
            t = np.ones(shape)
        elif name.endswith(("attn.wo", "ffn.w_down")):
            t = rng.normal(0.0, resid_std, shape)
        elif name.endswith(".adapter"):
            t = np.eye(cfg.dim)
        else:
            t = rng.normal(0.0, std, shape)
        tensors[name] = np.ascontiguousarray(t, dtype=dtype)
    return ModelParams(cfg, tensors)


def decay_mask(cfg: ModelConfig) -> dict[str, bool]:
    """Weight decay applies to everything except norm gains."""
    return {name: not name.endswith("norm.gain") for name in tensor_shapes(cfg)}


# --------------------- forward / backward ---------------------

def _dropout_mask(rng, shape, p_drop, dtype):
    keep = 1.0 - p_drop
    return (rng.random(shape) < keep).astype(dtype) / dtype.type(keep)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def forward_trunk(params: ModelParams, ids: np.ndarray, drop_rng=None, want_cache: bool = False):
    """Run the trunk; returns (hidden, cache). hidden is post-final-norm.

    drop_rng enables dropout (training); None disables it (inference /
    gradient checking).
    """
    cfg = params.config
    t = params.tensors
    ids = np.asarray(ids, dtype=np.int64).ravel()
    L = ids.size
    if L == 0 or L > cfg.max_seq_len:
        raise ModelError(f"sequence length {L} outside (0, {cfg.max_seq_len}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelError("token id outside the vocabulary")
    dtype = params.dtype
    p_drop = cfg.dropout if drop_rng is not None else 0.0

    cos, sin = _rope_tables(L, cfg.head_dim, cfg.rope_base, dtype)
    group = cfg.n_heads // cfg.n_kv_heads
    kv_of_head = np.arange(cfg.n_heads) // group
    scale = dtype.type(1.0 / math.sqrt(cfg.head_dim))

    x = t["embed.weight"][ids].copy()
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        c: dict = {"x_attn_in": x}
        u, r_attn = _rmsnorm_fwd(x, t[p + "attn_norm.gain"])
        c["u"], c["r_attn"] = u, r_attn
        q = _rope_apply(_split_heads(gemm(u, t[p + "attn.wq"]), cfg.n_heads), cos, sin)
        k = _rope_apply(_split_heads(gemm(u, t[p + "attn.wk"]), cfg.n_kv_heads), cos, sin)
        v = _split_heads(gemm(u, t[p + "attn.wv"]), cfg.n_kv_heads)
        c["q"], c["k"], c["v"] = q, k, v
        probs = _causal_softmax(np.matmul(q, k[kv_of_head].transpose(0, 2, 1)) * scale)
        c["probs"] = probs
        if p_drop > 0.0:
            amask = _dropout_mask(drop_rng, probs.shape, p_drop, dtype)
            c["attn_drop"] = amask
            probs = probs * amask
        ctx = _merge_heads(np.matmul(probs, v[kv_of_head]))
        c["ctx"] = ctx
        x = x + gemm(ctx, t[p + "attn.wo"])

        c["x_ffn_in"] = x
        w, r_ffn = _rmsnorm_fwd(x, t[p + "ffn_norm.gain"])
        c["w"], c["r_ffn"] = w, r_ffn
        gate = gemm(w, t[p + "ffn.w_gate"])
        up = gemm(w, t[p + "ffn.w_up"])
        act_gate, sig = _silu(gate)
        c["gate"], c["up"], c["sig"], c["act_gate"] = gate, up, sig, act_gate
        f = gemm(act_gate * up, t[p + "ffn.w_down"])
        if p_drop > 0.0:
            fmask = _dropout_mask(drop_rng, f.shape, p_drop, dtype)
            c["ffn_drop"] = fmask
            f = f * fmask
        x = x + f
        layers.append(c)

    h, r_final = _rmsnorm_fwd(x, t["final_norm.gain"])
    cache = {"ids": ids, "layers": layers, "x_final_in": x, "r_final": r_final,
             "cos": cos, "sin": sin} if want_cache else None
    return h, cache


def backward_trunk(params: ModelParams, cache: dict, d_hidden: np.ndarray,
                   grads: dict[str, np.ndarray]) -> None:
    """Accumulate d(loss)/d(tensor) into grads given d(loss)/d(hidden)."""
    cfg = params.config
    t = params.tensors
    ids = cache["ids"]
    cos, sin = cache["cos"], cache["sin"]
    group = cfg.n_heads // cfg.n_kv_heads
    kv_of_head = np.arange(cfg.n_heads) // group
    scale = params.dtype.type(1.0 / math.sqrt(cfg.head_dim))

    x_final = cache["x_final_in"]
    dx, dg = _rmsnorm_bwd(d_hidden, x_final, t["final_norm.gain"], cache["r_final"])
    grads["final_norm.gain"] += dg

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # ffn block: x_out = x_ffn_in + drop(w_down(silu(gate) * up))
        df = dx
        if "ffn_drop" in c:
            df = df * c["ffn_drop"]
        act = c["act_gate"] * c["up"]
        grads[p + "ffn.w_down"] += gemm(act.T, df)
        dact = gemm(df, t[p + "ffn.w_down"].T)
        dup = dact * c["act_gate"]
        dgate = dact * c["up"] * (c["sig"] * (1.0 + c["gate"] * (1.0 - c["sig"])))
        grads[p + "ffn.w_up"] += gemm(c["w"].T, dup)
        grads[p + "ffn.w_gate"] += gemm(c["w"].T, dgate)
        dw = gemm(dup, t[p + "ffn.w_up"].T) + gemm(dgate, t[p + "ffn.w_gate"].T)
        dxi, dgain = _rmsnorm_bwd(dw, c["x_ffn_in"], t[p + "ffn_norm.gain"], c["r_ffn"])
        grads[p + "ffn_norm.gain"] += dgain
        dx = dx + dxi

        # attention block: x_out = x_attn_in + wo(ctx)
        grads[p + "attn.wo"] += gemm(c["ctx"].T, dx)
        dctx = _split_heads(gemm(dx, t[p + "attn.wo"].T), cfg.n_heads)
        probs = c["probs"]
        pdrop = probs * c["attn_drop"] if "attn_drop" in c else probs
        vx = c["v"][kv_of_head]
        dprobs = np.matmul(dctx, vx.transpose(0, 2, 1))
        dv_heads = np.matmul(pdrop.transpose(0, 2, 1), dctx)
        if "attn_drop" in c:
            dprobs = dprobs * c["attn_drop"]
        # softmax backward (masked entries have prob 0, so they vanish)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq = np.matmul(dscores, c["k"][kv_of_head]) * scale
        dk_heads = np.matmul(dscores.transpose(0, 2, 1), c["q"]) * scale
        dv = np.zeros_like(c["v"])
        dk = np.zeros_like(c["k"])
        for h in range(cfg.n_heads):
            dv[kv_of_head[h]] += dv_heads[h]
            dk[kv_of_head[h]] += dk_heads[h]
        dq = _rope_unapply(dq, cos, sin)
        dk = _rope_unapply(dk, cos, sin)
        u = c["u"]
        grads[p + "attn.wq"] += gemm(u.T, _merge_heads(dq))
        grads[p + "attn.wk"] += gemm(u.T, _merge_heads(dk))
        grads[p + "attn.wv"] += gemm(u.T, _merge_heads(dv))
        du = gemm(_merge_heads(dq), t[p + "attn.wq"].T)
        du += gemm(_merge_heads(dk), t[p + "attn.wk"].T)
        du += gemm(_merge_heads(dv), t[p + "attn.wv"].T)
        dxi, dgain = _rmsnorm_bwd(du, c["x_attn_in"], t[p + "attn_norm.gain"], c["r_attn"])
        grads[p + "attn_norm.gain"] += dgain
        dx = dx + dxi

    np.add.at(grads["embed.weight"], ids, dx)


# --------------------- spec-facing forward ---------------------

@dataclass
class ForwardOutput:
    """Full forward result: final hidden states plus per-head logit access."""
    params: ModelParams
    hidden: np.ndarray

    def logits(self, j: int = 1) -> np.ndarray:
        """(L, vocab) scores of head j through the tied embedding table."""
        cfg = self.params.config
        if not 1 <= j <= cfg.k_heads:
            raise ModelError(f"head {j} outside 1..{cfg.k_heads}")
        a = self.params.adapter(j)
        g = self.hidden if a is None else gemm(self.hidden, a.T)
        return gemm(g, self.params.embedding.T)


def forward(params: ModelParams, ids: np.ndarray) -> ForwardOutput:
    hidden, _ = forward_trunk(params, ids)
    return ForwardOutput(params, hidden)


def head_rows(params: ModelParams, hidden: np.ndarray, positions: np.ndarray, j: int) -> np.ndarray:
    """Adapter-projected hidden rows for head j at the given input positions."""
    rows = hidden[positions]
    a = params.adapter(j)
    return rows if a is None else gemm(rows, a.T)
