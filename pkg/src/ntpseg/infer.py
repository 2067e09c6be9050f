"""Grammar-constrained beam-search mask generation.

The prompt fixes everything up to the mask block's [SOT]; the number of mask
tokens is known from the meta text, so decoding runs exactly grid_h*grid_w
steps with every step's distribution renormalized over the mask-token range
(all other vocabulary ids masked to -inf), then [EOV] and [EOS] are forced.
Generation is deterministic: beams are ranked by cumulative log-probability
with ties broken by (earlier beam index, smaller token id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ntpseg.codec import CodecConfig, decode_mask
from ntpseg.kernels import gemm
from ntpseg.model import ModelParams, _rmsnorm_fwd, _rope_tables, forward_trunk
from ntpseg.sequence import VocabLayout, decode_text


class DecodeError(ValueError):
    pass


@dataclass
class DecodeConfig:
    beam_width: int = 4

    def __post_init__(self):
        if self.beam_width < 1:
            raise DecodeError(f"beam_width must be >= 1, got {self.beam_width}")


def beam_step(scores: np.ndarray, logprobs: np.ndarray, width: int):
    """One beam expansion: cumulative scores (B,) + per-beam next-token
    log-probs (B, C) -> top-`width` continuations.

    Returns (new_scores, parent_beam, token_idx), ranked best-first; ties
    break toward the earlier beam index, then the smaller token index.
    """
    if width < 1:
        raise DecodeError("width must be >= 1")
    B, C = logprobs.shape
    cand = scores[:, None] + logprobs
    flat = cand.ravel()
    keep = min(width, flat.size)
    # stable ordering: -score, then (beam, token) = ascending flat index
    order = np.lexsort((np.arange(flat.size), -flat))[:keep]
    return flat[order], order // C, order % C


class _KvCache:
    """Per-beam key/value tensors with a shared growing length."""

    def __init__(self, params: ModelParams, n_beams: int, max_len: int):
        cfg = params.config
        self.k = [np.zeros((n_beams, cfg.n_kv_heads, max_len, cfg.head_dim), params.dtype)
                  for _ in range(cfg.n_layers)]
        self.v = [np.zeros_like(k) for k in self.k]
        self.length = 0

    def reorder(self, parents: np.ndarray) -> None:
        for i in range(len(self.k)):
            self.k[i][:, :, : self.length] = self.k[i][parents, :, : self.length]
            self.v[i][:, :, : self.length] = self.v[i][parents, :, : self.length]


def _prefill(params: ModelParams, ids: np.ndarray, cache: _KvCache) -> np.ndarray:
    """Run the prompt once; broadcast its k/v into every beam. Returns the
    final hidden row (the state that predicts the first generated token)."""
    hidden, fw = forward_trunk(params, ids, want_cache=True)
    for i, layer in enumerate(fw["layers"]):
        cache.k[i][:, :, : ids.size] = layer["k"][None]
        cache.v[i][:, :, : ids.size] = layer["v"][None]
    cache.length = ids.size
    return hidden[-1]


def _decode_step(params: ModelParams, cache: _KvCache, tokens: np.ndarray) -> np.ndarray:
    """Advance every beam by one token; returns per-beam final hidden (B, d)."""
    cfg = params.config
    t = params.tensors
    B = tokens.size
    pos = cache.length
    if pos >= cfg.max_seq_len:
        raise DecodeError(f"sequence length {pos + 1} exceeds max_seq_len {cfg.max_seq_len}")
    cos, sin = _rope_tables(pos + 1, cfg.head_dim, cfg.rope_base, params.dtype)
    cos_p, sin_p = cos[pos], sin[pos]
    group = cfg.n_heads // cfg.n_kv_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)

    x = params.embedding[tokens].copy()  # (B, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        u, _ = _rmsnorm_fwd(x, t[p + "attn_norm.gain"])
        q = gemm(u, t[p + "attn.wq"]).reshape(B, cfg.n_heads, cfg.head_dim)
        k_new = gemm(u, t[p + "attn.wk"]).reshape(B, cfg.n_kv_heads, cfg.head_dim)
        v_new = gemm(u, t[p + "attn.wv"]).reshape(B, cfg.n_kv_heads, cfg.head_dim)
        for arr in (q, k_new):
            xe, xo = arr[..., 0::2].copy(), arr[..., 1::2].copy()
            arr[..., 0::2] = xe * cos_p - xo * sin_p
            arr[..., 1::2] = xe * sin_p + xo * cos_p
        self_k, self_v = cache.k[i], cache.v[i]
        self_k[:, :, pos] = k_new
        self_v[:, :, pos] = v_new
        kv = self_k[:, :, : pos + 1]          # (B, KH, L, hd)
        qg = q.reshape(B, cfg.n_kv_heads, group, cfg.head_dim)
        scores = np.einsum("bkgd,bkld->bkgl", qg, kv) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bkgl,bkld->bkgd", scores, self_v[:, :, : pos + 1])
        x = x + gemm(ctx.reshape(B, cfg.dim), t[p + "attn.wo"])
        w, _ = _rmsnorm_fwd(x, t[p + "ffn_norm.gain"])
        gate = gemm(w, t[p + "ffn.w_gate"])
        up = gemm(w, t[p + "ffn.w_up"])
        x = x + gemm(gate / (1.0 + np.exp(-gate)) * up, t[p + "ffn.w_down"])
    cache.length = pos + 1
    h, _ = _rmsnorm_fwd(x, t["final_norm.gain"])
    return h


def _validate_prefix(prefix: np.ndarray, layout: VocabLayout):
    """Prefix must be BOS..[image block]..text..SOV meta SOT; returns the grid."""
    prefix = np.asarray(prefix, dtype=np.int64).ravel()
    if prefix.size < 8 or prefix[0] != layout.BOS or prefix[-1] != layout.SOT:
        raise DecodeError("prompt must start at BOS and end exactly at the mask block's SOT")
    sov_positions = np.nonzero(prefix == layout.SOV)[0]
    if sov_positions.size != 2 or (prefix == layout.SOT).sum() != 2 or (prefix == layout.EOV).sum() != 1:
        raise DecodeError("prompt does not match the document grammar before the mask block")
    meta = decode_text(prefix[sov_positions[1] + 1 : prefix.size - 1])
    try:
        pix_h, pix_w = (int(s) for s in meta.split("*"))
    except ValueError:
        raise DecodeError(f"meta text {meta!r} is not 'H*W'") from None
    p = layout.patch_size
    if pix_h <= 0 or pix_w <= 0 or pix_h % p or pix_w % p:
        raise DecodeError(f"meta resolution {meta!r} not divisible by patch size {p}")
    return pix_h // p, pix_w // p


@dataclass
class GeneratedMask:
    mask: np.ndarray          # (H, W) binary
    token_grid: np.ndarray    # (grid_h, grid_w) pattern ids (codec-local)
    ids: np.ndarray           # generated id sequence incl. EOV, EOS
    logprob: float


def generate_mask(params: ModelParams, prefix: np.ndarray, layout: VocabLayout,
                  decode_cfg: DecodeConfig | None = None) -> GeneratedMask:
    """Decode the mask block with constrained beam search; best beam wins."""
    decode_cfg = decode_cfg or DecodeConfig()
    codec_cfg = CodecConfig(patch_size=layout.patch_size, intensity_bins=layout.intensity_bins)
    grid_h, grid_w = _validate_prefix(prefix, layout)
    n_steps = grid_h * grid_w
    width = decode_cfg.beam_width
    lo, n_mask = layout.mask_base, layout.n_patterns
    E_mask_T = params.embedding[lo : lo + n_mask].T

    cache = _KvCache(params, width, len(prefix) + n_steps + 1)
    h = _prefill(params, np.asarray(prefix, dtype=np.int64), cache)

    def constrained_logprobs(hidden_rows: np.ndarray) -> np.ndarray:
        z = gemm(np.ascontiguousarray(hidden_rows), E_mask_T).astype(np.float64)
        z -= z.max(axis=-1, keepdims=True)
        z -= np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return z

    # first expansion from the shared prompt state (every beam holds the prompt kv)
    lp = constrained_logprobs(h[None])
    scores, _, tok = beam_step(np.zeros(1), lp, width)
    beams = [[int(t)] for t in tok]

    for _ in range(n_steps - 1):
        n_live = len(beams)
        last = np.array([b[-1] + lo for b in beams], dtype=np.int64)
        h = _decode_step(params, cache, np.resize(last, width))
        lp = constrained_logprobs(h[:n_live])
        scores, parents, tok = beam_step(scores, lp, width)
        beams = [beams[p] + [int(t)] for p, t in zip(parents, tok)]
        cache.reorder(np.resize(parents, width))

    best = beams[0]
    tokens = np.array(best, dtype=np.int64)
    ids = np.concatenate([tokens + lo, [layout.EOV, layout.EOS]])
    mask = decode_mask(tokens, grid_h, grid_w, codec_cfg)
    return GeneratedMask(mask=mask, token_grid=tokens.reshape(grid_h, grid_w),
                         ids=ids, logprob=float(scores[0]))
