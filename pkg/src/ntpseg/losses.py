"""Focal next-token, next-k-token, token-level contrastive, and HET losses.

Two routes compute the same math:

* reference ops (`ntp_loss`, `nktp_loss`, `tcl_loss`, `combined_loss`)
  work on explicit logit matrices and exist for small models and tests;
* `batch_losses` streams vocabulary-sized logit rows through the fused
  kernel in bounded chunks and also produces every gradient needed for
  training (d hidden per document, embedding and adapter gradients).

Losses reduce as: sum over masked positions, mean over documents; the
next-k part is additionally averaged over its k-1 offsets so its scale
does not grow with k.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ntpseg import het as het_mod
from ntpseg.kernels import gemm, gemm_acc, softmax_focal_grad, softmax_focal_loss
from ntpseg.kernels.fallback import _focal_coeff
from ntpseg.model import ModelParams, head_rows

P_MIN = 1e-9


class LossError(ValueError):
    """Raised for loss configurations that violate the contracts."""


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    k: int = 16
    m: int = 5
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda_het: float = 1.0
    l: int = 50
    het_start_epoch: int = -1   # -1: auto (60% of total epochs, resolved by the trainer)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise LossError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise LossError(f"gamma must be >= 0, got {self.gamma}")
        if self.k < 1:
            raise LossError(f"k must be >= 1, got {self.k}")
        if self.m < 0:
            raise LossError(f"m must be >= 0, got {self.m}")
        if self.l < 2 or self.l % 2:
            raise LossError(f"l must be even and >= 2, got {self.l}")


def focal_nll(p, alpha: float, gamma: float):
    """-alpha * (1-p)^gamma * log p, with p clamped to 1e-9 (never a silent NaN)."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_MIN, 1.0)
    out = -alpha * (1.0 - p) ** gamma * np.log(p)
    return float(out) if out.ndim == 0 else out


# --------------------- reference ops ---------------------

def _log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _focal_from_logp(logp, alpha, gamma):
    p = np.exp(logp)
    return -alpha * (1.0 - p) ** gamma * logp


def _as_batch(x):
    return x if isinstance(x, (list, tuple)) else [x]


def ntp_loss(logits_1, targets, loss_mask, cfg: LossConfig) -> float:
    """Masked focal loss of head 1; accepts one document or a batch of them."""
    logits_b, targets_b, mask_b = _as_batch(logits_1), _as_batch(targets), _as_batch(loss_mask)
    total, any_masked = 0.0, False
    for logits, tgt, msk in zip(logits_b, targets_b, mask_b):
        pos = np.nonzero(np.asarray(msk, dtype=bool))[0]
        tgt = np.asarray(tgt, dtype=np.int64)
        if pos.size == 0:
            continue
        any_masked = True
        logp = _log_softmax(logits[pos])[np.arange(pos.size), tgt[pos]]
        total += _focal_from_logp(logp, cfg.alpha, cfg.gamma).sum()
    if not any_masked:
        warnings.warn("loss mask is entirely false; ntp_loss is 0", stacklevel=2)
        return 0.0
    return total / len(logits_b)


def nktp_rows(loss_mask: np.ndarray, length: int, j: int):
    """(input, target) index pairs scored by head j.

    Base positions are the loss-masked ones; offset targets that run past
    the document or out of the loss mask are skipped. Head 1 reproduces the
    plain next-token pairs.
    """
    mask = np.asarray(loss_mask, dtype=bool)
    base_targets = np.nonzero(mask)[0] + 1      # t: trained target indices
    shifted = base_targets + (j - 1)
    ok = shifted <= length - 1
    ok[ok] &= mask[shifted[ok] - 1]
    t = base_targets[ok]
    return t - 1, t + (j - 1)


def nktp_loss(logits_heads, targets, loss_mask, cfg: LossConfig) -> float:
    """Average over heads 2..k of the masked focal loss at shifted targets.

    logits_heads maps head index j (2-based) to that head's (L, V) logits;
    per document, logits_heads may also be a callable j -> logits.
    """
    if cfg.k == 1:
        return 0.0
    heads_b, targets_b, mask_b = _as_batch(logits_heads), _as_batch(targets), _as_batch(loss_mask)
    total = 0.0
    for heads, tgt, msk in zip(heads_b, targets_b, mask_b):
        tgt = np.asarray(tgt, dtype=np.int64)
        for j in range(2, cfg.k + 1):
            inputs, shifted = nktp_rows(msk, tgt.size, j)
            if inputs.size == 0:
                continue
            logits = heads(j) if callable(heads) else heads[j]
            logp = _log_softmax(logits[inputs])[np.arange(inputs.size), tgt[shifted]]
            total += _focal_from_logp(logp, cfg.alpha, cfg.gamma).sum()
    return total / ((cfg.k - 1) * len(heads_b))


def tcl_negative_sets(ids: np.ndarray, targets: np.ndarray, m: int):
    """Per target position, the deduplicated preceding-m ids minus the target."""
    out = []
    for t in targets:
        window = ids[max(0, t - m):t]
        out.append(np.array(sorted(set(int(i) for i in window) - {int(ids[t])}),
                            dtype=np.int64))
    return out

def tcl_loss(hidden, embedding, ids, loss_mask, cfg: LossConfig) -> float:
    """Token-level contrastive focal loss against the preceding-m negatives."""
    if cfg.m == 0:
        return 0.0
    hidden_b, ids_b, mask_b = _as_batch(hidden), _as_batch(ids), _as_batch(loss_mask)
    total = 0.0
    for hid, seq, msk in zip(hidden_b, ids_b, mask_b):
        seq = np.asarray(seq, dtype=np.int64)
        targets = np.nonzero(np.asarray(msk, dtype=bool))[0] + 1
        for t, negs in zip(targets, tcl_negative_sets(seq, targets, cfg.m)):
            h = hid[t - 1].astype(np.float64)
            if negs.size == 0:
                continue  # p_ct = 1 contributes 0
            z = embedding[negs].astype(np.float64) @ h - float(embedding[seq[t]] @ h)
            mx = max(0.0, float(z.max()))
            logp = -(mx + np.log(np.exp(-mx) + np.exp(z - mx).sum()))
            total += float(_focal_from_logp(logp, cfg.alpha, cfg.gamma))
    return total / len(hidden_b)


def combined_loss(parts: dict, cfg: LossConfig, het_active: bool = False) -> float:
    """L_ntp + lambda1*L_tcl + lambda2*L_nktp (+ lambda_het*L_het when active)."""
    total = parts["ntp"] + cfg.lambda1 * parts["tcl"] + cfg.lambda2 * parts["nktp"]
    if het_active:
        total += cfg.lambda_het * parts.get("het", 0.0)
    return total


# --------------------- streaming batch engine ---------------------

@dataclass(eq=False)
class DocTask:
    """One document's tensors as the engine consumes them."""
    ids: np.ndarray
    loss_mask: np.ndarray
    hidden: np.ndarray
    sample_id: str = ""


@dataclass
class LossPack:
    values: dict                 # unweighted ntp/tcl/nktp/het + weighted total
    d_hidden: list | None        # per document, or None when grads are off
    preds: list                  # per document: (target_positions, greedy_ids)
    n_error_positions: int
    no_masked_positions: bool


class _Workspace:
    """Reusable chunk buffers for the streamed vocabulary GEMMs."""

    def __init__(self, chunk_rows: int = 2048):
        self.chunk_rows = chunk_rows
        self._z = None
        self._dg = None

    def buffers(self, rows: int, vocab: int, dim: int, dtype):
        if (self._z is None or self._z.dtype != dtype
                or self._z.shape[0] < rows or self._z.shape[1] != vocab):
            self._z = np.empty((max(rows, self.chunk_rows), vocab), dtype=dtype)
            self._dg = np.empty((self._z.shape[0], dim), dtype=dtype)
        if self._dg.shape[1] != dim:
            self._dg = np.empty((self._z.shape[0], dim), dtype=dtype)
        return self._z[:rows], self._dg[:rows]


_DEFAULT_WS = _Workspace()


def batch_losses(params: ModelParams, docs: list[DocTask], cfg: LossConfig,
                 weights: dict | None = None, het_memory=None, het_active: bool = False,
                 want_grads: bool = True, want_preds: bool = True,
                 grads: dict | None = None, workspace: _Workspace | None = None) -> LossPack:
    """Compute all loss parts and (optionally) every gradient for one batch.

    weights selects the mix whose gradient is produced (defaults to the
    combined objective: ntp 1, tcl lambda1, nktp lambda2, het lambda_het when
    active); loss values are always reported unweighted. Embedding and
    adapter gradients accumulate into `grads`; d(hidden) is returned per
    document for the trunk backward.
    """
    if weights is None:
        weights = {"ntp": 1.0, "tcl": cfg.lambda1, "nktp": cfg.lambda2}
        if het_active:
            weights["het"] = cfg.lambda_het
    ws = workspace or _DEFAULT_WS
    B = len(docs)
    E = params.embedding
    V, d = E.shape
    dtype = params.dtype
    ET = E.T  # strided view; both GEMM backends take it natively

    want_preds = want_preds or ("het" in weights and het_active)
    need_head1 = any(k in weights for k in ("ntp", "het")) or want_preds
    need_nktp = "nktp" in weights and cfg.k >= 2
    het_on = "het" in weights and het_active and het_memory is not None

    # -- assemble (doc, head) row segments; head-1 segments first --
    segments = []  # (doc_idx, head_j, inputs, targets, grad_scale)
    any_masked = False
    for di, doc in enumerate(docs):
        mask = np.asarray(doc.loss_mask, dtype=bool)
        if mask.any():
            any_masked = True
        if need_head1:
            inp, tgt = nktp_rows(mask, doc.ids.size, 1)
            if inp.size:
                segments.append((di, 1, inp, doc.ids[tgt],
                                 weights.get("ntp", 0.0) / B))
    if need_nktp:
        for di, doc in enumerate(docs):
            mask = np.asarray(doc.loss_mask, dtype=bool)
            for j in range(2, cfg.k + 1):
                inp, tgt = nktp_rows(mask, doc.ids.size, j)
                if inp.size:
                    segments.append((di, j, inp, doc.ids[tgt],
                                     weights["nktp"] / ((cfg.k - 1) * B)))

    if not any_masked:
        warnings.warn("loss mask is entirely false across the batch", stacklevel=2)

    values = {"ntp": 0.0, "tcl": 0.0, "nktp": 0.0, "het": 0.0}
    d_hidden = [np.zeros_like(doc.hidden) for doc in docs] if want_grads else None
    if want_grads and grads is None:
        grads = {"embed.weight": np.zeros_like(E)}
        for j in range(2, cfg.k + 1):
            if params.adapter(j) is not None:
                grads.setdefault(f"heads.{j}.adapter", np.zeros_like(params.adapter(j)))
    preds = [(np.empty(0, np.int64), np.empty(0, np.int64))] * B
    het_rows = []   # (doc_idx, input_pos, target_id, mem_ids, degrees)
    n_error = 0

    # -- stream chunks of whole segments --
    ci = 0
    while ci < len(segments):
        rows = 0
        chunk = []
        while ci < len(segments) and (not chunk or rows + segments[ci][2].size <= ws.chunk_rows):
            chunk.append(segments[ci])
            rows += segments[ci][2].size
            ci += 1
        g_parts, t_parts, s_parts = [], [], []
        for di, j, inp, tgt, scale in chunk:
            g_parts.append(head_rows(params, docs[di].hidden, inp, j))
            t_parts.append(tgt)
            s_parts.append(np.full(inp.size, scale, dtype=dtype))
        G = np.concatenate(g_parts, axis=0)
        targets = np.concatenate(t_parts)
        scales = np.concatenate(s_parts)
        Z, dG = ws.buffers(G.shape[0], V, d, dtype)
        gemm(G, ET, out=Z)

        want_amax = want_preds and any(j == 1 for _, j, _, _, _ in chunk)
        if het_on:
            off = 0
            for di, j, inp, tgt_ids, _ in chunk:
                if j == 1:
                    sid = docs[di].sample_id
                    for r, (pos, tid) in enumerate(zip(inp, tgt_ids)):
                        mem = het_memory.get_ids(sid, int(pos) + 1)
                        if mem.size:
                            degs = Z[off + r, mem].astype(np.float64) - float(Z[off + r, tid])
                            het_rows.append((di, int(pos), int(tid), mem, degs))
                off += inp.size

        if want_grads:
            loss_rows, _, amax = softmax_focal_grad(Z, targets, cfg.alpha, cfg.gamma,
                                                    scales, want_argmax=want_amax)
        else:
            loss_rows, _, amax = softmax_focal_loss(Z, targets, cfg.alpha, cfg.gamma,
                                                    want_argmax=want_amax)

        off = 0
        for di, j, inp, tgt_ids, _ in chunk:
            seg_loss = float(loss_rows[off:off + inp.size].sum(dtype=np.float64))
            if j == 1:
                values["ntp"] += seg_loss
                if want_preds:
                    greedy = amax[off:off + inp.size]
                    preds[di] = (inp + 1, greedy.copy())
                    n_error += int((greedy != tgt_ids).sum())
            else:
                values["nktp"] += seg_loss
            if want_grads:
                rows_d = gemm(Z[off:off + inp.size], E, out=dG[off:off + inp.size])
                if j == 1:
                    d_hidden[di][inp] += rows_d
                else:
                    a = params.adapter(j)
                    d_hidden[di][inp] += gemm(rows_d, a)
                    gemm_acc(grads[f"heads.{j}.adapter"], rows_d.T, docs[di].hidden[inp])
            off += inp.size
        if want_grads:
            gemm_acc(grads["embed.weight"], Z.T, G)

    values["ntp"] /= B
    if cfg.k >= 2:
        values["nktp"] /= (cfg.k - 1) * B

    # -- token-level contrastive part (sparse in the vocabulary) --
    if "tcl" in weights and cfg.m > 0:
        for di, doc in enumerate(docs):
            v, dh_rows, de_updates = _tcl_doc(params, doc, cfg,
                                              weights["tcl"] / B if want_grads else None)
            values["tcl"] += v
            if want_grads and dh_rows is not None:
                tpos, dh = dh_rows
                d_hidden[di][tpos] += dh.astype(dtype)
                for ids_u, contrib in de_updates:
                    np.add.at(grads["embed.weight"], ids_u, contrib.astype(dtype))
        values["tcl"] /= B

    # -- HET part at current error positions --
    if het_on and want_preds:
        err = [(di, pos, tid, mem, degs) for di, pos, tid, mem, degs in het_rows
               if preds[di][1][np.searchsorted(preds[di][0], pos + 1)] != tid]
        if n_error:
            for di, pos, tid, mem, degs in err:
                sel = het_mod.select_negatives(mem, degs, cfg.l)
                sel_degs = degs[np.searchsorted(mem, sel)]
                loss, q = het_mod.het_position_loss(sel_degs)
                values["het"] += loss
                if want_grads and sel.size:
                    w = weights["het"] / n_error
                    h = docs[di].hidden[pos].astype(np.float64)
                    qsum = float(q.sum())
                    dh = (q[:, None] * E[sel].astype(np.float64)).sum(axis=0) - qsum * E[tid].astype(np.float64)
                    d_hidden[di][pos] += (w * dh).astype(dtype)
                    np.add.at(grads["embed.weight"], sel, (w * q[:, None] * h).astype(dtype))
                    grads["embed.weight"][tid] -= (w * qsum * h).astype(dtype)
            values["het"] /= n_error

    total = sum(weights.get(k, 0.0) * values[k] for k in values)
    values["total"] = total
    return LossPack(values=values, d_hidden=d_hidden, preds=preds,
                    n_error_positions=n_error, no_masked_positions=not any_masked)


def _tcl_doc(params: ModelParams, doc: DocTask, cfg: LossConfig, grad_scale):
    """One document's TCL value and sparse gradients (f64 internally)."""
    ids = doc.ids
    targets = np.nonzero(np.asarray(doc.loss_mask, dtype=bool))[0] + 1
    if targets.size == 0:
        return 0.0, None, []
    E = params.embedding
    neg_sets = tcl_negative_sets(ids, targets, cfg.m)
    H = doc.hidden[targets - 1].astype(np.float64)
    total = 0.0
    dh = np.zeros_like(H) if grad_scale is not None else None
    de_updates = []
    for r, (t, negs) in enumerate(zip(targets, neg_sets)):
        if negs.size == 0:
            continue
        h = H[r]
        e_t = E[ids[t]].astype(np.float64)
        e_n = E[negs].astype(np.float64)
        z = e_n @ h - e_t @ h
        mx = max(0.0, float(z.max()))
        lse = mx + np.log(np.exp(-mx) + np.exp(z - mx).sum())
        logp = -lse
        p = np.exp(logp)
        onem = max(1.0 - p, 0.0)
        total += float(-cfg.alpha * onem**cfg.gamma * logp)
        if grad_scale is not None:
            c = float(_focal_coeff(np.array(p), np.array(logp), np.array(onem),
                                   cfg.alpha, cfg.gamma, np.float64))
            q = np.exp(z - lse)            # d logp / d z_j = -q_j
            dz = -c * q * grad_scale
            dh[r] += dz @ e_n - dz.sum() * e_t
            de_updates.append((negs, dz[:, None] * h))
            de_updates.append((np.array([ids[t]]), (-dz.sum() * h)[None, :]))
    return total, (targets - 1, dh) if grad_scale is not None else None, de_updates
