"""Central finite-difference verification of the hand-written gradients.

Builds a tiny float64 model over random documents and compares the analytic
gradient of each selected loss mix against (L(t+h) - L(t-h)) / 2h on a
random sample of parameter coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ntpseg.het import HetMemory
from ntpseg.losses import DocTask, LossConfig, batch_losses
from ntpseg.model import ModelConfig, ModelParams, backward_trunk, forward_trunk, init_params


def tiny_config(vocab: int = 32, dim: int = 16, n_layers: int = 2, k_heads: int = 3,
                seq: int = 24) -> ModelConfig:
    return ModelConfig(vocab_size=vocab, dim=dim, n_layers=n_layers, n_heads=4,
                       n_kv_heads=2, max_seq_len=seq, k_heads=k_heads, dropout=0.0)


def random_docs(cfg: ModelConfig, n_docs: int, seq: int, seed: int,
                mask_fraction: float = 0.6) -> list[DocTask]:
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        ids = rng.integers(0, cfg.vocab_size, size=seq, dtype=np.int64)
        mask = np.zeros(seq, dtype=bool)
        mask[: seq - 1] = rng.random(seq - 1) < mask_fraction
        if not mask.any():
            mask[seq // 2] = True
        docs.append(DocTask(ids=ids, loss_mask=mask, hidden=None, sample_id=f"g{i}"))
    return docs


def random_het_memory(docs: list[DocTask], vocab: int, seed: int,
                      max_entries: int = 6) -> HetMemory:
    rng = np.random.default_rng(seed)
    mem = HetMemory()
    for doc in docs:
        targets = np.nonzero(doc.loss_mask)[0] + 1
        for t in targets:
            n = int(rng.integers(0, max_entries + 1))
            if n == 0:
                continue
            wrong = rng.choice([v for v in range(vocab) if v != doc.ids[t]],
                               size=min(n, vocab - 1), replace=False)
            mem.record_epoch_errors(0, doc.sample_id, np.full(wrong.size, t),
                                    wrong.astype(np.int64), np.full(wrong.size, doc.ids[t]))
    return mem


def het_instance_is_boundary_safe(params: ModelParams, docs: list[DocTask],
                                  cfg: LossConfig, memory: HetMemory,
                                  margin: float = 1e-2) -> bool:
    """True when no FD step of ~1e-4 can flip the error set or the selection.

    The HET loss is piecewise smooth: the greedy error set and the
    top/bottom-l/2 selection are discrete. Finite differences only equal the
    analytic (sub)gradient away from those boundaries, so the check instance
    must keep a margin around every argmax gap and selection cutoff.
    """
    for doc in docs:
        hidden, _ = forward_trunk(params, doc.ids)
        tpos = np.nonzero(doc.loss_mask)[0] + 1
        logits = hidden[tpos - 1] @ params.embedding.T
        top2 = np.partition(logits, -2, axis=1)[:, -2:]
        if (top2[:, 1] - top2[:, 0]).min() < margin:
            return False
        greedy = logits.argmax(axis=1)
        for r, t in enumerate(tpos):
            tid = doc.ids[t]
            if greedy[r] == tid:
                continue
            ids = memory.get_ids(doc.sample_id, int(t))
            if ids.size <= cfg.l:
                continue
            degs = np.sort(logits[r, ids] - logits[r, tid])
            half = cfg.l // 2
            if degs[half] - degs[half - 1] < margin:
                return False
            if degs[-half] - degs[-half - 1] < margin:
                return False
    return True


def loss_and_grads(params: ModelParams, docs: list[DocTask], cfg: LossConfig,
                   weights: dict, het_memory=None, het_active: bool = False,
                   want_grads: bool = True):
    """Weighted total loss and (optionally) the full analytic gradient dict."""
    caches = []
    for doc in docs:
        doc.hidden, cache = forward_trunk(params, doc.ids, want_cache=want_grads)
        caches.append(cache)
    grads = params.zeros_like() if want_grads else None
    pack = batch_losses(params, docs, cfg, weights=weights, het_memory=het_memory,
                        het_active=het_active, want_grads=want_grads, grads=grads)
    if want_grads:
        for i, cache in enumerate(caches):
            backward_trunk(params, cache, pack.d_hidden[i], grads)
    return pack.values["total"], grads, pack


@dataclass
class GradCheckReport:
    name: str
    n_checked: int
    max_rel_err: float
    worst_tensor: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def check_loss_gradients(params: ModelParams, docs: list[DocTask], cfg: LossConfig,
                         weights: dict, name: str, n_coords: int = 200,
                         step: float = 1e-4, tol: float = 1e-4, seed: int = 0,
                         het_memory=None, het_active: bool = False,
                         denom_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic vs central-difference gradients on random coordinates.

    rel err = |an - fd| / max(|an|, |fd|, denom_floor). The floor keeps
    coordinates whose true gradient sits below the central-difference noise
    floor (machine_eps * |L| / step, about 1e-10 here) from reading as
    spurious relative error; it is orders of magnitude below the typical
    gradient scale, so genuine backprop defects still fail.
    """
    _, grads, _ = loss_and_grads(params, docs, cfg, weights,
                                 het_memory=het_memory, het_active=het_active)
    names = sorted(grads)
    sizes = np.array([grads[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    def value() -> float:
        v, _, _ = loss_and_grads(params, docs, cfg, weights, want_grads=False,
                                 het_memory=het_memory, het_active=het_active)
        return v

    max_rel, worst = 0.0, ""
    for fi in flat_idx:
        ti = int(np.searchsorted(bounds, fi, side="right"))
        off = int(fi - (bounds[ti - 1] if ti else 0))
        tensor = params.tensors[names[ti]]
        orig = tensor.flat[off]
        tensor.flat[off] = orig + step
        up = value()
        tensor.flat[off] = orig - step
        down = value()
        tensor.flat[off] = orig
        fd = (up - down) / (2.0 * step)
        an = float(grads[names[ti]].flat[off])
        rel = abs(an - fd) / max(abs(an), abs(fd), denom_floor)
        if rel > max_rel:
            max_rel, worst = rel, f"{names[ti]}[{off}]"
    return GradCheckReport(name=name, n_checked=len(flat_idx), max_rel_err=max_rel,
                           worst_tensor=worst, tol=tol)


def standard_suite(n_coords: int = 200, seed: int = 0, tol: float = 1e-4):
    """The five checks of the acceptance gate on the tiny f64 config."""
    mcfg = tiny_config()
    params = init_params(mcfg, seed=seed, dtype=np.float64)
    lcfg = LossConfig(alpha=0.25, gamma=2.0, k=3, m=3, l=4)
    docs = random_docs(mcfg, n_docs=2, seq=24, seed=seed + 1)
    for attempt in range(50):
        mem = random_het_memory(docs, mcfg.vocab_size, seed + 2 + attempt)
        if het_instance_is_boundary_safe(params, docs, lcfg, mem):
            break
    else:
        raise RuntimeError("no boundary-safe HET instance found")
    cases = [
        ("ntp", {"ntp": 1.0}, None, False),
        ("tcl", {"tcl": 1.0}, None, False),
        ("nktp", {"nktp": 1.0}, None, False),
        ("het", {"het": 1.0}, mem, True),
        ("combined", {"ntp": 1.0, "tcl": lcfg.lambda1, "nktp": lcfg.lambda2,
                      "het": lcfg.lambda_het}, mem, True),
    ]
    reports = []
    for name, weights, memory, active in cases:
        reports.append(check_loss_gradients(params, docs, lcfg, weights, name,
                                            n_coords=n_coords, seed=seed + 3,
                                            het_memory=memory, het_active=active,
                                            tol=tol))
    return reports
