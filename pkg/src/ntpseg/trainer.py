"""Teacher-forced training loop: model + losses + HET memory + AdamW.

Determinism contract: with a fixed seed and single-threaded BLAS, two runs
produce byte-identical checkpoints and metrics logs, and save/load/resume
matches uninterrupted training step for step. All stochastic draws (epoch
shuffles, dropout) come from generators derived per (seed, epoch, step), so
resuming needs no RNG state in the checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ntpseg.checkpoint import load_checkpoint, save_checkpoint
from ntpseg.codec import CodecConfig
from ntpseg.het import HetMemory
from ntpseg.losses import DocTask, LossConfig, _Workspace, batch_losses
from ntpseg.model import (ModelConfig, ModelParams, backward_trunk, decay_mask,
                          forward_trunk, init_params)
from ntpseg.sequence import MultimodalDocument, VocabLayout, tokenize_sample

ADAM_EPS = 1e-8


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_steps: int = 30
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0
    train_on_all_tokens: bool = False

    def __post_init__(self):
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over warmup_steps, then cosine to min_lr at total_steps.

    `step` is the 1-based optimizer step about to be applied.
    """
    if not 0 <= step <= max(total_steps, cfg.warmup_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = max(1, total_steps - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients so the global norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if math.isfinite(norm) and norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= np.float32(scale) if g.dtype == np.float32 else scale
    return norm


def adamw_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: dict, lr: float, cfg: TrainConfig,
               decay: dict[str, bool]) -> bool:
    """Decoupled-weight-decay Adam update in place.

    Returns False (and mutates nothing) if any gradient is non-finite.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            return False
    state["t"] += 1
    t = state["t"]
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in tensors.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if decay[name] and cfg.weight_decay > 0.0:
            p -= p.dtype.type(lr * cfg.weight_decay) * p
        p -= (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
    return True


def documents_from_records(records, root, codec_cfg: CodecConfig,
                           train_on_all_tokens: bool = False) -> list[MultimodalDocument]:
    """Tokenize dataset records into documents, sorted by sample_id."""
    from ntpseg.data import load_image, load_mask

    docs = []
    for rec in sorted(records, key=lambda r: r.sample_id):
        img = load_image(Path(root) / rec.image_path)
        mask = load_mask(Path(root) / rec.mask_path)
        docs.append(tokenize_sample(img, mask, rec.description, codec_cfg,
                                    sample_id=rec.sample_id,
                                    train_on_all_tokens=train_on_all_tokens))
    return docs


class Trainer:
    def __init__(self, codec_cfg: CodecConfig, model_cfg: ModelConfig,
                 loss_cfg: LossConfig, train_cfg: TrainConfig,
                 metrics_path=None):
        if model_cfg.k_heads < loss_cfg.k:
            raise TrainError(f"model k_heads {model_cfg.k_heads} < loss k {loss_cfg.k}")
        self.codec_cfg = codec_cfg
        self.model_cfg = model_cfg
        het_start = loss_cfg.het_start_epoch
        if het_start < 0:
            het_start = int(round(0.6 * train_cfg.epochs))
        self.loss_cfg = dataclasses.replace(loss_cfg, het_start_epoch=het_start)
        self.train_cfg = train_cfg
        self.layout = VocabLayout.from_codec(codec_cfg)
        self.params = init_params(model_cfg, seed=train_cfg.seed, dtype=np.float32)
        self.decay = decay_mask(model_cfg)
        self.opt = {"t": 0,
                    "m": self.params.zeros_like(),
                    "v": self.params.zeros_like()}
        self.het_memory = HetMemory()
        self.epoch_next = 0
        self.global_step = 0
        self.workspace = _Workspace()
        self._grads = self.params.zeros_like()
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self._metrics_fh = None

    # -- metrics log --

    def _emit(self, record: dict) -> None:
        if self.metrics_path is None:
            return
        if self._metrics_fh is None:
            self._metrics_fh = open(self.metrics_path, "a", encoding="utf-8")
        self._metrics_fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    def close(self) -> None:
        if self._metrics_fh is not None:
            self._metrics_fh.close()
            self._metrics_fh = None

    # -- schedule bookkeeping --

    def steps_per_epoch(self, n_docs: int) -> int:
        return max(1, math.ceil(n_docs / self.train_cfg.batch_size))

    def total_steps(self, n_docs: int) -> int:
        return self.train_cfg.epochs * self.steps_per_epoch(n_docs)

    def het_active(self, epoch: int) -> bool:
        return (self.loss_cfg.lambda_het != 0.0
                and epoch >= self.loss_cfg.het_start_epoch)

    def _loss_weights(self, epoch: int) -> dict:
        w = {"ntp": 1.0}
        if self.loss_cfg.lambda1 != 0.0 and self.loss_cfg.m > 0:
            w["tcl"] = self.loss_cfg.lambda1
        if self.loss_cfg.lambda2 != 0.0 and self.loss_cfg.k >= 2:
            w["nktp"] = self.loss_cfg.lambda2
        if self.het_active(epoch):
            w["het"] = self.loss_cfg.lambda_het
        return w

    # -- the loop --

    def run_epoch(self, docs: list[MultimodalDocument]) -> dict:
        cfg = self.train_cfg
        epoch = self.epoch_next
        n = len(docs)
        order = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(epoch, 11)))).permutation(n)
        spe = self.steps_per_epoch(n)
        total_steps = self.total_steps(n)
        het_active = self.het_active(epoch)
        weights = self._loss_weights(epoch)
        use_dropout = self.model_cfg.dropout > 0.0

        sums = {"ntp": 0.0, "tcl": 0.0, "nktp": 0.0, "het": 0.0, "total": 0.0}
        epoch_preds: dict[str, tuple] = {}
        n_correct = n_masked = 0

        for step in range(spe):
            batch_idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if batch_idx.size == 0:
                continue
            batch = [docs[i] for i in batch_idx]
            drop_rng = (np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                entropy=cfg.seed, spawn_key=(epoch, step, 7)))) if use_dropout else None)
            tasks, caches = [], []
            for doc in batch:
                hidden, cache = forward_trunk(self.params, doc.ids, drop_rng=drop_rng,
                                              want_cache=True)
                tasks.append(DocTask(ids=doc.ids, loss_mask=doc.loss_mask,
                                     hidden=hidden, sample_id=doc.sample_id))
                caches.append(cache)

            for g in self._grads.values():
                g.fill(0.0)
            pack = batch_losses(self.params, tasks, self.loss_cfg, weights=weights,
                                het_memory=self.het_memory, het_active=het_active,
                                grads=self._grads, workspace=self.workspace)
            if not math.isfinite(pack.values["total"]):
                raise TrainError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"{pack.values} (samples {[d.sample_id for d in batch]})")
            for i, cache in enumerate(caches):
                backward_trunk(self.params, cache, pack.d_hidden[i], self._grads)

            grad_norm = clip_grads(self._grads, cfg.grad_clip)
            lr = lr_at(min(self.opt["t"] + 1, total_steps), total_steps, cfg)
            applied = adamw_step(self.params.tensors, self._grads, self.opt, lr,
                                 cfg, self.decay)
            self.global_step += 1
            record = {"step": self.global_step, "epoch": epoch, "lr": lr,
                      "loss_ntp": pack.values["ntp"], "loss_tcl": pack.values["tcl"],
                      "loss_nktp": pack.values["nktp"], "loss_het": pack.values["het"],
                      "loss_total": pack.values["total"], "grad_norm": grad_norm}
            if not applied:
                record["incident"] = "non-finite gradient; step rejected"
            self._emit(record)

            for key in sums:
                sums[key] += pack.values[key]
            for doc, (tpos, pred) in zip(batch, pack.preds):
                targets = doc.ids[tpos]
                epoch_preds[doc.sample_id] = (tpos, pred, targets)
                n_correct += int((pred == targets).sum())
                n_masked += int(tpos.size)

        for sid in sorted(epoch_preds):
            tpos, pred, targets = epoch_preds[sid]
            self.het_memory.record_epoch_errors(epoch, sid, tpos, pred, targets)

        self.epoch_next += 1
        report = {k: v / spe for k, v in sums.items()}
        report.update(epoch=epoch, token_accuracy=(n_correct / n_masked) if n_masked else 0.0,
                      het_active=het_active, steps=spe)
        return report

    def train(self, docs: list[MultimodalDocument], epochs: int | None = None,
              on_epoch=None):
        """Run up to cfg.epochs (or the given cap); returns the last report."""
        last = None
        stop_at = self.train_cfg.epochs if epochs is None else min(epochs, self.train_cfg.epochs)
        while self.epoch_next < stop_at:
            last = self.run_epoch(docs)
            if on_epoch is not None and on_epoch(self, last):
                break
        if self._metrics_fh is not None:
            self._metrics_fh.flush()
        return last

    # -- persistence --

    def configs(self) -> dict:
        return {"codec": self.codec_cfg, "model": self.model_cfg,
                "loss": self.loss_cfg, "train": self.train_cfg}

    def save(self, path) -> None:
        opt_tensors = {}
        for name, arr in self.opt["m"].items():
            opt_tensors[f"adam.m.{name}"] = arr
        for name, arr in self.opt["v"].items():
            opt_tensors[f"adam.v.{name}"] = arr
        save_checkpoint(path, self.params, self.configs(), opt_tensors,
                        het_records=self.het_memory.to_records(),
                        trainer_state={"epoch_next": self.epoch_next,
                                       "global_step": self.global_step,
                                       "adam_t": self.opt["t"]})

    @classmethod
    def load(cls, path, metrics_path=None) -> "Trainer":
        header, tensors = load_checkpoint(path)
        conf = header["config"]
        trainer = cls(CodecConfig(**conf["codec"]), ModelConfig(**conf["model"]),
                      LossConfig(**conf["loss"]), TrainConfig(**conf["train"]),
                      metrics_path=metrics_path)
        for name in trainer.params.tensors:
            trainer.params.tensors[name][...] = tensors[name]
            trainer.opt["m"][name][...] = tensors[f"adam.m.{name}"]
            trainer.opt["v"][name][...] = tensors[f"adam.v.{name}"]
        state = header["trainer_state"]
        trainer.opt["t"] = state["adam_t"]
        trainer.epoch_next = state["epoch_next"]
        trainer.global_step = state["global_step"]
        trainer.het_memory = HetMemory.from_records(header["het_memory"])
        return trainer
