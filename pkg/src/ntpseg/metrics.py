"""Pixel-level Dice and mIoU with per-image and aggregate reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return ConfusionCounts(
        tp=int((pred & gt).sum()),
        fp=int((pred & ~gt).sum()),
        fn=int((~pred & gt).sum()),
    )


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); empty vs empty counts as perfect agreement."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def miou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); empty vs empty counts as perfect agreement."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def aggregate(rows: list[dict]) -> dict:
    """Macro (per-image mean, the headline) and micro (global-count) scores."""
    n = len(rows)
    total = ConfusionCounts(0, 0, 0)
    for r in rows:
        total = total + ConfusionCounts(r["tp"], r["fp"], r["fn"])
    return {
        "n_images": n,
        "macro_dice": float(np.mean([r["dice"] for r in rows])) if n else 0.0,
        "macro_miou": float(np.mean([r["miou"] for r in rows])) if n else 0.0,
        "micro_dice": dice(total),
        "micro_miou": miou(total),
        "n_errors": sum(1 for r in rows if r.get("error")),
    }


def score_pair(sample_id: str, pred: np.ndarray, gt: np.ndarray) -> dict:
    c = confusion(pred, gt)
    return {"sample_id": sample_id, "tp": c.tp, "fp": c.fp, "fn": c.fn,
            "dice": dice(c), "miou": miou(c)}


def failed_row(sample_id: str, gt: np.ndarray, error: str) -> dict:
    """A decode failure scores 0 and carries the error note."""
    return {"sample_id": sample_id, "tp": 0, "fp": 0, "fn": int(np.asarray(gt).sum()),
            "dice": 0.0, "miou": 0.0, "error": error}


def format_report(report: dict) -> str:
    lines = [
        f"{'sample':<12} {'dice':>8} {'miou':>8}  note",
        "-" * 40,
    ]
    for r in report["per_image"]:
        note = r.get("error", "")
        lines.append(f"{r['sample_id']:<12} {r['dice']:>8.4f} {r['miou']:>8.4f}  {note}")
    a = report["aggregate"]
    lines.append("-" * 40)
    lines.append(f"macro dice {a['macro_dice']:.4f}  macro miou {a['macro_miou']:.4f}  "
                 f"micro dice {a['micro_dice']:.4f}  micro miou {a['micro_miou']:.4f}  "
                 f"images {a['n_images']}  decode errors {a['n_errors']}")
    return "\n".join(lines)
