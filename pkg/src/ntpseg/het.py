"""Hard-error-token memory and loss.

Tracks, per (sample_id, position), every token the model greedily mispredicted
in any past epoch; at positions still wrong in the current batch, the stored
tokens are ranked by error degree (their current logit minus the ground
truth's) and the strongest plus weakest halves serve as contrastive
negatives against the ground-truth token.
"""

from __future__ import annotations

import numpy as np


def error_degree(logits_row: np.ndarray, token: int, target: int) -> float:
    """Eq.-style ranking score: logit(token) - logit(target); shift invariant."""
    return float(logits_row[token]) - float(logits_row[target])


def select_negatives(token_ids: np.ndarray, degrees: np.ndarray, l: int) -> np.ndarray:
    """Pick the l/2 highest- and l/2 lowest-degree tokens (all if <= l).

    Selection is without replacement: the top half is removed before the
    bottom half is drawn. Ties break by ascending token id. Returns the
    selected ids sorted ascending.
    """
    if l % 2:
        raise ValueError(f"l must be even, got {l}")
    token_ids = np.asarray(token_ids, dtype=np.int64)
    degrees = np.asarray(degrees, dtype=np.float64)
    n = token_ids.size
    if n <= l:
        return np.sort(token_ids)
    half = l // 2
    top_order = np.lexsort((token_ids, -degrees))  # desc degree, asc id
    top = top_order[:half]
    rest = top_order[half:]
    bot_order = rest[np.lexsort((token_ids[rest], degrees[rest]))]  # asc degree, asc id
    return np.sort(np.concatenate([token_ids[top], token_ids[bot_order[:half]]]))


def het_position_loss(degrees_selected: np.ndarray):
    """Single-position loss and its gradient coefficients.

    degrees_selected[j] = logit(neg_j) - logit(gt). Returns (loss, q) with
    loss = log(1 + sum_j exp(degree_j)) >= 0 and q_j = d loss / d degree_j
    (the selected tokens' softmax weights against the ground truth).
    """
    d = np.asarray(degrees_selected, dtype=np.float64)
    if d.size == 0:
        return 0.0, d
    m = max(0.0, float(d.max()))
    lse = m + np.log(np.exp(-m) + np.exp(d - m).sum())
    return float(lse), np.exp(d - lse)


class HetMemory:
    """Per-(sample_id, position) sets of historically mispredicted token ids."""

    def __init__(self):
        self._table: dict[tuple[str, int], set[int]] = {}
        self._last_epoch: dict[tuple[str, int], int] = {}

    def __len__(self) -> int:
        return len(self._table)

    def get(self, sample_id: str, position: int) -> frozenset:
        return frozenset(self._table.get((sample_id, position), ()))

    def get_ids(self, sample_id: str, position: int) -> np.ndarray:
        """Stored ids as a sorted array (deterministic iteration order)."""
        s = self._table.get((sample_id, position))
        if not s:
            return np.empty(0, dtype=np.int64)
        return np.array(sorted(s), dtype=np.int64)

    def last_updated_epoch(self, sample_id: str, position: int):
        return self._last_epoch.get((sample_id, position))

    def record_epoch_errors(self, epoch: int, sample_id: str,
                            positions: np.ndarray, predictions: np.ndarray,
                            targets: np.ndarray) -> None:
        """Insert greedily mispredicted tokens observed during the given epoch."""
        for pos, pred, tgt in zip(positions, predictions, targets):
            if pred == tgt:
                continue
            key = (sample_id, int(pos))
            entry = self._table.setdefault(key, set())
            entry.add(int(pred))
            entry.discard(int(tgt))  # invariant: never the ground truth
            self._last_epoch[key] = epoch

    # -- checkpoint serialization: sorted (sample_id, position, ids) records --

    def to_records(self) -> list:
        return [
            [sid, pos, sorted(self._table[(sid, pos)]), self._last_epoch[(sid, pos)]]
            for sid, pos in sorted(self._table)
        ]

    @classmethod
    def from_records(cls, records) -> "HetMemory":
        mem = cls()
        for sid, pos, ids, epoch in records:
            mem._table[(sid, int(pos))] = set(int(i) for i in ids)
            mem._last_epoch[(sid, int(pos))] = int(epoch)
        return mem


def het_loss(logits_rows: np.ndarray, targets: np.ndarray, memory_sets,
             l: int) -> float:
    """Reference batch loss over current error positions.

    logits_rows[i] are the head-1 logits at the i-th error position,
    targets[i] its ground truth, memory_sets[i] the stored negative ids.
    Mean over positions; empty batch or empty memories give 0.
    """
    n = len(targets)
    if n == 0:
        return 0.0
    total = 0.0
    for row, tgt, mem in zip(logits_rows, targets, memory_sets):
        ids = np.array(sorted(mem), dtype=np.int64)
        if ids.size == 0:
            continue
        degrees = row[ids].astype(np.float64) - float(row[tgt])
        sel = select_negatives(ids, degrees, l)
        loss, _ = het_position_loss(row[sel].astype(np.float64) - float(row[tgt]))
        total += loss
    return total / n
