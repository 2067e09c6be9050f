"""Synthetic referring-segmentation dataset plus the on-disk manifest loader.

Each sample is a grayscale image with a textured two-lobe background and 1-3
bright elliptical lesion blobs, the exact binary mask of their union, and a
description generated from a fixed template grammar:

    (unilateral|bilateral) infection, <count> infected area(s),
    <region>[ and <region> ...]

with regions drawn from {upper,middle,lower} x {left,right}. Descriptions
are faithful by construction: the count equals the number of connected
components and every declared region contains a blob center. Generation is
deterministic per (seed, sample index).

Disk layout: root/{images,masks}/<id>.png, root/texts/<id>.txt, and
root/manifest.jsonl with one JSON record per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

REGION_ORDER = ["upper left", "middle left", "lower left",
                "upper right", "middle right", "lower right"]
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for malformed manifests or missing files."""


@dataclass
class SampleRecord:
    sample_id: str
    image_path: str
    mask_path: str
    description: str
    split: str


def region_of(cy: float, cx: float, height: int, width: int) -> str:
    band = "upper" if cy < height / 3 else ("middle" if cy < 2 * height / 3 else "lower")
    side = "left" if cx < width / 2 else "right"
    return f"{band} {side}"


def _region_bounds(region: str, height: int, width: int):
    band, side = region.split()
    rows = {"upper": (0, height // 3), "middle": (height // 3, 2 * height // 3),
            "lower": (2 * height // 3, height)}[band]
    cols = (0, width // 2) if side == "left" else (width // 2, width)
    return rows, cols


def _ellipse(height: int, width: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.ogrid[:height, :width]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0


def _smooth_noise(rng, height: int, width: int, cells: int = 8, amplitude: float = 12.0):
    coarse = rng.uniform(-amplitude, amplitude, (cells, cells))
    img = Image.fromarray(coarse.astype(np.float32), mode="F")
    return np.asarray(img.resize((width, height), Image.BILINEAR))


def _place_blobs(rng, height: int, width: int):
    """Sample 1-3 non-touching ellipses with centers in named regions."""
    n_blobs = int(rng.integers(1, 4))
    r_lo, r_hi = max(2.5, 0.07 * height), max(4.0, 0.16 * height)
    blobs = []  # (cy, cx, ry, rx)
    for _ in range(n_blobs):
        for _attempt in range(200):
            region = REGION_ORDER[int(rng.integers(0, 6))]
            (r0, r1), (c0, c1) = _region_bounds(region, height, width)
            ry, rx = rng.uniform(r_lo, r_hi, 2)
            cy = rng.uniform(max(r0, ry + 1), min(r1 - 1e-9, height - ry - 2))
            cx = rng.uniform(max(c0, rx + 1), min(c1 - 1e-9, width - rx - 2))
            if cy < max(r0, ry + 1) or cx < max(c0, rx + 1):
                continue
            # keep bounding boxes 2 px apart so components never merge
            clear = all(
                abs(cy - oy) > ry + ory + 2 or abs(cx - ox) > rx + orx + 2
                for oy, ox, ory, orx in blobs
            )
            if clear:
                blobs.append((cy, cx, ry, rx))
                break
    return blobs


def _describe(blobs, height: int, width: int) -> str:
    regions = [region_of(cy, cx, height, width) for cy, cx, _, _ in blobs]
    sides = {r.split()[1] for r in regions}
    lateral = "unilateral" if len(sides) == 1 else "bilateral"
    uniq = [r for r in REGION_ORDER if r in set(regions)]
    count = COUNT_WORDS[len(blobs)]
    plural = "" if len(blobs) == 1 else "s"
    return f"{lateral} infection, {count} infected area{plural}, {' and '.join(uniq)}"


def render_sample(seed: int, index: int, img_size: int = 64):
    """Deterministically render (image, mask, description) for one sample."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=seed, spawn_key=(index,))))
    h = w = img_size
    blobs = _place_blobs(rng, h, w)

    base = rng.uniform(25.0, 45.0)
    img = np.full((h, w), base, dtype=np.float64)
    for cx_frac in (0.28, 0.72):
        lobe = _ellipse(h, w, h * 0.52, w * cx_frac, h * 0.38, w * 0.18)
        img[lobe] += 25.0
    img += _smooth_noise(rng, h, w)

    mask = np.zeros((h, w), dtype=np.uint8)
    for cy, cx, ry, rx in blobs:
        blob = _ellipse(h, w, cy, cx, ry, rx)
        mask[blob] = 1
        img[blob] = rng.uniform(170.0, 220.0) + rng.normal(0.0, 6.0, int(blob.sum()))
    img = np.clip(img, 0.0, 255.0).astype(np.uint8)
    return img, mask, _describe(blobs, h, w)


def split_of_index(index: int, n: int) -> str:
    """First 80% train, next 10% val, last 10% test (by sample index)."""
    if index < int(n * 0.8):
        return "train"
    if index < int(n * 0.9):
        return "val"
    return "test"


def generate_synthetic(root, seed: int, n: int, img_size: int = 64) -> list[SampleRecord]:
    """Write n samples plus manifest under root; returns the records."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    root = Path(root)
    for sub in ("images", "masks", "texts"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        img, mask, text = render_sample(seed, i, img_size)
        sid = f"s{i:05d}"
        img_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
        Image.fromarray(img, mode="L").save(root / img_rel)
        Image.fromarray(mask * 255, mode="L").save(root / mask_rel)
        (root / "texts" / f"{sid}.txt").write_text(text + "\n", encoding="utf-8")
        records.append(SampleRecord(sid, img_rel, mask_rel, text, split_of_index(i, n)))
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "sample_id": r.sample_id, "image": r.image_path, "mask": r.mask_path,
                "description": r.description, "split": r.split,
            }, separators=(",", ":")) + "\n")
    return records


def load_manifest(root) -> list[SampleRecord]:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            sid = rec["sample_id"]
            if sid in seen:
                raise DatasetError(f"duplicate sample_id {sid!r} (manifest line {line_no})")
            seen.add(sid)
            if rec["split"] not in SPLITS:
                raise DatasetError(f"unknown split {rec['split']!r} for {sid!r}")
            for key in ("image", "mask"):
                if not (root / rec[key]).exists():
                    raise DatasetError(f"missing file for {sid!r}: {root / rec[key]}")
            records.append(SampleRecord(sid, rec["image"], rec["mask"],
                                        rec["description"], rec["split"]))
    return records


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def load_mask(path, threshold: int = 128) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) >= threshold).astype(np.uint8)
