"""Deterministic grid tokenizers for masks and grayscale images.

A binary mask is cut into patch_size x patch_size patches; each patch maps
bit-exactly to one integer pattern token (LSB = patch pixel (0,0), row-major
within the patch), so encode/decode round-trips exactly. Grayscale images are
tokenized lossily into per-patch mean-intensity bins: the image block only
conditions generation, it is never reconstructed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CodecError(ValueError):
    """Raised for inputs that violate the codec contracts."""


@dataclass(frozen=True)
class CodecConfig:
    patch_size: int = 4
    intensity_bins: int = 64

    def __post_init__(self):
        if self.patch_size not in (2, 3, 4):
            raise CodecError(f"patch_size must be 2, 3, or 4, got {self.patch_size}")
        if not 1 <= self.intensity_bins <= 256:
            raise CodecError(f"intensity_bins must be in [1, 256], got {self.intensity_bins}")

    @property
    def n_patterns(self) -> int:
        """Number of distinct mask patch patterns: 2**(patch_size**2)."""
        return 1 << (self.patch_size * self.patch_size)


def _check_divisible(h: int, w: int, p: int) -> None:
    if h <= 0 or w <= 0 or h % p or w % p:
        raise CodecError(f"grid {h}x{w} is not a positive multiple of patch_size {p}")


def _patches(a: np.ndarray, p: int) -> np.ndarray:
    """(H, W) -> (H//p * W//p, p*p) row-major patches, row-major within patch."""
    h, w = a.shape
    return a.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)


def encode_mask(mask: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Binary (H, W) array of {0,1} -> int64 pattern tokens, row-major grid order."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CodecError(f"mask must be 2-D, got shape {mask.shape}")
    _check_divisible(mask.shape[0], mask.shape[1], cfg.patch_size)
    bits = mask.astype(np.int64)
    if not np.isin(bits, (0, 1)).all():
        raise CodecError("mask values must be 0 or 1")
    weights = np.int64(1) << np.arange(cfg.patch_size * cfg.patch_size, dtype=np.int64)
    return _patches(bits, cfg.patch_size) @ weights


def decode_mask(tokens: np.ndarray, grid_h: int, grid_w: int, cfg: CodecConfig) -> np.ndarray:
    """Inverse of encode_mask: pattern tokens -> (grid_h*p, grid_w*p) binary mask."""
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if tokens.size != grid_h * grid_w:
        raise CodecError(f"expected {grid_h * grid_w} tokens for a {grid_h}x{grid_w} grid, got {tokens.size}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.n_patterns):
        raise CodecError(f"pattern out of range [0, {cfg.n_patterns})")
    p = cfg.patch_size
    shifts = np.arange(p * p, dtype=np.int64)
    bits = (tokens[:, None] >> shifts) & 1  # (cells, p*p)
    return (
        bits.reshape(grid_h, grid_w, p, p)
        .transpose(0, 2, 1, 3)
        .reshape(grid_h * p, grid_w * p)
        .astype(np.uint8)
    )


def encode_image(img: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Grayscale (H, W) array in [0, 255] -> per-patch mean-intensity bin tokens.

    token = floor(mean / 256 * intensity_bins), clamped to intensity_bins - 1.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise CodecError(f"image must be 2-D, got shape {img.shape}")
    _check_divisible(img.shape[0], img.shape[1], cfg.patch_size)
    vals = img.astype(np.float64)
    if vals.min() < 0 or vals.max() > 255:
        raise CodecError("image intensities must lie in [0, 255]")
    means = _patches(vals, cfg.patch_size).mean(axis=1)
    tokens = np.floor(means / 256.0 * cfg.intensity_bins).astype(np.int64)
    return np.minimum(tokens, cfg.intensity_bins - 1)


def binarize(img: np.ndarray, threshold: int = 128) -> np.ndarray:
    """Threshold an 8-bit grayscale mask image to {0,1} (>= threshold is lesion)."""
    return (np.asarray(img) >= threshold).astype(np.uint8)
