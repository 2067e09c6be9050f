"""Unified vocabulary and the multimodal document format.

A training sample is one flat id sequence:

    [BOS] [SOV] {meta} [SOT] {image tokens} [EOV] {description bytes}
          [SOV] {meta} [SOT] {mask tokens}  [EOV] [EOS]

where {meta} is the byte encoding of "{pixel_height}*{pixel_width}". Text is
byte-level (one token per UTF-8 byte), so the vocabulary is fully determined
by the codec configuration: 256 byte ids, six specials, intensity_bins image
ids, 2**(p*p) mask pattern ids, in contiguous disjoint ranges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ntpseg.codec import CodecConfig

N_TEXT = 256


class DocumentError(ValueError):
    """Raised when an id sequence violates the document grammar."""


@dataclass(frozen=True)
class VocabLayout:
    patch_size: int = 4
    intensity_bins: int = 64

    text_base: int = 0
    BOS: int = 256
    EOS: int = 257
    SOV: int = 258
    SOT: int = 259
    EOV: int = 260
    PAD: int = 261

    @classmethod
    def from_codec(cls, cfg: CodecConfig) -> "VocabLayout":
        return cls(patch_size=cfg.patch_size, intensity_bins=cfg.intensity_bins)

    @property
    def img_base(self) -> int:
        return 262

    @property
    def mask_base(self) -> int:
        return self.img_base + self.intensity_bins

    @property
    def n_patterns(self) -> int:
        return 1 << (self.patch_size * self.patch_size)

    @property
    def vocab_size(self) -> int:
        return self.mask_base + self.n_patterns

    # -- category predicates (exactly one holds per valid id) --

    def is_text(self, i: int) -> bool:
        return 0 <= i < N_TEXT

    def is_special(self, i: int) -> bool:
        return N_TEXT <= i < self.img_base

    def is_image(self, i: int) -> bool:
        return self.img_base <= i < self.mask_base

    def is_mask(self, i: int) -> bool:
        return self.mask_base <= i < self.vocab_size

    def category(self, i: int) -> str:
        if self.is_text(i):
            return "text"
        if self.is_special(i):
            return "special"
        if self.is_image(i):
            return "image"
        if self.is_mask(i):
            return "mask"
        raise DocumentError(f"id {i} outside vocabulary of size {self.vocab_size}")


@dataclass
class MultimodalDocument:
    ids: np.ndarray                      # int64, full sequence
    image_span: tuple[int, int]          # half-open, image tokens only
    text_span: tuple[int, int]           # half-open, description bytes only
    mask_span: tuple[int, int]           # half-open, mask tokens only
    loss_mask: np.ndarray                # bool per input position (target trained?)
    grid: tuple[int, int]                # (grid_h, grid_w) of both vision blocks
    sample_id: str = ""

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MultimodalDocument)
            and np.array_equal(self.ids, other.ids)
            and self.image_span == other.image_span
            and self.text_span == other.text_span
            and self.mask_span == other.mask_span
            and np.array_equal(self.loss_mask, other.loss_mask)
            and self.grid == other.grid
            and self.sample_id == other.sample_id
        )

    @property
    def mask_tokens(self) -> np.ndarray:
        return self.ids[self.mask_span[0]:self.mask_span[1]]

    @property
    def image_tokens(self) -> np.ndarray:
        return self.ids[self.image_span[0]:self.image_span[1]]

    @property
    def text(self) -> str:
        return decode_text(self.ids[self.text_span[0]:self.text_span[1]])


def encode_text(text: str) -> np.ndarray:
    """UTF-8 byte-level tokenization: one id in [0, 256) per byte."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode_text(ids: np.ndarray) -> str:
    return bytes(int(i) for i in ids).decode("utf-8")


def document_length(n_img: int, n_text: int, n_mask: int, meta_len: int) -> int:
    """Total ids: BOS + EOS + two vision blocks of (3 specials + meta) + payloads."""
    return 2 * (3 + meta_len) + 2 + n_img + n_text + n_mask


def _meta_text(pixel_h: int, pixel_w: int) -> str:
    return f"{pixel_h}*{pixel_w}"


def build_document(
    image_tokens: np.ndarray,
    description: str,
    mask_tokens: np.ndarray,
    grid: tuple[int, int],
    layout: VocabLayout,
    sample_id: str = "",
    train_on_all_tokens: bool = False,
) -> MultimodalDocument:
    """Assemble the flat id sequence plus spans and the loss mask.

    loss_mask[p] marks input positions whose prediction target ids[p+1] is a
    mask-block token or that block's closing EOV / the EOS; when
    train_on_all_tokens is set, every position with a target is marked.
    """
    grid_h, grid_w = grid
    image_tokens = np.asarray(image_tokens, dtype=np.int64).ravel()
    mask_tokens = np.asarray(mask_tokens, dtype=np.int64).ravel()
    n_cells = grid_h * grid_w
    if image_tokens.size != n_cells or mask_tokens.size != n_cells:
        raise DocumentError(
            f"block sizes {image_tokens.size}/{mask_tokens.size} do not match grid {grid_h}x{grid_w}"
        )
    if image_tokens.size and not (
        (image_tokens >= layout.img_base) & (image_tokens < layout.mask_base)
    ).all():
        raise DocumentError("image block contains ids outside the image range")
    if mask_tokens.size and not (
        (mask_tokens >= layout.mask_base) & (mask_tokens < layout.vocab_size)
    ).all():
        raise DocumentError("mask block contains ids outside the mask range")

    meta = encode_text(_meta_text(grid_h * layout.patch_size, grid_w * layout.patch_size))
    text = encode_text(description)

    parts = []
    parts.append([layout.BOS])
    parts.append([layout.SOV]); parts.append(meta); parts.append([layout.SOT])
    img_start = 2 + len(meta) + 1
    parts.append(image_tokens)
    parts.append([layout.EOV])
    text_start = img_start + n_cells + 1
    parts.append(text)
    parts.append([layout.SOV]); parts.append(meta); parts.append([layout.SOT])
    mask_start = text_start + text.size + 2 + len(meta)
    parts.append(mask_tokens)
    parts.append([layout.EOV]); parts.append([layout.EOS])

    ids = np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])
    mask_end = mask_start + n_cells

    loss_mask = np.zeros(ids.size, dtype=bool)
    if train_on_all_tokens:
        loss_mask[: ids.size - 1] = True
    else:
        # targets: mask tokens, the closing EOV, and EOS -> inputs one earlier
        loss_mask[mask_start - 1 : mask_end + 1] = True

    return MultimodalDocument(
        ids=ids,
        image_span=(img_start, img_start + n_cells),
        text_span=(text_start, text_start + text.size),
        mask_span=(mask_start, mask_end),
        loss_mask=loss_mask,
        grid=(grid_h, grid_w),
        sample_id=sample_id,
    )


def _expect(ids: np.ndarray, pos: int, token: int, name: str) -> int:
    if pos >= ids.size or ids[pos] != token:
        raise DocumentError(f"expected {name} at position {pos}")
    return pos + 1


def _parse_vision_block(ids: np.ndarray, pos: int, layout: VocabLayout, lo: int, hi: int, what: str):
    """[SOV] {meta} [SOT] {tokens in [lo, hi)} [EOV] starting at pos."""
    pos = _expect(ids, pos, layout.SOV, "SOV")
    meta_start = pos
    while pos < ids.size and 0 <= ids[pos] < N_TEXT:
        pos += 1
    pos = _expect(ids, pos, layout.SOT, "SOT")
    meta = decode_text(ids[meta_start : pos - 1])
    try:
        h_str, w_str = meta.split("*")
        pix_h, pix_w = int(h_str), int(w_str)
    except ValueError:
        raise DocumentError(f"meta text {meta!r} at position {meta_start} is not 'H*W'") from None
    p = layout.patch_size
    if pix_h <= 0 or pix_w <= 0 or pix_h % p or pix_w % p:
        raise DocumentError(f"meta text resolution {meta!r} not divisible by patch size {p}")
    grid = (pix_h // p, pix_w // p)
    n = grid[0] * grid[1]
    start = pos
    if start + n > ids.size:
        raise DocumentError(f"{what} block truncated at position {ids.size}")
    block = ids[start : start + n]
    bad = np.nonzero((block < lo) | (block >= hi))[0]
    if bad.size:
        raise DocumentError(f"{what} block has out-of-range id at position {start + int(bad[0])}")
    pos = _expect(ids, start + n, layout.EOV, "EOV")
    return pos, (start, start + n), grid


def parse_document(ids: np.ndarray, layout: VocabLayout, sample_id: str = "",
                   train_on_all_tokens: bool = False) -> MultimodalDocument:
    """Inverse of build_document; raises DocumentError naming the offending position."""
    ids = np.asarray(ids, dtype=np.int64).ravel()
    pos = _expect(ids, 0, layout.BOS, "BOS")
    pos, image_span, grid_img = _parse_vision_block(
        ids, pos, layout, layout.img_base, layout.mask_base, "image")
    text_start = pos
    while pos < ids.size and 0 <= ids[pos] < N_TEXT:
        pos += 1
    text_span = (text_start, pos)
    pos, mask_span, grid_mask = _parse_vision_block(
        ids, pos, layout, layout.mask_base, layout.vocab_size, "mask")
    if grid_img != grid_mask:
        raise DocumentError(f"image grid {grid_img} and mask grid {grid_mask} differ")
    pos = _expect(ids, pos, layout.EOS, "EOS")
    if pos != ids.size:
        raise DocumentError(f"trailing ids after EOS at position {pos}")

    loss_mask = np.zeros(ids.size, dtype=bool)
    if train_on_all_tokens:
        loss_mask[: ids.size - 1] = True
    else:
        loss_mask[mask_span[0] - 1 : mask_span[1] + 1] = True
    return MultimodalDocument(
        ids=ids,
        image_span=image_span,
        text_span=text_span,
        mask_span=mask_span,
        loss_mask=loss_mask,
        grid=grid_img,
        sample_id=sample_id,
    )


def tokenize_sample(image: np.ndarray, mask: np.ndarray, description: str,
                    codec_cfg: CodecConfig, sample_id: str = "",
                    train_on_all_tokens: bool = False) -> MultimodalDocument:
    """Raw arrays + text -> full training document through the codec."""
    from ntpseg import codec

    layout = VocabLayout.from_codec(codec_cfg)
    img_tokens = layout.img_base + codec.encode_image(image, codec_cfg)
    mask_tokens = layout.mask_base + codec.encode_mask(mask, codec_cfg)
    grid = (image.shape[0] // codec_cfg.patch_size, image.shape[1] // codec_cfg.patch_size)
    return build_document(img_tokens, description, mask_tokens, grid, layout,
                          sample_id=sample_id, train_on_all_tokens=train_on_all_tokens)


def prompt_prefix(image: np.ndarray, description: str, codec_cfg: CodecConfig) -> np.ndarray:
    """Inference prompt: everything up to and including the mask block's [SOT]."""
    from ntpseg import codec

    layout = VocabLayout.from_codec(codec_cfg)
    img_tokens = layout.img_base + codec.encode_image(image, codec_cfg)
    meta = encode_text(_meta_text(image.shape[0], image.shape[1]))
    return np.concatenate([
        np.array([layout.BOS, layout.SOV], dtype=np.int64), meta,
        np.array([layout.SOT], dtype=np.int64), img_tokens,
        np.array([layout.EOV], dtype=np.int64), encode_text(description),
        np.array([layout.SOV], dtype=np.int64), meta,
        np.array([layout.SOT], dtype=np.int64),
    ])


# -- line-delimited record serialization --

def document_to_record(doc: MultimodalDocument) -> dict:
    return {
        "sample_id": doc.sample_id,
        "ids": [int(i) for i in doc.ids],
        "spans": {
            "image": list(doc.image_span),
            "text": list(doc.text_span),
            "mask": list(doc.mask_span),
        },
        "grid": list(doc.grid),
    }


def document_from_record(rec: dict, layout: VocabLayout,
                         train_on_all_tokens: bool = False) -> MultimodalDocument:
    doc = parse_document(np.asarray(rec["ids"], dtype=np.int64), layout,
                         sample_id=rec["sample_id"],
                         train_on_all_tokens=train_on_all_tokens)
    expect = {
        "image": list(doc.image_span),
        "text": list(doc.text_span),
        "mask": list(doc.mask_span),
    }
    if rec["spans"] != expect or list(doc.grid) != rec["grid"]:
        raise DocumentError(f"record spans/grid for {rec['sample_id']!r} disagree with its ids")
    return doc


def save_documents(path, docs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_record(doc), separators=(",", ":")) + "\n")


def load_documents(path, layout: VocabLayout, train_on_all_tokens: bool = False):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(document_from_record(json.loads(line), layout,
                                                train_on_all_tokens=train_on_all_tokens))
    return out
