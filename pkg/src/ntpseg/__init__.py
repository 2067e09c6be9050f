"""Referring image segmentation as autoregressive next-token mask prediction.

Images, text descriptions, and binary segmentation masks are tokenized into
one discrete sequence; a small decoder-only transformer is trained with
focal next-token, next-k-token, token-level contrastive, and hard-error-token
losses; masks are generated with grammar-constrained beam search and scored
with Dice / mIoU.
"""

from ntpseg.codec import CodecConfig, decode_mask, encode_image, encode_mask
from ntpseg.sequence import MultimodalDocument, VocabLayout, build_document, encode_text, parse_document

__version__ = "0.1.0"

__all__ = [
    "CodecConfig",
    "MultimodalDocument",
    "VocabLayout",
    "build_document",
    "decode_mask",
    "encode_image",
    "encode_mask",
    "encode_text",
    "parse_document",
    "__version__",
]
