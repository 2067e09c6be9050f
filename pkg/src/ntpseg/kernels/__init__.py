"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

The only compute-heavy primitive outside BLAS is the fused softmax + focal
transform over vocabulary-sized logit rows. The compiled version keeps each
row resident in cache across its passes; the numpy fallback computes the
same quantities with whole-chunk array ops. Both share one contract and are
exchangeable (see tests and the `ntpseg bench` subcommand).

Set NTPSEG_FORCE_FALLBACK=1 to ignore the extension.
"""

import os

from ntpseg.kernels import fallback as _fb
from ntpseg.kernels.gemm import gemm, gemm_acc, set_threads

_ext = None
if not os.environ.get("NTPSEG_FORCE_FALLBACK"):
    try:
        from ntpseg.kernels import _fused as _ext
    except ImportError:
        _ext = None

HAVE_EXT = _ext is not None
ACTIVE = "ext" if HAVE_EXT else "numpy"


def softmax_focal_grad(Z, targets, alpha, gamma, scale, want_argmax=False):
    """Fused focal next-token loss over full-vocabulary logit rows.

    Z (R, V) is transformed IN PLACE into the loss gradient wrt the logits:
    scale[r] * c_r * (softmax(z_r) - onehot(target_r)), with c_r the focal
    chain coefficient. Returns (loss_rows, logp_rows, argmax_rows | None):
    per-row unscaled focal values -alpha*(1-p)^gamma*log(p), log p of the
    target, and (optionally) the row argmax of the original logits.
    """
    if HAVE_EXT:
        return _ext.softmax_focal_grad(Z, targets, alpha, gamma, scale, want_argmax)
    return _fb.softmax_focal_grad(Z, targets, alpha, gamma, scale, want_argmax)


def softmax_focal_loss(Z, targets, alpha, gamma, want_argmax=False):
    """Loss-only variant: Z is left untouched."""
    if HAVE_EXT:
        return _ext.softmax_focal_loss(Z, targets, alpha, gamma, want_argmax)
    return _fb.softmax_focal_loss(Z, targets, alpha, gamma, want_argmax)


__all__ = [
    "ACTIVE",
    "HAVE_EXT",
    "gemm",
    "gemm_acc",
    "set_threads",
    "softmax_focal_grad",
    "softmax_focal_loss",
]
