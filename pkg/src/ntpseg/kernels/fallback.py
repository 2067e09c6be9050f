"""Numpy implementation of the fused focal-softmax kernel.

Contract (shared with the compiled twin in _fused.pyx):

    softmax_focal_stats(Z, targets, alpha, gamma, scale, want_argmax)
        -> loss, logp, argmax | None, factor, tscale

Z (R, V) is replaced IN PLACE by exp(z - rowmax). The per-row focal loss is
loss[r] = -alpha*(1-p)^gamma*log p with p the target softmax probability.
factor and tscale fold the loss gradient into the caller's GEMMs: with
EXP = exp(z - m), the gradient dL/dz = c*(onehot - softmax) satisfies

    dL/dz[r] = factor[r] * EXP[r] + tscale[r] * onehot(target_r),
    factor[r] = -scale[r]*c_r/sumexp_r,  tscale[r] = scale[r]*c_r,

so dG = factor * (EXP @ E) + tscale * E[targets] and
dE += EXP^T @ (factor * G) + scatter(tscale * G at targets) without ever
materializing the transformed matrix.

Rows are processed in cache-sized blocks; the compiled twin additionally
fuses subtract+exp+sum into one pass with a vectorized polynomial exp.
"""

import numpy as np

_BLOCK_ROWS = 64


def _focal_coeff(p, lnp, onem, alpha, gamma, dtype):
    """c = dL/d(log p) = p * dL/dp for the focal loss."""
    if gamma == 0.0:
        return np.full(p.shape, -alpha, dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = alpha * gamma * onem ** (gamma - 1.0) * p * lnp - alpha * onem**gamma
    return np.where(onem == 0.0, 0.0, c).astype(dtype, copy=False)


def softmax_focal_stats(Z, targets, alpha, gamma, scale=None, want_argmax=False):
    alpha = float(alpha)
    gamma = float(gamma)
    R = Z.shape[0]
    dtype = Z.dtype
    loss = np.empty(R, dtype)
    logp = np.empty(R, dtype)
    factor = np.empty(R, dtype)
    tscale = np.empty(R, dtype)
    amax = np.empty(R, np.int64) if want_argmax else None
    for lo in range(0, R, _BLOCK_ROWS):
        hi = min(lo + _BLOCK_ROWS, R)
        B = Z[lo:hi]
        t = targets[lo:hi]
        rows = np.arange(hi - lo)
        if want_argmax:
            amax[lo:hi] = B.argmax(axis=1)
            m = B[rows, amax[lo:hi]]
        else:
            m = B.max(axis=1)
        zt = B[rows, t]
        np.subtract(B, m[:, None], out=B)
        np.exp(B, out=B)
        sumexp = B.sum(axis=1)
        lnp_b = (zt - m) - np.log(sumexp)
        p = np.exp(lnp_b)
        onem = np.maximum(1.0 - p, 0.0)
        loss[lo:hi] = -alpha * onem**gamma * lnp_b
        logp[lo:hi] = lnp_b
        c = _focal_coeff(p, lnp_b, onem, alpha, gamma, dtype)
        sc = (scale[lo:hi] * c) if scale is not None else c
        tscale[lo:hi] = sc
        factor[lo:hi] = -sc / sumexp
    return loss, logp, amax, factor, tscale
