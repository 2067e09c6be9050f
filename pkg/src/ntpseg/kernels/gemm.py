"""Matrix-multiply shim over numpy arrays.

torch.mm (oneDNN) is noticeably faster than the bundled OpenBLAS on the
shapes this package hits (tall-skinny times the vocabulary-sized embedding
table), so it is used as a plain BLAS when importable. No autograd, no torch
tensors escape this module; all model math stays hand-written numpy.
"""

import numpy as np

try:
    import torch

    torch.set_grad_enabled(False)
    _HAVE_TORCH = True
except ImportError:  # pragma: no cover
    _HAVE_TORCH = False


def set_threads(n: int) -> None:
    if _HAVE_TORCH:
        torch.set_num_threads(max(1, n))


if _HAVE_TORCH:

    def gemm(a: np.ndarray, b: np.ndarray, out: np.ndarray = None) -> np.ndarray:
        """out = a @ b (2-D, dtype-homogeneous)."""
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        if out is None:
            return torch.mm(ta, tb).numpy()
        torch.mm(ta, tb, out=torch.from_numpy(out))
        return out

    def gemm_acc(out: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """out += a @ b without a temporary."""
        torch.from_numpy(out).addmm_(torch.from_numpy(a), torch.from_numpy(b))
        return out

else:  # pragma: no cover

    def gemm(a, b, out=None):
        return np.matmul(a, b, out=out)

    def gemm_acc(out, a, b):
        out += a @ b
        return out
