"""Benchmark the compiled fused kernel against the numpy fallback.

Times the full streamed head-loss step (logit GEMM + fused softmax/focal
transform + gradient GEMMs) with each kernel implementation on identical
inputs, plus the kernel-only passes, and reports the GEMM backend in use.
"""

from __future__ import annotations

import time

import numpy as np

from ntpseg.kernels import HAVE_EXT, fallback, gemm, gemm_acc

try:
    from ntpseg.kernels import _fused
except ImportError:
    _fused = None


def _time(fn, reps: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def run_bench(rows: int = 2048, vocab: int = 65862, dim: int = 128, reps: int = 3) -> str:
    rng = np.random.default_rng(0)
    G = rng.standard_normal((rows, dim)).astype(np.float32)
    E = (rng.standard_normal((vocab, dim)) * 0.02).astype(np.float32)
    targets = rng.integers(0, vocab, rows)
    scale = np.full(rows, 1.0 / rows, np.float32)
    Z = np.empty((rows, vocab), np.float32)
    dG = np.empty_like(G)
    dE = np.zeros_like(E)

    impls = {"numpy ": fallback}
    if _fused is not None:
        impls["ext   "] = _fused

    lines = [f"rows={rows} vocab={vocab} dim={dim} reps={reps} "
             f"(compiled extension {'present' if HAVE_EXT else 'absent'})"]

    t_gemm = _time(lambda: gemm(G, E.T, out=Z), reps)
    flops = 2.0 * rows * vocab * dim
    lines.append(f"logit gemm      {t_gemm * 1e3:8.1f} ms   {flops / t_gemm / 1e9:6.1f} GFLOPS")

    for name, impl in impls.items():
        def kernel_only(impl=impl):
            gemm(G, E.T, out=Z)
            impl.softmax_focal_grad(Z, targets, 0.25, 2.0, scale, want_argmax=True)
        t = _time(kernel_only, reps)
        lines.append(f"{name} gemm+kernel {t * 1e3:8.1f} ms   (kernel {1e3 * (t - t_gemm):6.1f} ms)")

    for name, impl in impls.items():
        def full_step(impl=impl):
            gemm(G, E.T, out=Z)
            impl.softmax_focal_grad(Z, targets, 0.25, 2.0, scale, want_argmax=True)
            gemm(Z, E, out=dG)
            gemm_acc(dE, Z.T, G)
        t = _time(full_step, reps)
        lines.append(f"{name} full step   {t * 1e3:8.1f} ms   {3 * flops / t / 1e9:6.1f} GFLOPS effective")
    return "\n".join(lines)
