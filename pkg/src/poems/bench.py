"""Timing harness: batched sparse decoder against the feature-by-feature loop,
and the numba kernel against the numpy batch path."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import model as M
from ._accel import NUMBA_AVAILABLE, backend_name
from .errors import ContractError
from .numerics import init_mlp, mlp_backward, mlp_forward


@dataclass
class Timing:
    label: str
    seconds: List[float]

    @property
    def median(self) -> float:
        return float(np.median(self.seconds))


@dataclass
class DecoderBench:
    n: int
    d: int
    k: int
    hidden: int
    repeats: int
    backend: str
    vectorized: Timing
    reference: Timing
    max_deviation: float
    extra: Dict[str, Timing]

    @property
    def speedup(self) -> float:
        return self.reference.median / self.vectorized.median

    def lines(self) -> List[str]:
        out = [
            f"shape N={self.n} D={self.d} K={self.k} H={self.hidden} repeats={self.repeats} backend={self.backend}",
            f"reference_median_s={self.reference.median!r}",
            f"vectorized_median_s={self.vectorized.median!r}",
            f"speedup={self.speedup!r}",
            f"max_abs_deviation={self.max_deviation!r}",
        ]
        for t in self.extra.values():
            out.append(f"{t.label}_median_s={t.median!r}")
        return out


def _time(fn: Callable[[], object], repeats: int, label: str) -> Timing:
    fn()  # warm-up: jit compilation, allocator, caches
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return Timing(label, out)


def decoder_inputs(n: int, d: int, k: int, hidden: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, k))
    W = rng.uniform(-0.1, 0.1, (d, k))
    dec = M.DecoderParams(init_mlp([k, hidden, 1], rng), rng.standard_normal(d) * 0.1)
    return z, W, dec


def bench_decoder(n=256, d=1000, k=32, hidden=64, repeats=5, seed=0, compare_backends=True) -> DecoderBench:
    """Median wall time of ``sparse_decode`` and ``sparse_decode_reference`` on
    identical inputs, with their element-wise maximum deviation."""
    if min(n, d, k, hidden) <= 0 or repeats < 1:
        raise ContractError("benchmark sizes and repeats must be positive")
    z, W, dec = decoder_inputs(n, d, k, hidden, seed)
    vec = M.sparse_decode(z, W, dec)
    ref = M.sparse_decode_reference(z, W, dec)
    dev = float(np.max(np.abs(vec - ref)))
    t_vec = _time(lambda: M.sparse_decode(z, W, dec), repeats, "vectorized")
    t_ref = _time(lambda: M.sparse_decode_reference(z, W, dec), repeats, "reference")
    extra: Dict[str, Timing] = {}
    if compare_backends:
        extra["numpy_batch"] = _time(lambda: M.sparse_decode(z, W, dec, use_kernel=False), repeats, "numpy_batch")
        if NUMBA_AVAILABLE:
            extra["numba_kernel"] = _time(lambda: M.sparse_decode(z, W, dec, use_kernel=True), repeats,
                                          "numba_kernel")
        # forward plus backward, as in one training step of the decoder
        g = np.random.default_rng(seed + 1).standard_normal((n, d))

        def step(use):
            _, cache = M.sparse_decode_forward(z, W, dec, use_kernel=use)
            M.sparse_decode_backward(dec, cache, g)

        def step_reference():
            for j in range(d):
                col, cache = mlp_forward(dec.trunk, z * W[j])
                mlp_backward(dec.trunk, cache, g[:, j:j + 1])

        extra["train_step_reference"] = _time(step_reference, repeats, "train_step_reference")
        extra["train_step_numpy"] = _time(lambda: step(False), repeats, "train_step_numpy")
        if NUMBA_AVAILABLE:
            extra["train_step_numba"] = _time(lambda: step(True), repeats, "train_step_numba")
    return DecoderBench(n, d, k, hidden, repeats, backend_name(), t_vec, t_ref, dev, extra)
