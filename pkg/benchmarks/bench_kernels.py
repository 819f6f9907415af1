"""Timing comparison of the numpy and numba kernel backends.

Runs each hot kernel at desk-profile shapes plus one end-to-end smoothed
prediction, and prints a table of medians. This is the measurement behind
the choice of numpy as the default backend: at these model sizes the conv
kernels reduce to small GEMMs where BLAS wins, and numba additionally
pays a jit warmup on first call (excluded here, charged in practice).

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import statistics
import time

import numpy as np

from chunksmooth import kernels, neural, smoothing
from chunksmooth.ablation import AblationConfig
from chunksmooth.smoothing import DetectorSpec

DESK = neural.PROFILES["desk"]


def _time(fn, repeats):
    fn()  # warmup: jit compilation, cache effects
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _cases():
    rng = np.random.default_rng(0)
    f, e, w, s = DESK.n_filters, DESK.emb_dim, DESK.window, DESK.stride
    wa, wb = rng.standard_normal((2, f, e, w), dtype=np.float32)
    ba, bb = rng.standard_normal((2, f), dtype=np.float32)

    # one SCA chunk of a 32 KiB file at p=0.05, and the whole file as NS sees it
    chunk = rng.standard_normal((1639, e), dtype=np.float32)
    full = rng.standard_normal((32768, e), dtype=np.float32)
    views = rng.standard_normal((100, 1639, e), dtype=np.float32)

    yield "conv_pair chunk (1639 tokens)", lambda: kernels.conv_pair(chunk, wa, ba, wb, bb, s)
    yield "conv_pair file (32768 tokens)", lambda: kernels.conv_pair(full, wa, ba, wb, bb, s)
    yield "conv_pair_many (100 x 1639)", lambda: kernels.conv_pair_many(views, wa, ba, wb, bb, s)

    j = (full.shape[0] - w) // s + 1
    best_j = rng.integers(0, j, size=f).astype(np.int64)
    d_a, d_b = rng.standard_normal((2, f), dtype=np.float32)
    yield "conv_backward file", lambda: kernels.conv_backward(full, wa, wb, best_j, d_a, d_b, s)

    tokens = rng.integers(0, 257, size=32768, dtype=np.int32)
    d_x = rng.standard_normal((32768, e), dtype=np.float32)
    yield "embedding_scatter file", lambda: kernels.embedding_scatter(
        tokens, d_x, np.zeros((257, e), dtype=np.float32)
    )

    data = rng.integers(0, 256, size=65536, dtype=np.uint8)
    data[rng.random(65536) < 0.3] = 0
    yield "zero_runs (64 KiB, 30% zeros)", lambda: kernels.zero_runs(data)

    params = neural.init_params(DESK, seed=1)
    spec = DetectorSpec(kind="sca", ablation=AblationConfig(scheme="sca", p=0.05, n_views=100))
    payload = rng.integers(0, 256, size=32768, dtype=np.uint8).tobytes()
    yield "predict_smoothed (L=100, 32 KiB)", lambda: smoothing.predict_smoothed(
        params, spec, payload
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    if not kernels.HAVE_NUMBA:
        print("numba not installed; timing the numpy backend only\n")

    results = {}
    for backend in backends:
        kernels.set_backend(backend)
        for name, fn in _cases():
            results.setdefault(name, {})[backend] = _time(fn, args.repeats)

    width = max(len(n) for n in results)
    header = f"{'case'.ljust(width)}  " + "  ".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"  {'numpy/numba':>12}"
    print(header)
    print("-" * len(header))
    for name, by_backend in results.items():
        row = name.ljust(width) + "  "
        row += "  ".join(f"{by_backend[b] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) == 2:
            row += f"  {by_backend['numpy'] / by_backend['numba']:>12.2f}"
        print(row)


if __name__ == "__main__":
    main()
