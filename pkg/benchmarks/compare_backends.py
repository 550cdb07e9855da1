"""Time the hot kernels under the numba and the numpy backend.

The backend is fixed at import time by POEMS_DISABLE_NUMBA, so each backend
runs in its own child process. Usage::

    python benchmarks/compare_backends.py [--repeats 7]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _median_time(fn, repeats):
    fn()  # compile / warm caches
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return float(np.median(out))


def worker(repeats):
    from poems import kernels
    from poems import model as M
    from poems._accel import backend_name
    from poems.bench import decoder_inputs
    from poems.evaluation import kmeans_pp_init

    z, W, dec = decoder_inputs(256, 1000, 32, 64, seed=0)
    g = np.random.default_rng(1).standard_normal((256, 1000))

    def decode_step():
        _, cache = M.sparse_decode_forward(z, W, dec)
        M.sparse_decode_backward(dec, cache, g)

    rng = np.random.default_rng(2)
    X = rng.standard_normal((2000, 32))
    C0 = kmeans_pp_init(X, 5, np.random.default_rng(3))
    times = {
        "decode_forward": _median_time(lambda: M.sparse_decode(z, W, dec), repeats),
        "decode_forward_backward": _median_time(decode_step, repeats),
        "sq_distances_2000x500": _median_time(lambda: kernels.sq_distances(X, X[:500]), repeats),
        "lloyd_2000x32_k5": _median_time(lambda: kernels.lloyd(X, C0.copy(), 300), repeats),
    }
    print(json.dumps({"backend": backend_name(), "times": times}))


def run_child(disable, repeats):
    env = dict(os.environ, POEMS_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, __file__, "--worker", "--repeats", str(repeats)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeats)
        return
    nb = run_child(False, args.repeats)
    npy = run_child(True, args.repeats)
    print(f"{'kernel':<26}{nb['backend'] + ' ms':>12}{npy['backend'] + ' ms':>12}{'ratio':>8}")
    for name, t_nb in nb["times"].items():
        t_np = npy["times"][name]
        print(f"{name:<26}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>8.2f}")


if __name__ == "__main__":
    main()
