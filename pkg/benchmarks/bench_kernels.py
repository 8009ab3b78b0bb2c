"""Compare the numba and numpy im2col/col2im kernels, plus one search epoch per backend.

    python benchmarks/bench_kernels.py [--repeat 50]

The end-to-end row launches a subprocess per backend, because the backend is
chosen once at import time from OPSEARCH_DISABLE_NUMBA.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from opsearch import _kernels as K

SHAPES = [
    # (n, c, h, w, k, stride, pad)
    (32, 1, 8, 8, 3, 1, 1),
    (32, 16, 8, 8, 3, 1, 1),
    (32, 16, 4, 4, 3, 1, 1),
    (128, 8, 16, 16, 3, 1, 1),
]

EPOCH_SNIPPET = """
import time
from opsearch.data import load_dataset
from opsearch.network import mini_squeeze
from opsearch.search import SearchConfig, SearchRun
from opsearch._kernels import BACKEND
d = load_dataset("builtin:digits", seed=0)
run = SearchRun(mini_squeeze(d.sample_shape, d.classes), d, SearchConfig(epochs=1))
run.train("warmup", 1)
t = time.perf_counter()
run.train("timed", 1)
print(BACKEND, time.perf_counter() - t)
"""


def bench(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is unavailable or disabled; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'op':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.normal(size=(n, c, h, w))
        cols_np = K.im2col_numpy(x, k, k, s, p)
        cols_nb = K.im2col_numba(x, k, k, s, p)
        assert np.array_equal(cols_np, cols_nb)
        back_np = K.col2im_numpy(cols_np, x.shape, k, k, s, p)
        back_nb = K.col2im_numba(cols_np, x.shape, k, k, s, p)
        assert np.allclose(back_np, back_nb, rtol=0, atol=1e-12)
        tag = f"{n}x{c}x{h}x{w} k{k}"
        for op, f_np, f_nb in (
            ("im2col", lambda: K.im2col_numpy(x, k, k, s, p), lambda: K.im2col_numba(x, k, k, s, p)),
            ("col2im", lambda: K.col2im_numpy(cols_np, x.shape, k, k, s, p),
             lambda: K.col2im_numba(cols_np, x.shape, k, k, s, p)),
        ):
            a, b = bench(f_np, args.repeat), bench(f_nb, args.repeat)
            print(f"{tag:<28}{op:<8}{a:>10.3f}{b:>10.3f}{a / b:>8.2f}x")

    if args.skip_epoch:
        return
    print("\none mini-squeeze search epoch on 8x8 digits:")
    for flag in ("1", "0"):
        env = dict(os.environ, OPSEARCH_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"  {backend:<6} {float(seconds):.2f} s")


if __name__ == "__main__":
    main()
