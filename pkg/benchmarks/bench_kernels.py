"""Compare the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints best-of-N wall time per kernel and backend, plus the max absolute
difference between the two backends' outputs.  The ``auto`` backend uses
numba up to ``AUTO_ROWS`` rows and numpy above, following these numbers.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from flowcap import _kernels as K


def _pack(rng, sizes):
    parts = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        parts += [rng.uniform(-0.3, 0.3, a * b), rng.uniform(-0.3, 0.3, b)]
    return np.concatenate(parts)


def cases(rng, rows):
    sizes = K.pack_sizes([2, 16, 2])
    flat = _pack(rng, sizes)
    lin = K.pack_sizes([2, 2])
    flats = [_pack(rng, lin) * 0.5 for _ in range(5)]
    flat_all = np.concatenate(flats)
    offsets = np.cumsum([0] + [f.size for f in flats]).astype(np.int64)
    tols = np.full(5, 1e-10)
    for n in rows:
        x = rng.uniform(-1, 1, (n, 2))
        y = rng.uniform(-10, 10, (n, 2))
        yield f"mlp_forward 2-16-2, n={n}", lambda B, x=x: B.mlp_forward(x, flat, sizes, K.TANH)
        yield f"mlp_rk4 2-16-2, n={n}, 100 steps", lambda B, x=x: B.mlp_rk4(x, flat, sizes, K.TANH, 0.0, 1.0, 100)
        yield f"residual_stack_forward 5 blocks, n={n}", lambda B, y=y: B.residual_stack_forward(y, flat_all, offsets, lin, K.TANH)
        yield f"residual_stack_inverse 5 blocks, n={n}", lambda B, y=y: B.residual_stack_inverse(y, flat_all, offsets, lin, K.TANH, tols, 200)[0]

    W = rng.normal(size=(64, 64))
    u = rng.normal(size=64)
    yield "power_iteration 64x64, 50 iters", lambda B: np.array([B.power_iteration(W, u, 50)[0]])


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rows", type=int, nargs="+", default=[1, 16, 2000], help="batch sizes to time")
    args = ap.parse_args(argv)
    if K.NUMBA is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<42} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for label, run in cases(rng, args.rows):
        run(K.NUMBA)  # compile outside the timing
        a, b = run(K.NUMPY), run(K.NUMBA)
        t_np = best_of(lambda: run(K.NUMPY), args.repeat)
        t_nb = best_of(lambda: run(K.NUMBA), args.repeat)
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        print(f"{label:<42} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.1f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
