"""Inference-time numeric kernels with two interchangeable backends.

Every kernel exists as a numba ``@njit`` function and as a pure-numpy
function with the same signature.  ``FLOWCAP_NUMBA`` picks the backend:
``0`` forces numpy, ``1`` forces numba, and unset (or ``auto``) dispatches per
call.  Numba wins by orders of magnitude on small batches where numpy's
per-call overhead dominates, while numpy's vectorized ``tanh`` wins on large
batches, so ``auto`` uses numba up to ``AUTO_ROWS`` rows.  See
``benchmarks/bench_kernels.py``.

MLPs are passed packed: ``sizes`` holds layer widths ``[n0, n1, ..., nL]`` and
``flat`` holds ``W0.ravel(), b0, W1.ravel(), b1, ...`` (bias-free layers carry
zeros).  ``act`` is 0 for tanh and 1 for relu, applied between layers only.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

TANH = 0
RELU = 1
ACTIVATIONS = {"tanh": TANH, "relu": RELU}


AUTO_ROWS = 64


def _env_choice() -> str:
    raw = os.environ.get("FLOWCAP_NUMBA", "auto").strip().lower()
    if raw in ("0", "false", "off", "no"):
        return "numpy"
    if raw in ("1", "true", "on", "yes"):
        return "numba"
    return "auto"


# ----------------------------------------------------------------- numpy path


def mlp_forward_np(x, flat, sizes, act):
    h = x
    off = 0
    nl = len(sizes) - 1
    for i in range(nl):
        n_in, n_out = sizes[i], sizes[i + 1]
        W = flat[off : off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        b = flat[off : off + n_out]
        off += n_out
        h = h @ W.T + b
        if i < nl - 1:
            h = np.tanh(h) if act == TANH else np.maximum(h, 0.0)
    return h


def mlp_rk4_np(x0, flat, sizes, act, t0, t1, steps):
    dt = (t1 - t0) / steps
    x = np.array(x0, dtype=np.float64)
    for _ in range(steps):
        k1 = mlp_forward_np(x, flat, sizes, act)
        k2 = mlp_forward_np(x + 0.5 * dt * k1, flat, sizes, act)
        k3 = mlp_forward_np(x + 0.5 * dt * k2, flat, sizes, act)
        k4 = mlp_forward_np(x + dt * k3, flat, sizes, act)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def residual_stack_forward_np(x, flat_all, offsets, sizes, act):
    h = np.array(x, dtype=np.float64)
    for j in range(len(offsets) - 1):
        h = h + mlp_forward_np(h, flat_all[offsets[j] : offsets[j + 1]], sizes, act)
    return h


def residual_stack_inverse_np(y, flat_all, offsets, sizes, act, tols, max_iters):
    """Blockwise Banach iteration ``x <- y - f(x)``, last block first.

    Returns ``(x, worst_iters, worst_step)``; ``worst_iters > max_iters``
    flags non-convergence.
    """
    x = np.array(y, dtype=np.float64)
    worst_iters = 0
    worst_step = 0.0
    nb = len(offsets) - 1
    for j in range(nb - 1, -1, -1):
        p = flat_all[offsets[j] : offsets[j + 1]]
        target = x.copy()
        z = target.copy()
        it = 0
        step = np.inf
        while it < max_iters:
            z_new = target - mlp_forward_np(z, p, sizes, act)
            step = np.max(np.abs(z_new - z)) if z.size else 0.0
            z = z_new
            it += 1
            floor = 4.0 * np.finfo(np.float64).eps * max(1.0, float(np.max(np.abs(z))) if z.size else 1.0)
            if step <= max(tols[j], floor):
                break
        else:
            it = max_iters + 1
        x = z
        worst_iters = max(worst_iters, it)
        worst_step = max(worst_step, float(step))
    return x, worst_iters, worst_step


def power_iteration_np(W, u, iters):
    """Top singular triple of ``W`` from start vector ``u`` (length rows)."""
    u = np.array(u, dtype=np.float64)
    v = np.zeros(W.shape[1])
    for _ in range(iters):
        v = W.T @ u
        nv = np.sqrt(v @ v)
        if nv == 0.0:
            return 0.0, u, v
        v = v / nv
        u = W @ v
        nu = np.sqrt(u @ u)
        if nu == 0.0:
            return 0.0, u, v
        u = u / nu
    sigma = float(u @ (W @ v))
    return sigma, u, v


# ----------------------------------------------------------------- numba path

if numba is not None:
    njit = numba.njit(cache=True, fastmath=False)

    # Sample-major kernels: each row runs through the whole computation in
    # small scratch buffers, so the hot loops never allocate.

    @numba.njit(cache=True, inline="always")
    def _mlp_row(xr, flat, sizes, act, a, b, out):
        """One row through the packed MLP; ``a``/``b`` are scratch of max width."""
        nl = sizes.shape[0] - 1
        n0 = sizes[0]
        for i in range(n0):
            a[i] = xr[i]
        off = 0
        for li in range(nl):
            n_in = sizes[li]
            n_out = sizes[li + 1]
            bias = off + n_in * n_out
            last = li == nl - 1
            for o in range(n_out):
                acc = flat[bias + o]
                base = off + o * n_in
                for i in range(n_in):
                    acc += flat[base + i] * a[i]
                if not last:
                    if act == 0:
                        acc = np.tanh(acc)
                    elif acc < 0.0:
                        acc = 0.0
                b[o] = acc
            off = bias + n_out
            for o in range(n_out):
                a[o] = b[o]
        for o in range(sizes[nl]):
            out[o] = a[o]

    @njit
    def mlp_forward_nb(x, flat, sizes, act):
        n = x.shape[0]
        w = sizes.max()
        out = np.empty((n, sizes[sizes.shape[0] - 1]))
        a = np.empty(w)
        b = np.empty(w)
        for s in range(n):
            _mlp_row(x[s], flat, sizes, act, a, b, out[s])
        return out

    @njit
    def mlp_rk4_nb(x0, flat, sizes, act, t0, t1, steps):
        dt = (t1 - t0) / steps
        n, q = x0.shape
        w = sizes.max()
        out = np.empty((n, q))
        a = np.empty(w)
        b = np.empty(w)
        x = np.empty(q)
        tmp = np.empty(q)
        k1 = np.empty(q)
        k2 = np.empty(q)
        k3 = np.empty(q)
        k4 = np.empty(q)
        for s in range(n):
            for c in range(q):
                x[c] = x0[s, c]
            for _ in range(steps):
                _mlp_row(x, flat, sizes, act, a, b, k1)
                for c in range(q):
                    tmp[c] = x[c] + 0.5 * dt * k1[c]
                _mlp_row(tmp, flat, sizes, act, a, b, k2)
                for c in range(q):
                    tmp[c] = x[c] + 0.5 * dt * k2[c]
                _mlp_row(tmp, flat, sizes, act, a, b, k3)
                for c in range(q):
                    tmp[c] = x[c] + dt * k3[c]
                _mlp_row(tmp, flat, sizes, act, a, b, k4)
                for c in range(q):
                    x[c] = x[c] + (dt / 6.0) * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c])
            for c in range(q):
                out[s, c] = x[c]
        return out

    @njit
    def residual_stack_forward_nb(x, flat_all, offsets, sizes, act):
        n, q = x.shape
        w = sizes.max()
        out = np.empty((n, q))
        a = np.empty(w)
        b = np.empty(w)
        h = np.empty(q)
        f = np.empty(q)
        for s in range(n):
            for c in range(q):
                h[c] = x[s, c]
            for j in range(offsets.shape[0] - 1):
                _mlp_row(h, flat_all[offsets[j] : offsets[j + 1]], sizes, act, a, b, f)
                for c in range(q):
                    h[c] += f[c]
            for c in range(q):
                out[s, c] = h[c]
        return out

    @njit
    def residual_stack_inverse_nb(y, flat_all, offsets, sizes, act, tols, max_iters):
        # per-sample iteration; each row stops as soon as its own step converges
        eps = np.finfo(np.float64).eps
        n, q = y.shape
        x = y.copy()
        w = sizes.max()
        a = np.empty(w)
        b = np.empty(w)
        row = np.empty(q)
        target = np.empty(q)
        fz = np.empty(q)
        worst_iters = 0
        worst_step = 0.0
        nb = offsets.shape[0] - 1
        for j in range(nb - 1, -1, -1):
            p = flat_all[offsets[j] : offsets[j + 1]]
            for s in range(n):
                for c in range(q):
                    row[c] = x[s, c]
                    target[c] = x[s, c]
                it = 0
                step = np.inf
                converged = False
                while it < max_iters:
                    _mlp_row(row, p, sizes, act, a, b, fz)
                    step = 0.0
                    big = 1.0
                    for c in range(q):
                        znew = target[c] - fz[c]
                        d = abs(znew - row[c])
                        if d > step:
                            step = d
                        row[c] = znew
                        if abs(znew) > big:
                            big = abs(znew)
                    it += 1
                    if step <= max(tols[j], 4.0 * eps * big):
                        converged = True
                        break
                if not converged:
                    it = max_iters + 1
                for c in range(q):
                    x[s, c] = row[c]
                if it > worst_iters:
                    worst_iters = it
                if step > worst_step:
                    worst_step = step
        return x, worst_iters, worst_step

    @njit
    def power_iteration_nb(W, u, iters):
        u = u.copy()
        v = np.zeros(W.shape[1])
        for _ in range(iters):
            v = W.T @ u
            nv = np.sqrt(np.dot(v, v))
            if nv == 0.0:
                return 0.0, u, v
            v = v / nv
            u = W @ v
            nu = np.sqrt(np.dot(u, u))
            if nu == 0.0:
                return 0.0, u, v
            u = u / nu
        sigma = np.dot(u, W @ v)
        return sigma, u, v


NUMPY = SimpleNamespace(
    name="numpy",
    mlp_forward=mlp_forward_np,
    mlp_rk4=mlp_rk4_np,
    residual_stack_forward=residual_stack_forward_np,
    residual_stack_inverse=residual_stack_inverse_np,
    power_iteration=power_iteration_np,
)

if numba is not None:
    NUMBA = SimpleNamespace(
        name="numba",
        mlp_forward=mlp_forward_nb,
        mlp_rk4=mlp_rk4_nb,
        residual_stack_forward=residual_stack_forward_nb,
        residual_stack_inverse=residual_stack_inverse_nb,
        power_iteration=power_iteration_nb,
    )
else:  # pragma: no cover
    NUMBA = None


def _auto(kernel: str):
    fast, wide = getattr(NUMBA, kernel), getattr(NUMPY, kernel)

    def call(x, *args):
        return (fast if x.shape[0] <= AUTO_ROWS else wide)(x, *args)

    call.__name__ = kernel
    return call


if NUMBA is not None:
    AUTO = SimpleNamespace(
        name="auto",
        mlp_forward=_auto("mlp_forward"),
        mlp_rk4=_auto("mlp_rk4"),
        residual_stack_forward=_auto("residual_stack_forward"),
        residual_stack_inverse=_auto("residual_stack_inverse"),
        power_iteration=NUMBA.power_iteration,
    )
else:  # pragma: no cover
    AUTO = NUMPY


def backend(name: str | None = None) -> SimpleNamespace:
    """Kernel namespace by name (``numpy``, ``numba``, ``auto``); ``None`` follows ``FLOWCAP_NUMBA``."""
    if name is None:
        name = _env_choice()
    if name == "auto":
        return AUTO
    if name == "numba":
        if NUMBA is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        return NUMBA
    if name == "numpy":
        return NUMPY
    raise ValueError(f"unknown kernel backend {name!r}")


def pack_sizes(sizes) -> np.ndarray:
    return np.asarray(sizes, dtype=np.int64)
