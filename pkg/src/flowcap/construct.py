"""Closed-form constructions around a p-dimensional homeomorphism ``h``.

* :func:`embed_path` / :func:`oracle_field` / :func:`integrate_embedding`:
  a flow on ``R^{2p}`` whose time-1 map sends ``[x, 0]`` to ``[h(x), 0]``.
  Paths are ``y(x, s) = [x + f(s) d, g(s) d]`` with ``d = h(x) - x``,
  ``f(s) = (1 - cos(pi s)) / 2`` and ``g(s) = 1 - cos(2 pi s)``.
* :func:`build_iresnet_for`: an explicit residual stack on ``R^{2p}`` with
  contractive residuals that realizes ``h`` on ``[x, 0]``.
* :func:`cap_field`: the ``[0, F(x)]`` field that copies a function value into
  extra channels, read back by a linear cap.
* :func:`counterexample_suite`: maps that fix a separating set while moving
  points across it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .autodiff import Tensor, columns, concat, make_rng
from .iresnet import FunctionBlock, IResNet, MlpBlock, lipschitz_ratios
from .mlp import Mlp
from .odenet import OdeField, rk4

__all__ = [
    "OffImageError",
    "Homeomorphism",
    "REGISTRY",
    "get_homeomorphism",
    "EmbeddingOracle",
    "bump_f",
    "bump_g",
    "bump_f_prime",
    "bump_g_prime",
    "embed_path",
    "oracle_field",
    "integrate_embedding",
    "ConstructedIResNet",
    "build_iresnet_for",
    "AuditReport",
    "residual_lipschitz_audit",
    "cap_field",
    "linear_cap",
    "CounterexampleMap",
    "counterexample_suite",
]


class OffImageError(ValueError):
    """A state is not (numerically) on any embedded path at the given time."""


# ------------------------------------------------------------------ homeomorphisms


@dataclass
class Homeomorphism:
    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    k: float
    box: np.ndarray
    contains: Callable[[np.ndarray], np.ndarray] | None = None
    k_inv: float | None = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(-1, 2)
        if self.k_inv is None:
            self.k_inv = self.k

    @property
    def p(self) -> int:
        return self.box.shape[0]

    def __call__(self, x):
        return self.forward(np.asarray(x, dtype=np.float64))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points uniform over the domain (box, then rejection)."""
        lo, hi = self.box[:, 0], self.box[:, 1]
        out = np.empty((0, self.p))
        while out.shape[0] < n:
            cand = rng.uniform(lo, hi, size=(max(2 * (n - out.shape[0]), 16), self.p))
            if self.contains is not None:
                cand = cand[self.contains(cand)]
            out = np.concatenate([out, cand])
        return out[:n]

    def verify(self, n: int = 1000, seed: int = 0, tol: float = 1e-9) -> dict:
        rng = make_rng(seed)
        x = self.sample(n, rng)
        xb = self.sample(n, rng)
        rt = float(np.max(np.abs(self.inverse(self.forward(x)) - x)))
        lip = float(np.max(lipschitz_ratios(self.forward, x, xb)))
        return {"roundtrip": rt, "lipschitz": lip, "ok": rt <= tol and lip <= self.k * (1 + 1e-12)}


def _identity(x):
    return np.array(x, dtype=np.float64)


def _negate(x):
    return -np.asarray(x, dtype=np.float64)


def _swap(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., ::-1].copy()


def _radial_swap(x):
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    r = np.maximum(r, 1e-300)
    return x * ((2.0 - r) / r)


def _annulus(lo, hi):
    def contains(x):
        r = np.linalg.norm(x, axis=-1)
        return (r >= lo) & (r <= hi)

    return contains


def _registry() -> dict[str, Callable[[], Homeomorphism]]:
    return {
        "identity": lambda: Homeomorphism("identity", _identity, _identity, 1.0, [[-10.0, 10.0]]),
        "negation": lambda: Homeomorphism("negation", _negate, _negate, 1.0, [[-10.0, 10.0]]),
        "swap2d": lambda: Homeomorphism("swap2d", _swap, _swap, 1.0, [[-3.0, 3.0], [-3.0, 3.0]]),
        # r -> 2 - r on the annulus 0.5 <= r <= 1.5: fixes the unit circle,
        # exchanges the inner and outer rings; tangential stretch peaks at 3.
        "radial-swap": lambda: Homeomorphism(
            "radial-swap", _radial_swap, _radial_swap, 3.0, [[-1.5, 1.5], [-1.5, 1.5]], _annulus(0.5, 1.5)
        ),
    }


REGISTRY = _registry()


def get_homeomorphism(name: str) -> Homeomorphism:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown homeomorphism {name!r}; registered: {', '.join(sorted(REGISTRY))}") from None


# ------------------------------------------------------------------ embedding flow


def bump_f(s):
    return 0.5 * (1.0 - np.cos(np.pi * s))


def bump_g(s):
    return 1.0 - np.cos(2.0 * np.pi * s)


def bump_f_prime(s):
    return 0.5 * np.pi * np.sin(np.pi * s)


def bump_g_prime(s):
    return 2.0 * np.pi * np.sin(2.0 * np.pi * s)


@dataclass
class EmbeddingOracle:
    """Analytic embedding of ``h`` into a flow on ``R^{2p}``.

    ``edge`` is the fraction of each unit time interval, at both ends, where
    the displacement is recovered by fixed-point iteration on the leading block
    instead of dividing the trailing block by the small ``g(s)``.
    """

    h: Homeomorphism
    edge: float = dc_field(default=-1.0)
    max_fp_iters: int = 200

    def __post_init__(self):
        if self.edge < 0:
            # contraction factor of the edge iterations stays <= 1/2
            lip = 1.0 + max(self.h.k, self.h.k_inv)
            target = 0.5 / lip
            s = math.acos(1.0 - 2.0 * target) / math.pi
            self.edge = min(0.2, s)

    @property
    def p(self) -> int:
        return self.h.p

    def delta(self, x):
        return self.h(x) - np.asarray(x, dtype=np.float64)


def _iterate_h(h: Homeomorphism, x, n: int):
    if n < 0 and h.inverse is None:
        raise ValueError("negative times require the inverse map")
    fn = h.forward if n > 0 else h.inverse
    for _ in range(abs(n)):
        x = fn(x)
    return x


def embed_path(oracle: EmbeddingOracle, x, tau: float) -> np.ndarray:
    """Point ``y(x, tau)``; times outside [0, 1] follow iterates of ``h``."""
    x = np.asarray(x, dtype=np.float64)
    n = math.floor(tau)
    s = tau - n
    base = _iterate_h(oracle.h, x, n) if n != 0 else x
    d = oracle.delta(base)
    return np.concatenate([base + bump_f(s) * d, bump_g(s) * d], axis=-1)


def _fixed_point(update, start, max_iters: int):
    z = start
    for _ in range(max_iters):
        z_new = update(z)
        step = np.max(np.abs(z_new - z)) if z.size else 0.0
        z = z_new
        if step <= 1e-15 * max(1.0, float(np.max(np.abs(z)))):
            break
    return z


def recover_delta(oracle: EmbeddingOracle, state, t: float, tol: float = 1e-6) -> np.ndarray:
    """Displacement ``h(x) - x`` of the path through ``state`` at time ``t``."""
    state = np.asarray(state, dtype=np.float64)
    p = oracle.p
    if state.shape[-1] != 2 * p:
        raise ValueError(f"state width {state.shape[-1]} is not 2p = {2 * p}")
    s = float(t) - math.floor(float(t))
    u, v = state[..., :p], state[..., p:]
    if s == 0.0:
        return np.zeros_like(u)
    h = oracle.h
    fs, gs = bump_f(s), bump_g(s)
    if s < oracle.edge:
        # u = (1 - f) x + f h(x): contraction in x for small f
        x = _fixed_point(lambda z: u - fs * (h.forward(z) - z), u, oracle.max_fp_iters)
        d = h.forward(x) - x
        bad = np.abs(v - gs * d)
    elif s > 1.0 - oracle.edge:
        # u = f w + (1 - f) h^{-1}(w) with w = h(x)
        w = _fixed_point(lambda z: (u - (1.0 - fs) * h.inverse(z)) / fs, u, oracle.max_fp_iters)
        x = h.inverse(w)
        d = w - x
        bad = np.abs(v - gs * d)
    else:
        d = v / gs
        x = u - fs * d
        bad = np.abs(h.forward(x) - x - d)
    scale = np.maximum(1.0, np.abs(d))
    worst = float(np.max(bad / scale)) if bad.size else 0.0
    if not worst <= tol:
        raise OffImageError(
            f"state is off the embedded paths at t={t:.6g}: block disagreement {worst:.3e} > {tol:.1e}"
        )
    return d


def oracle_field(oracle: EmbeddingOracle, state, t: float, tol: float = 1e-6) -> np.ndarray:
    """Velocity ``[f'(s) d, g'(s) d]`` of the embedded flow at ``(state, t)``.

    ``d`` is recovered from the state itself, so this is a genuine
    right-hand side of ``(state, t)``.  At integer times it is exactly zero.
    """
    state = np.asarray(state, dtype=np.float64)
    s = float(t) - math.floor(float(t))
    if s == 0.0:
        return np.zeros_like(state)
    d = recover_delta(oracle, state, t, tol)
    return np.concatenate([bump_f_prime(s) * d, bump_g_prime(s) * d], axis=-1)


# RK4 stage states sit O(dt^2) off the exact paths; the consistency check
# during integration only has to catch gross departures.
INTEGRATION_TOL = 1e-2


def integrate_embedding(oracle: EmbeddingOracle, x, steps: int = 1000, tol: float = INTEGRATION_TOL) -> np.ndarray:
    """RK4 endpoint of the oracle flow from ``[x, 0]`` over ``t in [0, 1]``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    y0 = np.concatenate([x, np.zeros_like(x)], axis=-1)
    return rk4(lambda y, t: oracle_field(oracle, y, t, tol), y0, 0.0, 1.0, int(steps))


def min_path_separation(oracle: EmbeddingOracle, xa, xb, taus) -> np.ndarray:
    """Per pair, ``min_t ||y(xa, t) - y(xb, t)||_inf`` over the sampled times."""
    best = None
    for tau in taus:
        d = np.max(np.abs(embed_path(oracle, xa, tau) - embed_path(oracle, xb, tau)), axis=-1)
        best = d if best is None else np.minimum(best, d)
    return best


# ------------------------------------------------------------------ explicit i-ResNet


class ConstructedIResNet(IResNet):
    """Residual stack realizing ``h`` on ``[x, 0]``; see :func:`build_iresnet_for`."""

    def __init__(self, blocks, homeomorphism: Homeomorphism, k: float, T: int, strict: bool):
        super().__init__(blocks)
        self.homeomorphism = homeomorphism
        self.k = float(k)
        self.T = int(T)
        self.strict = bool(strict)

    def middle_blocks(self) -> list[MlpBlock]:
        return self.blocks[1:-1]

    def to_dict(self) -> dict:
        return {"kind": "constructed-iresnet", "homeomorphism": self.homeomorphism.name, "k": self.k,
                "strict": self.strict}


def build_iresnet_for(h: Homeomorphism, k: float | None = None, strict: bool = False) -> ConstructedIResNet:
    """``T + 3`` blocks on ``R^{2p}`` with ``T = floor(k + 1)`` (``floor(k) + 2`` if ``strict``).

    Block 0 writes ``d(x) = (h(x) - x) / T`` into the trailing channels, the
    ``T + 1`` middle blocks add ``T/(T+1)`` of the trailing channels to the
    leading ones, and the last block clears the trailing channels again.
    """
    k = h.k if k is None else float(k)
    if not math.isfinite(k) or k <= 0:
        raise ValueError(f"Lipschitz bound must be positive and finite, got {k}")
    T = math.floor(k) + 2 if strict else math.floor(k + 1)
    p = h.p

    def first(state):
        z = state[..., :p]
        return np.concatenate([np.zeros_like(z), (h.forward(z) - z) / T], axis=-1)

    def last(state):
        z = state[..., :p]
        x = h.inverse(z)
        return np.concatenate([np.zeros_like(z), -(z - x) / T], axis=-1)

    blocks = [FunctionBlock(first, 2 * p, label="lift")]
    move = np.zeros((2 * p, 2 * p))
    move[:p, p:] = (T / (T + 1)) * np.eye(p)
    for j in range(T + 1):
        net = Mlp([2 * p, 2 * p], bias=False, prefix=f"mid{j}.")
        net.layers[0][0].data[...] = move
        net.layers[0][0].requires_grad = False
        blocks.append(MlpBlock(net, c=0.9))
    blocks.append(FunctionBlock(last, 2 * p, label="drop"))
    return ConstructedIResNet(blocks, h, k, T, strict)


@dataclass
class AuditReport:
    max_ratios: list[float]
    witnesses: list[tuple[np.ndarray, np.ndarray]]

    def worst(self) -> float:
        return max(self.max_ratios)

    def all_below(self, bound: float = 1.0) -> bool:
        return all(r < bound for r in self.max_ratios)

    def violations(self, bound: float = 1.0) -> list[tuple[int, float, tuple[np.ndarray, np.ndarray]]]:
        return [(i, r, w) for i, (r, w) in enumerate(zip(self.max_ratios, self.witnesses)) if r >= bound]


def residual_lipschitz_audit(net: ConstructedIResNet, samples: int = 10_000, seed: int = 0) -> AuditReport:
    """Largest sampled ``|f(s) - f(s')| / |s - s'|`` for every block's residual.

    Pairs of domain points are pushed through the stack so each block is
    probed on the states it actually receives.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = make_rng(seed)
    h = net.homeomorphism
    p = h.p
    a = h.sample(samples, rng)
    b = h.sample(samples, rng)
    za = np.concatenate([a, np.zeros_like(a)], axis=-1)
    zb = np.concatenate([b, np.zeros_like(b)], axis=-1)
    ta, tb = net.trace(za), net.trace(zb)
    ratios, witnesses = [], []
    for j, blk in enumerate(net.blocks):
        sa, sb = ta[j], tb[j]
        num = np.linalg.norm(blk.residual(sa) - blk.residual(sb), axis=-1)
        den = np.linalg.norm(sa - sb, axis=-1)
        keep = den > 0
        r = np.where(keep, num / np.where(keep, den, 1.0), 0.0)
        i = int(np.argmax(r))
        ratios.append(float(r[i]))
        witnesses.append((sa[i].copy(), sb[i].copy()))
    return AuditReport(ratios, witnesses)


# ------------------------------------------------------------------ linear cap


def cap_field(F, p: int, r: int) -> OdeField:
    """Autonomous field ``[x_p, x_r] -> [0, F(x_p)]`` of width ``p + r``.

    ``F`` is an :class:`Mlp` (differentiable) or a numpy callable on row
    batches.  From ``[x, 0]`` the time-1 flow lands exactly on ``[x, F(x)]``.
    """
    params = F.params() if isinstance(F, Mlp) else []

    def fn(state, t):
        if isinstance(state, Tensor):
            head = columns(state, 0, p)
            return concat([np.zeros(head.shape), F(head)], axis=-1)
        state = np.asarray(state, dtype=np.float64)
        head = state[..., :p]
        out = np.asarray(F(head), dtype=np.float64).reshape(head.shape[:-1] + (r,))
        return np.concatenate([np.zeros_like(head), out], axis=-1)

    return OdeField.from_function(fn, p + r, params=params)


def linear_cap(p: int, r: int) -> np.ndarray:
    """Sparse ``r x (p + r)`` read-out selecting the trailing ``r`` channels."""
    W = np.zeros((r, p + r))
    W[:, p:] = np.eye(r)
    return W


# ------------------------------------------------------------------ counterexamples


@dataclass
class CounterexampleMap:
    name: str
    h: Homeomorphism
    separator: Callable[[int, np.random.Generator], np.ndarray]
    region: Callable[[np.ndarray], np.ndarray]

    def check(self, n: int = 1000, seed: int = 0) -> dict:
        rng = make_rng(seed)
        z = self.separator(n, rng)
        fixed = float(np.max(np.abs(self.h(z) - z)))
        x = self.h.sample(n, rng)
        crossed = int(np.count_nonzero(self.region(x) != self.region(self.h(x))))
        return {"separator_error": fixed, "crossings": crossed, "ok": fixed <= 1e-12 and crossed > 0}


def _unit_circle(n, rng):
    th = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([np.cos(th), np.sin(th)], axis=-1)


def counterexample_suite() -> list[CounterexampleMap]:
    return [
        CounterexampleMap(
            "negation",
            get_homeomorphism("negation"),
            lambda n, rng: np.zeros((n, 1)),
            lambda x: np.sign(np.asarray(x)[..., 0]),
        ),
        CounterexampleMap(
            "radial-swap",
            get_homeomorphism("radial-swap"),
            _unit_circle,
            lambda x: np.sign(np.linalg.norm(x, axis=-1) - 1.0),
        ),
    ]
