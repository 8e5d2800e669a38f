"""Invertible residual networks with spectrally normalized residual maps."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .autodiff import ParamStore, Tensor, make_rng
from .mlp import Mlp

__all__ = [
    "InversionError",
    "ResidualBlock",
    "MlpBlock",
    "FunctionBlock",
    "IResNet",
    "spectral_norm",
    "normalize_block",
    "forward",
    "inverse",
    "check_order_preservation",
    "lipschitz_ratios",
]

DEFAULT_C = 0.9


class InversionError(ArithmeticError):
    """Fixed-point inversion did not converge; usually an unnormalized block."""

    def __init__(self, residual: float, iters: int):
        super().__init__(
            f"fixed-point inversion did not converge in {iters} iterations (last step {residual:.3e}); "
            "is every residual block contractive?"
        )
        self.residual = residual
        self.iters = iters


def spectral_norm(W, iters: int = 50, u0: np.ndarray | None = None, seed: int = 0) -> float:
    """Largest singular value of ``W`` by power iteration.

    The start vector is ``u0`` if given, otherwise drawn from a PCG64 stream
    seeded by ``seed``.  Returns 0 for an all-zero matrix.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    W = np.atleast_2d(np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64))
    if not np.any(W):
        return 0.0
    if u0 is None:
        u0 = make_rng(seed).normal(size=W.shape[0])
    sigma, _, _ = _kernels.backend().power_iteration(np.ascontiguousarray(W), np.asarray(u0, dtype=np.float64), int(iters))
    return abs(float(sigma))


class ResidualBlock:
    """``x -> x + f(x)``; subclasses provide ``residual``."""

    width: int

    def residual(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return x + self.residual(x)

    def params(self) -> list[Tensor]:
        return []

    def lipschitz_bound(self) -> float:
        return float("inf")


class MlpBlock(ResidualBlock):
    """Residual block whose ``f`` is an MLP with per-layer spectral normalization.

    ``u`` holds one left singular-vector estimate per affine layer so that a
    single power-iteration refresh per training step stays accurate.
    """

    def __init__(self, net: Mlp, c: float = DEFAULT_C, power_iters: int = 50, seed: int = 0):
        if net.in_width != net.out_width:
            raise ValueError(f"residual MLP must be square, got {net.in_width}->{net.out_width}")
        self.net = net
        self.width = net.in_width
        self.c = float(c)
        self.power_iters = int(power_iters)
        rng = make_rng(seed)
        self.u = [rng.normal(size=W.shape[0]) for W in net.weights()]
        self.sigmas = [float("nan")] * len(self.u)

    def residual(self, x):
        return self.net(x)

    def params(self) -> list[Tensor]:
        return self.net.params()

    def refresh(self, iters: int = 1) -> list[float]:
        """Advance the power iterations and return the per-layer estimates."""
        kern = _kernels.backend()
        for i, W in enumerate(self.net.weights()):
            if not np.any(W.data):
                self.sigmas[i] = 0.0
                continue
            sigma, u, _ = kern.power_iteration(np.ascontiguousarray(W.data), self.u[i], int(iters))
            self.u[i] = np.asarray(u)
            self.sigmas[i] = abs(float(sigma))
        return list(self.sigmas)

    def normalize(self, c: float | None = None, iters: int | None = None) -> "MlpBlock":
        c = self.c if c is None else float(c)
        if not 0.0 < c < 1.0:
            raise ValueError(f"normalization constant must lie in (0, 1), got {c}")
        sig = self.refresh(self.power_iters if iters is None else iters)
        for W, s in zip(self.net.weights(), sig):
            if s > c:
                W.data *= c / s
        self.sigmas = [min(s, c) for s in sig]
        return self

    def lipschitz_bound(self) -> float:
        out = 1.0
        for W in self.net.weights():
            out *= spectral_norm(W.data, 200)
        return out


class FunctionBlock(ResidualBlock):
    """Residual block around a fixed numpy function (constructed networks)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], width: int, lipschitz: float | None = None,
                 label: str = ""):
        self.fn = fn
        self.width = int(width)
        self._lip = lipschitz
        self.label = label

    def residual(self, x):
        if isinstance(x, Tensor):
            raise TypeError("FunctionBlock residuals are not differentiable")
        return self.fn(np.asarray(x, dtype=np.float64))

    def lipschitz_bound(self) -> float:
        return float("inf") if self._lip is None else float(self._lip)


def normalize_block(block: MlpBlock, c: float = DEFAULT_C, iters: int = 50) -> MlpBlock:
    """Scale every affine weight by ``min(1, c / sigma)``."""
    return block.normalize(c, iters)


class IResNet:
    """Composition ``(I + f_n) o ... o (I + f_1)`` of equal-width blocks."""

    def __init__(self, blocks: Sequence[ResidualBlock], store: ParamStore | None = None):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("an IResNet needs at least one block")
        widths = {b.width for b in blocks}
        if len(widths) != 1:
            raise ValueError(f"blocks have differing widths {sorted(widths)}")
        self.blocks = blocks
        self.width = blocks[0].width
        self.store = store

    @classmethod
    def linear(cls, width: int, n_blocks: int, c: float = DEFAULT_C, seed: int = 0, bias: bool = False,
               power_iters: int = 50) -> "IResNet":
        """Blocks whose residual is a single affine map, as in ``x + W x``."""
        return cls.mlp(width, n_blocks, hidden=(), c=c, seed=seed, bias=bias, power_iters=power_iters)

    @classmethod
    def mlp(cls, width: int, n_blocks: int, hidden: Sequence[int] = (16,), activation: str = "tanh",
            c: float = DEFAULT_C, seed: int = 0, bias: bool = True, power_iters: int = 50) -> "IResNet":
        store = ParamStore()
        rng = make_rng(seed)
        blocks = []
        for j in range(n_blocks):
            net = Mlp([width, *hidden, width], activation=activation, bias=bias, store=store,
                      prefix=f"block{j}.", rng=rng)
            blocks.append(MlpBlock(net, c=c, power_iters=power_iters, seed=seed + 7919 * (j + 1)))
        return cls(blocks, store)

    def __len__(self) -> int:
        return len(self.blocks)

    def params(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.params()]

    def normalize(self, c: float | None = None, iters: int | None = None) -> "IResNet":
        for b in self.blocks:
            if isinstance(b, MlpBlock):
                b.normalize(c, iters)
        return self

    def _packed(self):
        if not all(isinstance(b, MlpBlock) for b in self.blocks):
            return None
        nets = [b.net for b in self.blocks]
        if any(n.sizes != nets[0].sizes or n.activation != nets[0].activation for n in nets):
            return None
        flats = []
        for n in nets:
            flat, sizes, act = n.packed()
            flats.append(flat)
        offsets = np.concatenate([[0], np.cumsum([f.size for f in flats])]).astype(np.int64)
        return np.concatenate(flats), offsets, sizes, act

    def forward(self, x):
        if isinstance(x, Tensor):
            h = x
            for b in self.blocks:
                h = b(h)
            return h
        x = np.asarray(x, dtype=np.float64)
        packed = self._packed()
        if packed is None:
            h = x
            for b in self.blocks:
                h = b(h)
            return h
        flat, offsets, sizes, act = packed
        batch = np.ascontiguousarray(np.atleast_2d(x))
        return _kernels.backend().residual_stack_forward(batch, flat, offsets, sizes, act).reshape(x.shape)

    __call__ = forward

    def trace(self, x) -> list[np.ndarray]:
        """Activations before the first block and after every block."""
        h = np.asarray(x, dtype=np.float64)
        out = [h]
        for b in self.blocks:
            h = b(h)
            out.append(h)
        return out

    def inverse(self, y, tol: float = 1e-10, max_iters: int = 100, return_residual: bool = False):
        """Invert block by block with ``x <- y - f(x)``, last block first.

        Earlier blocks get proportionally tighter step tolerances because every
        later block can amplify an error by at most a factor of 2.
        """
        y = np.asarray(y, dtype=np.float64)
        n = len(self.blocks)
        tols = np.array([tol * 0.5 ** (n - 1 - j) for j in range(n)])
        packed = self._packed()
        batch = np.ascontiguousarray(np.atleast_2d(y))
        if packed is not None:
            flat, offsets, sizes, act = packed
            x, iters, step = _kernels.backend().residual_stack_inverse(batch, flat, offsets, sizes, act, tols, int(max_iters))
        else:
            x, iters, step = _generic_inverse(self.blocks, batch, tols, int(max_iters))
        if iters > max_iters:
            raise InversionError(float(step), int(max_iters))
        x = x.reshape(y.shape)
        if return_residual:
            res = float(np.max(np.abs(self.forward(x) - y))) if y.size else 0.0
            return x, res
        return x

    def lipschitz_bounds(self) -> list[float]:
        return [b.lipschitz_bound() for b in self.blocks]

    def to_dict(self) -> dict:
        if self.store is None or not all(isinstance(b, MlpBlock) for b in self.blocks):
            raise TypeError("only MLP-block networks with a ParamStore can be serialized")
        return {
            "kind": "iresnet",
            "blocks": [
                {"net": b.net.spec(), "c": b.c, "power_iters": b.power_iters, "u": [list(map(float, u)) for u in b.u]}
                for b in self.blocks
            ],
            "store": self.store.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IResNet":
        store = ParamStore.from_dict(doc["store"])
        blocks = []
        for entry in doc["blocks"]:
            spec = entry["net"]
            net = Mlp.attach(store, spec["sizes"], spec["activation"], spec["bias"], spec["prefix"])
            blk = MlpBlock(net, c=entry["c"], power_iters=entry["power_iters"])
            if "u" in entry:
                blk.u = [np.asarray(u, dtype=np.float64) for u in entry["u"]]
            blocks.append(blk)
        return cls(blocks, store)


def _generic_inverse(blocks, y, tols, max_iters):
    eps = np.finfo(np.float64).eps
    x = y.copy()
    worst_iters, worst_step = 0, 0.0
    for j in range(len(blocks) - 1, -1, -1):
        target = x.copy()
        z = target.copy()
        step = np.inf
        it = 0
        converged = False
        while it < max_iters:
            z_new = target - blocks[j].residual(z)
            step = float(np.max(np.abs(z_new - z))) if z.size else 0.0
            z = z_new
            it += 1
            if step <= max(tols[j], 4 * eps * max(1.0, float(np.max(np.abs(z))))):
                converged = True
                break
        if not converged:
            it = max_iters + 1
        x = z
        worst_iters = max(worst_iters, it)
        worst_step = max(worst_step, step)
    return x, worst_iters, worst_step


def forward(net: IResNet, x):
    return net.forward(x)


def inverse(net: IResNet, y, tol: float = 1e-10, max_iters: int = 100):
    return net.inverse(y, tol=tol, max_iters=max_iters)


def check_order_preservation(net, pairs) -> int:
    """Number of pairs ``(a, b)`` with ``sign(F(b) - F(a)) != sign(b - a)``.

    ``net`` is any width-1 map (an :class:`IResNet` or a callable on column
    arrays).
    """
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    a = pairs[:, :1]
    b = pairs[:, 1:]
    Fa = np.asarray(net(a)).reshape(-1)
    Fb = np.asarray(net(b)).reshape(-1)
    return int(np.count_nonzero(np.sign(Fb - Fa) != np.sign(b[:, 0] - a[:, 0])))


def lipschitz_ratios(fn: Callable[[np.ndarray], np.ndarray], a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``|fn(a) - fn(b)| / |a - b|`` row by row (Euclidean norms)."""
    num = np.linalg.norm(np.atleast_2d(fn(a) - fn(b)), axis=-1)
    den = np.linalg.norm(np.atleast_2d(a - b), axis=-1)
    keep = den > 0
    return num[keep] / den[keep]
