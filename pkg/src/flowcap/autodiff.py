"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Operations record themselves on the innermost open :class:`Tape` whenever at
least one input requires a gradient.  :func:`backward` replays the tape in
reverse and accumulates into the ``grad`` field of every leaf that asked for
one.

    >>> w = Tensor([1.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mse(scale(w, 2.0), Tensor([4.0]))
    >>> backward(tape, loss)
    >>> w.grad
    array([-8.])
"""
from __future__ import annotations

import json
import math
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "ParamStore",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "affine",
    "relu",
    "tanh",
    "cos",
    "sin",
    "square",
    "sum_all",
    "mse",
    "concat",
    "columns",
    "backward",
    "grad_of",
    "finite_difference_gradient",
    "make_rng",
    "uniform_init",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data.tolist()!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar so the same numeric code runs on ndarrays and Tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tape:
    """Ordered record of primitive operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def _record(self, out: Tensor, inputs, vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))
        self._ids.add(id(out))


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        out._produced = True
        tape._record(out, inputs, vjp)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape != () else np.asarray(g.sum())


def _elementwise_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not conform")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_shapes(a, b, "mul")
    av, bv = a.data, b.data
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(A, B) -> Tensor:
    A, B = _as_tensor(A), _as_tensor(B)
    if A.ndim == 0 or B.ndim == 0 or A.shape[-1] != B.shape[0]:
        raise ShapeError(f"matmul: shapes {list(A.shape)} and {list(B.shape)} do not conform")
    av, bv = A.data, B.data

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _emit(av @ bv, (A, B), vjp)


def affine(W, x, b) -> Tensor:
    """``W @ x + b`` for a single vector, ``x @ W.T + b`` for a row batch."""
    W, x, b = _as_tensor(W), _as_tensor(x), _as_tensor(b)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: shapes {list(W.shape)} and {list(x.shape)} do not conform")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"affine: bias shape {list(b.shape)} does not match {list(W.shape)}")
    wv, xv = W.data, x.data
    if xv.ndim == 1:
        out = wv @ xv + b.data
        return _emit(out, (W, x, b), lambda g: (np.outer(g, xv), wv.T @ g, g))
    out = xv @ wv.T + b.data
    return _emit(out, (W, x, b), lambda g: (g.T @ xv, g @ wv, g.sum(axis=0)))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.data
    return _emit(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),))


def sin(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.data
    return _emit(np.sin(xv), (x,), lambda g: (g * np.cos(xv),))


def square(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.data
    return _emit(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mse(a, b) -> Tensor:
    """Mean of squared differences over every entry; returns a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return _emit(np.asarray(np.mean(diff * diff)), (a, b), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(p) for p in parts)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[list(t.shape) for t in ts]} do not conform") from exc
    widths = [t.shape[axis] for t in ts]
    cuts = np.cumsum(widths)[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def columns(x, start: int, stop: int) -> Tensor:
    """Trailing-axis slice ``x[..., start:stop]``."""
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.data[..., start:stop].copy(), (x,), vjp)


def _backprop(tape: Tape, loss: Tensor, seed: np.ndarray | None = None) -> dict[int, tuple[Tensor, np.ndarray]]:
    if seed is None:
        if loss.size != 1:
            raise ValueError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
        seed = np.ones(loss.shape)
    grads: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.asarray(seed, dtype=np.float64))}
    for node in reversed(tape.nodes):
        entry = grads.pop(id(node.out), None)
        if entry is None:
            continue
        parts = node.vjp(entry[1])
        for t, g in zip(node.inputs, parts):
            if not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = (t, g if prev is None else prev[1] + g)
    return grads


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dleaf into ``.grad`` of every leaf reached."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    if not tape.owns(loss):
        if loss._produced:
            raise ValueError("backward: loss was not produced on this tape")
        if loss.requires_grad:
            loss.grad = (0.0 if loss.grad is None else loss.grad) + np.ones(loss.shape)
        return
    for t, g in _backprop(tape, loss).values():
        if tape.owns(t):
            continue
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_of(tape: Tape, out: Tensor, wrt: Sequence[Tensor], cotangent=None) -> list[np.ndarray]:
    """Vector-Jacobian product without touching any ``.grad`` accumulator.

    ``cotangent`` defaults to 1 for scalar ``out``.  Leaves in ``wrt`` that the
    output does not depend on get zeros.
    """
    if cotangent is not None:
        cotangent = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), out.shape)
    found = _backprop(tape, out, cotangent) if tape.owns(out) else {}
    res = []
    for t in wrt:
        if t is out:
            res.append(np.ones(t.shape) if cotangent is None else np.array(cotangent))
            continue
        hit = found.get(id(t))
        res.append(np.zeros(t.shape) if hit is None else np.asarray(hit[1]).reshape(t.shape))
    return res


def finite_difference_gradient(fn: Callable[[], float], params: Sequence, step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``fn()`` with respect to ``params``.

    Each parameter (a Tensor or a float ndarray) is perturbed in place, one
    coordinate at a time, and restored afterwards.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    out = []
    for p in params:
        arr = p.data if isinstance(p, Tensor) else p
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn())
            flat[i] = orig - step
            fm = float(fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def make_rng(seed: int) -> np.random.Generator:
    """Library-owned PCG64 stream; never touches numpy's global state."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


class ParamStore:
    """Named trainable tensors in insertion order."""

    FORMAT_VERSION = 1

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        t.zero_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self) -> list[np.ndarray]:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self._params.values()]

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def to_dict(self) -> dict:
        return {
            "format_version": self.FORMAT_VERSION,
            "params": [
                {"name": n, "shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}
                for n, t in self._params.items()
            ],
        }

    def to_json(self) -> str:
        # repr of a float is the shortest string that round-trips (<= 17 digits)
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamStore":
        if doc.get("format_version") != cls.FORMAT_VERSION:
            raise ValueError(f"unsupported ParamStore format_version {doc.get('format_version')!r}")
        store = cls()
        for entry in doc["params"]:
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"parameter {entry['name']!r}: shape {list(shape)} does not match data")
            store.add(entry["name"], data.reshape(shape))
        return store

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        return cls.from_dict(json.loads(text))

    def load_values(self, other: "ParamStore") -> None:
        for name, t in other.items():
            self._params[name].data[...] = t.data


def parameters(items: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in items if t.requires_grad]
