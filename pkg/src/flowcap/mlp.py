"""Fully connected networks over a :class:`ParamStore`."""
from __future__ import annotations

import numpy as np

from . import _kernels
from .autodiff import ParamStore, Tensor, affine, make_rng, relu, tanh, uniform_init

_ACT_OPS = {"tanh": tanh, "relu": relu}
_ACT_NP = {"tanh": np.tanh, "relu": lambda h: np.maximum(h, 0.0)}


class Mlp:
    """Affine layers separated by a 1-Lipschitz activation.

    Calling with a :class:`Tensor` records on the active tape; calling with an
    ndarray takes a plain numpy path.  Inputs are a single vector or a row
    batch.
    """

    def __init__(
        self,
        sizes,
        activation: str = "tanh",
        bias: bool = True,
        store: ParamStore | None = None,
        prefix: str = "",
        rng: np.random.Generator | None = None,
        seed: int = 0,
    ):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {list(sizes)}")
        if activation not in _ACT_OPS:
            raise ValueError(f"activation must be one of {sorted(_ACT_OPS)}, got {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.bias = bias
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix
        rng = rng if rng is not None else make_rng(seed)
        self.layers: list[tuple[Tensor, Tensor | None]] = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W = self.store.add(f"{prefix}W{i}", uniform_init(rng, (n_out, n_in), n_in))
            b = self.store.add(f"{prefix}b{i}", uniform_init(rng, (n_out,), n_in)) if bias else None
            self.layers.append((W, b))

    @classmethod
    def attach(cls, store: ParamStore, sizes, activation="tanh", bias=True, prefix="") -> "Mlp":
        """Bind to parameters that already live in ``store`` (deserialization)."""
        self = cls.__new__(cls)
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.bias = bias
        self.store = store
        self.prefix = prefix
        self.layers = []
        for i in range(len(self.sizes) - 1):
            W = store[f"{prefix}W{i}"]
            b = store[f"{prefix}b{i}"] if bias else None
            self.layers.append((W, b))
        return self

    @property
    def in_width(self) -> int:
        return self.sizes[0]

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[Tensor]:
        out = []
        for W, b in self.layers:
            out.append(W)
            if b is not None:
                out.append(b)
        return out

    def weights(self) -> list[Tensor]:
        return [W for W, _ in self.layers]

    def __call__(self, x):
        if isinstance(x, Tensor):
            return self._taped(x)
        return self._numpy(np.asarray(x, dtype=np.float64))

    def _taped(self, x: Tensor) -> Tensor:
        act = _ACT_OPS[self.activation]
        h = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = affine(W, h, b if b is not None else np.zeros(W.shape[0]))
            if i < last:
                h = act(h)
        return h

    def _numpy(self, x: np.ndarray) -> np.ndarray:
        act = _ACT_NP[self.activation]
        h = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = h @ W.data.T if h.ndim == 2 else W.data @ h
            if b is not None:
                h = h + b.data
            if i < last:
                h = act(h)
        return h

    def packed(self) -> tuple[np.ndarray, np.ndarray, int]:
        parts = []
        for W, b in self.layers:
            parts.append(W.data.reshape(-1))
            parts.append(b.data if b is not None else np.zeros(W.shape[0]))
        return np.concatenate(parts), _kernels.pack_sizes(self.sizes), _kernels.ACTIVATIONS[self.activation]

    def spec(self) -> dict:
        return {"sizes": self.sizes, "activation": self.activation, "bias": self.bias, "prefix": self.prefix}
