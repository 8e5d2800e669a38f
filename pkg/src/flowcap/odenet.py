"""Neural-ODE blocks: fixed-step RK4 flow maps, their inverses and gradients."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .autodiff import ParamStore, Tape, Tensor, _active, concat, columns, grad_of
from .mlp import Mlp

__all__ = [
    "IntegrationError",
    "OdeField",
    "OdeBlock",
    "Trajectory",
    "Gradients",
    "rk4",
    "integrate",
    "inverse",
    "grad_through_solver",
    "grad_adjoint",
    "autonomize",
    "augment",
    "deaugment",
    "mlp_field",
]


class IntegrationError(ArithmeticError):
    """A non-finite value appeared during integration."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at solver step {step} (t={t:.6g})")
        self.step = step
        self.t = t


class OdeField:
    """Right-hand side ``dx/dt = f(x)`` or ``f(x, t)`` on width ``q``.

    ``net`` is an :class:`Mlp` of widths ``q -> ... -> q`` (``q+1`` inputs when
    time dependent, time appended as the last input) or any callable
    ``fn(state, t)`` working on ndarrays and, if gradients are needed, Tensors.
    """

    def __init__(self, net, q: int, time_dependent: bool = False, params: Sequence[Tensor] | None = None):
        self.net = net
        self.q = int(q)
        self.time_dependent = bool(time_dependent)
        if isinstance(net, Mlp):
            want_in = self.q + (1 if time_dependent else 0)
            if net.in_width != want_in or net.out_width != self.q:
                raise ValueError(
                    f"field net widths {net.in_width}->{net.out_width} do not match q={self.q}"
                    f"{' (+1 time input)' if time_dependent else ''}"
                )
            self._params = net.params()
        else:
            self._params = list(params or [])

    @classmethod
    def from_function(cls, fn: Callable, q: int, time_dependent: bool = False, params=None) -> "OdeField":
        return cls(fn, q, time_dependent, params)

    def params(self) -> list[Tensor]:
        return self._params

    def __call__(self, state, t=0.0):
        if not isinstance(self.net, Mlp):
            return self.net(state, t)
        if not self.time_dependent:
            return self.net(state)
        return self.net(_append_time(state, t))

    def kernel_args(self):
        """Packed MLP for the compiled RK4 path, or ``None`` when not eligible."""
        if isinstance(self.net, Mlp) and not self.time_dependent:
            return self.net.packed()
        return None


def _append_time(state, t):
    is_t = isinstance(state, Tensor)
    shape = state.shape
    if isinstance(t, (Tensor, np.ndarray)):
        col = t
    else:
        col = np.full(shape[:-1] + (1,), float(t))
    if is_t or isinstance(col, Tensor):
        return concat([state, col], axis=-1)
    return np.concatenate([state, col], axis=-1)


def mlp_field(q: int, hidden: Sequence[int] = (16,), activation: str = "tanh", seed: int = 0,
              time_dependent: bool = False, store: ParamStore | None = None, prefix: str = "f.") -> OdeField:
    sizes = [q + (1 if time_dependent else 0), *hidden, q]
    net = Mlp(sizes, activation=activation, store=store, prefix=prefix, seed=seed)
    return OdeField(net, q, time_dependent)


class _Autonomized(OdeField):
    def __init__(self, inner: OdeField):
        self.inner = inner
        self.net = inner.net
        self.q = inner.q + 1
        self.time_dependent = False
        self._params = inner.params()

    def __call__(self, state, t=0.0):
        q = self.inner.q
        if isinstance(state, Tensor):
            x, tau = columns(state, 0, q), columns(state, q, q + 1)
            dx = self.inner(x, tau)
            return concat([dx, np.ones(tau.shape)], axis=-1)
        x, tau = state[..., :q], state[..., q : q + 1]
        dx = self.inner(x, tau)
        if isinstance(dx, Tensor):
            return concat([dx, np.ones(tau.shape)], axis=-1)
        return np.concatenate([dx, np.ones_like(tau)], axis=-1)

    def kernel_args(self):
        return None


def autonomize(field: OdeField) -> OdeField:
    """Adjoin time as a trailing state channel with derivative 1.

    Initial states must carry ``tau = 0`` (or ``t0``) in the new channel.
    """
    if not field.time_dependent:
        raise ValueError("autonomize: field is already autonomous")
    return _Autonomized(field)


@dataclass
class Trajectory:
    times: list[float] = dc_field(default_factory=list)
    states: list[np.ndarray] = dc_field(default_factory=list)

    def append(self, t: float, x) -> None:
        self.times.append(float(t))
        self.states.append(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class OdeBlock:
    field: OdeField
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 100

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.t1 == self.t0:
            raise ValueError("integration window is empty (t1 == t0)")
        self.steps = int(self.steps)
        self.t0 = float(self.t0)
        self.t1 = float(self.t1)

    @property
    def q(self) -> int:
        return self.field.q

    def params(self) -> list[Tensor]:
        return self.field.params()

    def to_dict(self) -> dict:
        net = self.field.net
        if not isinstance(net, Mlp):
            raise TypeError("only MLP-backed blocks can be serialized")
        return {
            "kind": "odenet",
            "t0": self.t0,
            "t1": self.t1,
            "steps": self.steps,
            "q": self.q,
            "time_dependent": self.field.time_dependent,
            "net": net.spec(),
            "store": net.store.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OdeBlock":
        store = ParamStore.from_dict(doc["store"])
        spec = doc["net"]
        net = Mlp.attach(store, spec["sizes"], spec["activation"], spec["bias"], spec["prefix"])
        field = OdeField(net, doc["q"], doc["time_dependent"])
        return cls(field, doc["t0"], doc["t1"], doc["steps"])


def _check_finite(x, step: int, t: float) -> None:
    v = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(v)):
        raise IntegrationError(step, t)


def rk4(fn: Callable, x, t0: float, t1: float, steps: int, trajectory: Trajectory | None = None):
    """Classical RK4 with ``steps`` uniform steps; works on ndarrays and Tensors."""
    h = (t1 - t0) / steps
    if trajectory is not None:
        trajectory.append(t0, x)
    for i in range(steps):
        t = t0 + i * h
        k1 = fn(x, t)
        k2 = fn(x + (0.5 * h) * k1, t + 0.5 * h)
        k3 = fn(x + (0.5 * h) * k2, t + 0.5 * h)
        k4 = fn(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(x, i, t + h)
        if trajectory is not None:
            trajectory.append(t0 + (i + 1) * h, x)
    return x


def _run(block: OdeBlock, x, t_from: float, t_to: float, trajectory: Trajectory | None):
    if isinstance(x, Tensor) or trajectory is not None or _active() is not None:
        return rk4(block.field, x, t_from, t_to, block.steps, trajectory)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != block.q:
        raise ValueError(f"state width {x.shape[-1]} does not match field width {block.q}")
    packed = block.field.kernel_args()
    if packed is None:
        return rk4(block.field, x, t_from, t_to, block.steps)
    flat, sizes, act = packed
    batch = np.atleast_2d(x)
    out = _kernels.backend().mlp_rk4(np.ascontiguousarray(batch), flat, sizes, act, t_from, t_to, block.steps)
    for i in range(out.shape[0]):
        if not np.all(np.isfinite(out[i])):
            # rerun on the python path to locate the failing step
            rk4(block.field, batch[i], t_from, t_to, block.steps)
    return out.reshape(x.shape)


def integrate(block: OdeBlock, x0, return_trajectory: bool = False):
    """Flow map ``phi_T(x0)``; optionally also the per-step trajectory."""
    traj = Trajectory() if return_trajectory else None
    xT = _run(block, x0, block.t0, block.t1, traj)
    return (xT, traj) if return_trajectory else xT


def inverse(block: OdeBlock, xT, return_trajectory: bool = False):
    """``phi_{-T}``: the same field integrated from ``t1`` back to ``t0``."""
    traj = Trajectory() if return_trajectory else None
    x0 = _run(block, xT, block.t1, block.t0, traj)
    return (x0, traj) if return_trajectory else x0


@dataclass
class Gradients:
    loss: float
    params: list[np.ndarray]
    x0: np.ndarray


def grad_through_solver(block: OdeBlock, x0, loss_tail: Callable[[Tensor], Tensor]) -> Gradients:
    """Exact gradient of the discrete RK4 map by reverse-mode over the solver."""
    params = block.params()
    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        xT = rk4(block.field, x, block.t0, block.t1, block.steps)
        loss = loss_tail(xT)
    grads = grad_of(tape, loss, [*params, x])
    return Gradients(float(loss.data), grads[:-1], grads[-1])


def _vjp(field: OdeField, z: np.ndarray, t: float, a: np.ndarray, params: list[Tensor]):
    with Tape() as tape:
        zt = Tensor(z, requires_grad=True)
        fz = field(zt, t)
    if not isinstance(fz, Tensor) or not tape.owns(fz):
        fz_v = fz.data if isinstance(fz, Tensor) else np.asarray(fz)
        return fz_v, np.zeros_like(z), [np.zeros(p.shape) for p in params]
    g = grad_of(tape, fz, [zt, *params], cotangent=a)
    return fz.data, g[0], g[1:]


def grad_adjoint(block: OdeBlock, x0, loss_tail: Callable[[Tensor], Tensor]) -> Gradients:
    """Adjoint sensitivities by reverse-time RK4 on the augmented state.

    The state ``z``, the adjoint ``a = dL/dz`` and the running parameter
    gradient are integrated together from ``t1`` to ``t0`` with
    ``da/dt = -a^T df/dz`` and ``dg/dt = -a^T df/dtheta``.
    """
    params = block.params()
    field = block.field
    xT = integrate(block, np.asarray(x0, dtype=np.float64))
    with Tape() as tape:
        xT_t = Tensor(xT, requires_grad=True)
        loss = loss_tail(xT_t)
    a = grad_of(tape, loss, [xT_t])[0]
    z = np.array(xT, dtype=np.float64)
    g = [np.zeros(p.shape) for p in params]

    h = (block.t1 - block.t0) / block.steps

    def aug(z, a, t):
        fz, az, ap = _vjp(field, z, t, a, params)
        return fz, -az, [-x for x in ap]

    for i in range(block.steps):
        t = block.t1 - i * h
        f1, a1, g1 = aug(z, a, t)
        f2, a2, g2 = aug(z - 0.5 * h * f1, a - 0.5 * h * a1, t - 0.5 * h)
        f3, a3, g3 = aug(z - 0.5 * h * f2, a - 0.5 * h * a2, t - 0.5 * h)
        f4, a4, g4 = aug(z - h * f3, a - h * a3, t - h)
        z = z - (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        a = a - (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        g = [gi - (h / 6.0) * (p1 + 2.0 * p2 + 2.0 * p3 + p4) for gi, p1, p2, p3, p4 in zip(g, g1, g2, g3, g4)]
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(a))):
            raise IntegrationError(i, t - h)
    return Gradients(float(loss.data), g, a)


def augment(x, d: int):
    """Append ``d`` zero channels on the trailing axis."""
    if d < 0:
        raise ValueError("augment: d must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if d == 0:
        return x.copy()
    return np.concatenate([x, np.zeros(x.shape[:-1] + (d,))], axis=-1)


def deaugment(x, d: int):
    x = np.asarray(x, dtype=np.float64)
    return x.copy() if d == 0 else x[..., : x.shape[-1] - d].copy()
