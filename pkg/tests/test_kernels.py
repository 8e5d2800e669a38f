import numpy as np
import pytest

from flowcap import _kernels as K
from flowcap.iresnet import IResNet
from flowcap.odenet import OdeBlock, integrate, mlp_field, rk4


def _packed(rng, sizes):
    parts = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        parts += [rng.uniform(-0.5, 0.5, a * b), rng.uniform(-0.5, 0.5, b)]
    return np.concatenate(parts)


@pytest.mark.parametrize("env,name", [("0", "numpy"), ("off", "numpy"), ("1", "numba"), ("auto", "auto"), ("", "auto")])
def test_env_flag_selects_backend(env, name, monkeypatch):
    monkeypatch.setenv("FLOWCAP_NUMBA", env)
    assert K.backend().name == name


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        K.backend("fortran")


@pytest.mark.parametrize("sizes", [[2, 2], [3, 16, 3], [1, 4, 5, 1]])
@pytest.mark.parametrize("act", [K.TANH, K.RELU])
@pytest.mark.parametrize("rows", [1, 5, 200])
def test_backends_agree(sizes, act, rows):
    rng = np.random.default_rng(sum(sizes) + rows)
    sz = K.pack_sizes(sizes)
    flat = _packed(rng, sizes)
    x = rng.normal(size=(rows, sizes[0]))
    a = K.NUMPY.mlp_forward(x, flat, sz, act)
    b = K.NUMBA.mlp_forward(x, flat, sz, act)
    assert np.max(np.abs(a - b)) <= 1e-13
    if sizes[0] == sizes[-1]:
        a = K.NUMPY.mlp_rk4(x, flat, sz, act, 0.0, 1.0, 20)
        b = K.NUMBA.mlp_rk4(x, flat, sz, act, 0.0, 1.0, 20)
        assert np.max(np.abs(a - b)) <= 1e-12
        c = K.AUTO.mlp_rk4(x, flat, sz, act, 0.0, 1.0, 20)
        assert np.max(np.abs(a - c)) <= 1e-12


def test_residual_stack_backends_agree():
    rng = np.random.default_rng(0)
    sz = K.pack_sizes([2, 6, 2])
    flats = [_packed(rng, [2, 6, 2]) * 0.3 for _ in range(4)]
    flat_all = np.concatenate(flats)
    offsets = np.cumsum([0] + [f.size for f in flats]).astype(np.int64)
    x = rng.normal(size=(50, 2))
    ya = K.NUMPY.residual_stack_forward(x, flat_all, offsets, sz, K.TANH)
    yb = K.NUMBA.residual_stack_forward(x, flat_all, offsets, sz, K.TANH)
    assert np.max(np.abs(ya - yb)) <= 1e-13
    tols = np.full(4, 1e-12)
    xa, ia, _ = K.NUMPY.residual_stack_inverse(ya, flat_all, offsets, sz, K.TANH, tols, 200)
    xb, ib, _ = K.NUMBA.residual_stack_inverse(ya, flat_all, offsets, sz, K.TANH, tols, 200)
    assert ia <= 200 and ib <= 200
    assert np.max(np.abs(xa - x)) <= 1e-10 and np.max(np.abs(xb - x)) <= 1e-10


def test_power_iteration_backends_agree():
    W = np.random.default_rng(1).normal(size=(6, 4))
    u = np.ones(6)
    sa = K.NUMPY.power_iteration(W, u, 50)[0]
    sb = K.NUMBA.power_iteration(W, u, 50)[0]
    assert abs(sa - sb) <= 1e-12 * sa


@pytest.mark.parametrize("env", ["0", "1"])
def test_integrate_kernel_path_matches_python_rk4(env, monkeypatch):
    monkeypatch.setenv("FLOWCAP_NUMBA", env)
    block = OdeBlock(mlp_field(3, (8,), seed=2), 0.0, 1.0, 30)
    x = np.random.default_rng(2).normal(size=(10, 3))
    fast = integrate(block, x)
    slow = rk4(block.field, x, 0.0, 1.0, 30)
    assert np.max(np.abs(fast - slow)) <= 1e-13


def test_iresnet_kernel_path_matches_blockwise():
    net = IResNet.mlp(2, 3, hidden=(5,), seed=3).normalize()
    x = np.random.default_rng(3).normal(size=(8, 2))
    manual = x
    for b in net.blocks:
        manual = b(manual)
    assert np.max(np.abs(net.forward(x) - manual)) <= 1e-13
