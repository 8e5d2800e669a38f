import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcap.iresnet import (
    FunctionBlock,
    InversionError,
    IResNet,
    MlpBlock,
    check_order_preservation,
    lipschitz_ratios,
    normalize_block,
    spectral_norm,
)
from flowcap.mlp import Mlp
from flowcap.persist import model_from_dict


def jacobi_singular_values(A, sweeps=60):
    """One-sided Jacobi SVD, kept independent of numpy.linalg."""
    U = np.array(A, dtype=np.float64).copy()
    if U.shape[1] > U.shape[0]:
        U = U.T.copy()
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = U[:, i] @ U[:, i]
                b = U[:, j] @ U[:, j]
                g = U[:, i] @ U[:, j]
                if abs(g) <= 1e-300 or a * b <= 1e-300:
                    continue
                off = max(off, abs(g) / np.sqrt(a * b))
                zeta = (b - a) / (2.0 * g)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ui = U[:, i].copy()
                U[:, i] = c * ui - s * U[:, j]
                U[:, j] = s * ui + c * U[:, j]
        if off < 1e-15:
            break
    return np.sort(np.sqrt(np.sum(U * U, axis=0)))[::-1]


def linear_block(w):
    net = Mlp([len(w), len(w)], bias=False, seed=0)
    net.weights()[0].data[...] = np.asarray(w, dtype=np.float64)
    return MlpBlock(net)


def test_jacobi_oracle_self_check():
    A = np.diag([3.0, 2.0, 1.0]) @ np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1.0]])
    assert np.allclose(jacobi_singular_values(A), [3, 2, 1], atol=1e-14)


def test_spectral_norm_small_cases():
    assert spectral_norm(np.array([[3.0]])) == pytest.approx(3.0, abs=1e-15)
    assert abs(spectral_norm(np.diag([2.0, 1.0]), iters=50) - 2.0) <= 1e-6
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_matches_svd_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        W = rng.normal(size=(8, 8))
        sv = jacobi_singular_values(W)
        if sv[1] / sv[0] > 0.9:
            continue  # power iteration needs a separated top value at 50 iters
        assert abs(spectral_norm(W, iters=50) - sv[0]) <= 1e-4 * sv[0]
        assert spectral_norm(W, iters=50) >= (1 - 1e-3) * sv[0]


def test_spectral_norm_deterministic():
    W = np.random.default_rng(3).normal(size=(5, 4))
    assert spectral_norm(W, seed=1) == spectral_norm(W, seed=1)


def test_normalize_scales_down_only():
    block = normalize_block(linear_block([[2.0]]), c=0.9)
    assert block.net.weights()[0].data[0, 0] == pytest.approx(0.9, abs=1e-12)
    block = normalize_block(linear_block([[0.5]]), c=0.9)
    assert block.net.weights()[0].data[0, 0] == 0.5


def test_normalized_layers_below_c_and_lipschitz_sampled():
    rng = np.random.default_rng(1)
    net = IResNet.mlp(3, 2, hidden=(16,), seed=4)
    for b in net.blocks:
        for W in b.net.weights():
            W.data *= 5.0
    net.normalize(c=0.9, iters=50)
    for b in net.blocks:
        for W in b.net.weights():
            assert jacobi_singular_values(W.data)[0] <= 0.9 + 1e-9
        a = rng.uniform(-10, 10, size=(100_000, 3))
        c = rng.uniform(-10, 10, size=(100_000, 3))
        assert np.max(lipschitz_ratios(b.residual, a, c)) < 1.0


def test_forward_identity_and_sqrt2_doubling():
    zero = IResNet([linear_block([[0.0]])])
    x = np.array([[1.5], [-2.0]])
    assert np.array_equal(zero.forward(x), x)
    r = np.sqrt(2.0) - 1.0
    twice = IResNet([linear_block([[r]]), linear_block([[r]])])
    assert np.allclose(twice.forward(x), 2 * x, rtol=1e-15, atol=0)


def test_inverse_closed_forms():
    zero = IResNet([linear_block([[0.0]])])
    assert zero.inverse(np.array([[4.0]])).tolist() == [[4.0]]
    half = IResNet([linear_block([[0.5]])])
    assert abs(half.inverse(np.array([[3.0]]), tol=1e-10)[0, 0] - 2.0) <= 1e-9


def test_inverse_nonconvergence_reports_residual():
    bad = IResNet([linear_block([[-2.0]])])
    with pytest.raises(InversionError) as err:
        bad.inverse(np.array([[1.0]]), max_iters=20)
    assert err.value.residual > 0


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_round_trip_random_normalized_nets(backend, monkeypatch):
    monkeypatch.setenv("FLOWCAP_NUMBA", "1" if backend == "numba" else "0")
    rng = np.random.default_rng(2)
    for seed in range(20):
        q = int(rng.integers(1, 4))
        net = IResNet.mlp(q, 3, hidden=(8,), seed=seed)
        net.normalize(c=0.9, iters=50)
        x = rng.uniform(-10, 10, size=(50, q))
        back, res = net.inverse(net.forward(x), tol=1e-10, max_iters=100, return_residual=True)
        assert np.max(np.abs(back - x)) <= 1e-8
        assert res <= 1e-10 * 10


def test_order_preservation_examples():
    rng = np.random.default_rng(3)
    pairs = rng.uniform(-10, 10, size=(1000, 2))
    net = IResNet.mlp(1, 3, hidden=(8,), seed=1)
    net.normalize()
    assert check_order_preservation(net, pairs) == 0
    assert check_order_preservation(IResNet([linear_block([[0.0]])]), pairs) == 0
    assert check_order_preservation(IResNet([linear_block([[-2.0]])]), pairs) > 0


def test_width1_single_block_slope_between_0_and_2():
    rng = np.random.default_rng(4)
    for seed in range(20):
        net = IResNet.mlp(1, 1, hidden=(8,), seed=seed)
        for W in net.blocks[0].net.weights():
            W.data *= 4.0
        net.normalize()
        a = rng.uniform(-10, 10, size=(1000, 1))
        b = rng.uniform(-10, 10, size=(1000, 1))
        keep = np.abs(a - b)[:, 0] > 1e-6
        slope = ((net.forward(b) - net.forward(a)) / (b - a))[keep]
        assert np.all(slope > 0) and np.all(slope < 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_order_preserved_property(seed, shift):
    net = IResNet.linear(1, 5, seed=seed)
    for b in net.blocks:
        b.net.weights()[0].data[...] = np.random.default_rng(seed).uniform(-3, 3)
    net.normalize()
    x = np.array([[shift], [shift + 1e-3]])
    y = net.forward(x)
    assert y[1, 0] > y[0, 0]


def test_function_block_and_serialization():
    net = IResNet.mlp(2, 2, hidden=(4,), seed=5).normalize()
    again = model_from_dict(net.to_dict())
    x = np.random.default_rng(0).normal(size=(7, 2))
    assert np.array_equal(again.forward(x), net.forward(x))
    doc = net.to_dict()
    assert all({"c", "power_iters"} <= set(b) for b in doc["blocks"])
    fb = FunctionBlock(lambda z: 0.5 * np.sin(z), 2, lipschitz=0.5)
    mixed = IResNet([fb, *net.blocks])
    y = mixed.forward(x)
    assert np.max(np.abs(mixed.inverse(y) - x)) <= 1e-8
