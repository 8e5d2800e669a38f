import math

import numpy as np
import pytest

from flowcap import autodiff as ad
from flowcap.autodiff import Tensor, finite_difference_gradient
from flowcap.odenet import (
    IntegrationError,
    OdeBlock,
    OdeField,
    augment,
    autonomize,
    deaugment,
    grad_adjoint,
    grad_through_solver,
    integrate,
    inverse,
    mlp_field,
)
from flowcap.persist import model_from_dict


def zero_field(q):
    return OdeField.from_function(lambda x, t: x * 0.0, q)


def exp_field():
    return OdeField.from_function(lambda x, t: x, 1)


def linear_field(w):
    wt = Tensor([w], requires_grad=True)
    return OdeField.from_function(lambda x, t: ad.mul(x, wt) if isinstance(x, Tensor) else x * wt.data, 1, params=[wt]), wt


def test_zero_field_is_identity():
    block = OdeBlock(zero_field(1), steps=10)
    assert integrate(block, np.array([5.0])).tolist() == [5.0]
    assert inverse(block, np.array([5.0])).tolist() == [5.0]


def test_exponential_forward_and_inverse():
    block = OdeBlock(exp_field(), 0.0, 1.0, 100)
    assert abs(integrate(block, np.array([1.0]))[0] - math.e) <= 1e-8
    assert abs(inverse(block, np.array([math.e]))[0] - 1.0) <= 1e-8


def test_shear_field_is_exact():
    f = OdeField.from_function(lambda x, t: np.stack([x[..., 0] * 0.0, x[..., 0]], axis=-1), 2)
    out = integrate(OdeBlock(f, steps=3), np.array([1.7, 0.0]))
    assert np.allclose(out, [1.7, 1.7], rtol=0, atol=1e-15)


def test_trajectory_endpoints_and_monotone_times():
    block = OdeBlock(mlp_field(2, (8,), seed=1), 0.0, 1.0, 25)
    x0 = np.array([0.3, -0.2])
    xT, traj = integrate(block, x0, return_trajectory=True)
    assert len(traj) == 26
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(traj.states[0], x0) and np.array_equal(traj.states[-1], xT)
    assert all(b > a for a, b in zip(traj.times, traj.times[1:]))
    _, back = inverse(block, xT, return_trajectory=True)
    assert all(b < a for a, b in zip(back.times, back.times[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_reports_step():
    f = OdeField.from_function(lambda x, t: x * x, 1)
    with pytest.raises(IntegrationError) as err:
        integrate(OdeBlock(f, 0.0, 10.0, 100), np.array([1.0]))
    assert err.value.step >= 0 and "step" in str(err.value)


def test_block_validation():
    with pytest.raises(ValueError):
        OdeBlock(zero_field(1), steps=0)
    with pytest.raises(ValueError):
        OdeBlock(zero_field(1), 1.0, 1.0)
    with pytest.raises(ValueError):
        OdeField(mlp_field(2).net, 3)


def test_round_trip_random_fields_200_steps():
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(20):
        q = int(rng.integers(1, 5))
        block = OdeBlock(mlp_field(q, (16,), seed=seed), 0.0, 1.0, 200)
        x = rng.uniform(-2, 2, size=(100, q))
        worst = max(worst, float(np.max(np.abs(inverse(block, integrate(block, x)) - x))))
    assert worst <= 1e-6


def test_flow_composition():
    block_s = OdeBlock(mlp_field(2, (8,), seed=4), 0.0, 0.4, 40)
    field = block_s.field
    block_t = OdeBlock(field, 0.0, 0.6, 60)
    block_st = OdeBlock(field, 0.0, 1.0, 100)
    ref = OdeBlock(field, 0.0, 1.0, 4000)
    x = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    truth = integrate(ref, x)
    one_shot = np.max(np.abs(integrate(block_st, x) - truth))
    two_shot = np.max(np.abs(integrate(block_t, integrate(block_s, x)) - truth))
    assert two_shot <= 2 * one_shot + 1e-14


def test_trajectories_never_cross_1d():
    rng = np.random.default_rng(2)
    for seed in range(10):
        block = OdeBlock(mlp_field(1, (8,), seed=seed), 0.0, 3.0, 150)
        x0 = np.sort(rng.uniform(-3, 3, size=40)).reshape(-1, 1)
        _, traj = integrate(block, x0, return_trajectory=True)
        for s in traj.states:
            assert np.all(np.diff(s[:, 0]) > 0)


def test_near_coincident_endpoints_imply_near_coincident_starts():
    # bisection for a start whose endpoint matches that of x_a
    block = OdeBlock(mlp_field(1, (8,), seed=3), 0.0, 2.0, 200)
    xa = 0.37
    target = integrate(block, np.array([xa]))[0]
    lo, hi = xa - 1.0, xa + 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if integrate(block, np.array([mid]))[0] < target:
            lo = mid
        else:
            hi = mid
    xb = 0.5 * (lo + hi)
    assert abs(integrate(block, np.array([xb]))[0] - target) <= 1e-9
    assert abs(xb - xa) <= 1e-8


def test_grad_zero_field_matches_hand():
    block = OdeBlock(zero_field(2), steps=5)
    x0 = np.array([1.0, -2.0])
    target = np.array([0.5, 0.5])
    tail = lambda xT: ad.mul(ad.sum_all(ad.square(ad.sub(xT, Tensor(target)))), Tensor(1.0))
    g = grad_through_solver(block, x0, tail)
    assert np.allclose(g.x0, 2 * (x0 - target), rtol=0, atol=1e-15)
    a = grad_adjoint(block, x0, tail)
    assert np.array_equal(a.x0, g.x0)


def test_linear_field_gradient_matches_fd():
    field, w = linear_field(0.7)
    block = OdeBlock(field, 0.0, 1.0, 100)
    x0 = np.array([1.3])
    tail = lambda xT: ad.mse(xT, np.array([2.0]))
    g = grad_through_solver(block, x0, tail)
    fd = finite_difference_gradient(lambda: float(np.mean((integrate(block, x0) - 2.0) ** 2)), [w])
    assert abs(g.params[0][0] - fd[0][0]) / abs(fd[0][0]) <= 1e-6
    a = grad_adjoint(block, x0, tail)
    assert abs(a.params[0][0] - g.params[0][0]) / abs(g.params[0][0]) <= 1e-3


def _rel(a, b):
    a = np.concatenate([np.ravel(v) for v in a])
    b = np.concatenate([np.ravel(v) for v in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_bpts_matches_fd_random_mlp_fields():
    rng = np.random.default_rng(5)
    for seed in range(5):
        q = int(rng.integers(1, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(0, 3))))
        block = OdeBlock(mlp_field(q, hidden, seed=seed), 0.0, 1.0, 20)
        x0 = rng.uniform(-1, 1, size=(3, q))
        target = rng.normal(size=(3, q))
        g = grad_through_solver(block, x0, lambda xT: ad.mse(xT, target))
        fd = finite_difference_gradient(lambda: float(np.mean((integrate(block, x0) - target) ** 2)), block.params())
        assert _rel(g.params, fd) <= 1e-5


def test_adjoint_converges_to_bpts():
    block = OdeBlock(mlp_field(2, (8,), seed=7), 0.0, 1.0, 100)
    x0 = np.array([[0.4, -0.3], [1.0, 0.2]])
    tail = lambda xT: ad.mse(xT, np.zeros((2, 2)))
    errs = []
    for steps in (10, 100):
        block.steps = steps
        errs.append(_rel(grad_adjoint(block, x0, tail).params, grad_through_solver(block, x0, tail).params))
    assert errs[1] <= 1e-3 and errs[1] < errs[0]


def test_autonomize_time_integral():
    f = OdeField.from_function(lambda x, t: x * 0.0 + t, 1, time_dependent=True)
    block = OdeBlock(autonomize(f), 0.0, 1.0, 10)
    assert np.allclose(integrate(block, np.array([0.0, 0.0])), [0.5, 1.0], rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        autonomize(mlp_field(1))


def test_autonomize_matches_original():
    rng = np.random.default_rng(8)
    for seed in range(5):
        f = mlp_field(2, (8,), seed=seed, time_dependent=True)
        a = autonomize(f)
        x = rng.uniform(-1, 1, size=(20, 2))
        assert np.all(a(np.concatenate([x, rng.uniform(0, 1, (20, 1))], axis=1))[:, 2] == 1.0)
        direct = integrate(OdeBlock(f, 0.0, 1.0, 50), x)
        auto = integrate(OdeBlock(a, 0.0, 1.0, 50), augment(x, 1))
        assert np.max(np.abs(auto[:, :2] - direct)) <= 1e-10


def test_augment_and_deaugment():
    assert augment(np.array([3.0]), 1).tolist() == [3.0, 0.0]
    x = np.array([[1.0, 2.0]])
    assert np.array_equal(augment(x, 0), x)
    assert np.array_equal(deaugment(augment(x, 3), 3), x)
    with pytest.raises(ValueError):
        augment(x, -1)


def test_block_serialization_round_trip():
    block = OdeBlock(mlp_field(3, (5,), seed=2, time_dependent=True), 0.0, 2.0, 30)
    doc = block.to_dict()
    assert {"t0", "t1", "steps", "q", "time_dependent"} <= set(doc)
    again = model_from_dict(doc)
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(integrate(again, x), integrate(block, x))
