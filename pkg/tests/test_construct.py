import math

import numpy as np
import pytest

from flowcap.autodiff import make_rng
from flowcap.construct import (
    REGISTRY,
    EmbeddingOracle,
    OffImageError,
    bump_f,
    bump_f_prime,
    bump_g,
    bump_g_prime,
    build_iresnet_for,
    cap_field,
    counterexample_suite,
    embed_path,
    get_homeomorphism,
    integrate_embedding,
    linear_cap,
    min_path_separation,
    oracle_field,
    residual_lipschitz_audit,
)
from flowcap.mlp import Mlp
from flowcap.odenet import OdeBlock, integrate
from flowcap.persist import model_from_dict


def oracle(name):
    return EmbeddingOracle(get_homeomorphism(name))


def test_registry_lookup():
    assert set(REGISTRY) == {"identity", "negation", "swap2d", "radial-swap"}
    with pytest.raises(KeyError, match="registered"):
        get_homeomorphism("nope")


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_homeomorphism_invariants(name):
    report = get_homeomorphism(name).verify(n=2000)
    assert report["ok"], report


def test_bump_functions():
    assert bump_f(0.0) == 0.0 and bump_f(1.0) == 1.0
    s = np.linspace(0, 3, 301)
    g = bump_g(s)
    on_int = np.isclose(s, np.round(s), atol=1e-12)
    assert np.all(np.abs(g[on_int]) <= 1e-15) and np.all(g[~on_int] > 0)
    for k in range(3):
        assert abs(bump_f_prime(float(k))) <= 1e-15 and abs(bump_g_prime(float(k))) <= 1e-14
    # derivative check against central differences
    for t in np.linspace(0.05, 0.95, 19):
        h = 1e-6
        assert abs((bump_f(t + h) - bump_f(t - h)) / (2 * h) - bump_f_prime(t)) <= 1e-8
        assert abs((bump_g(t + h) - bump_g(t - h)) / (2 * h) - bump_g_prime(t)) <= 1e-8


def test_embed_path_examples():
    o = oracle("negation")
    x = np.array([2.0])
    assert embed_path(o, x, 0.0).tolist() == [2.0, 0.0]
    assert np.allclose(embed_path(o, x, 1.0), [-2.0, 0.0], atol=1e-15)
    assert np.allclose(embed_path(o, x, 0.5), [0.0, -8.0], atol=1e-14)
    # beyond [0, 1] the path restarts from h(x)
    assert np.allclose(embed_path(o, x, 1.5), embed_path(o, -x, 0.5), atol=0)
    assert np.allclose(embed_path(o, x, -1.0), [-2.0, 0.0], atol=1e-15)


def test_oracle_field_examples():
    o = oracle("negation")
    assert oracle_field(o, np.array([7.0, 3.0]), 0.0).tolist() == [0.0, 0.0]
    v = oracle_field(o, np.array([0.0, -8.0]), 0.5)
    assert np.allclose(v, [-2 * math.pi, 0.0], atol=1e-12)
    # tends to zero as t -> 1 along the path
    x = np.array([2.0])
    near = [np.max(np.abs(oracle_field(o, embed_path(o, x, t), t))) for t in (0.9, 0.99, 0.999)]
    # f'(s) and g'(s) vanish linearly at s = 1
    assert near[0] > near[1] > near[2] and near[2] < 0.2 and near[1] / near[2] > 9


def test_oracle_field_off_image_rejected():
    # for p = 1 every state is on some path at mid times; p = 2 leaves room to miss
    o = oracle("swap2d")
    on = embed_path(o, np.array([1.0, 2.0]), 0.5)
    oracle_field(o, on, 0.5)
    with pytest.raises(OffImageError):
        oracle_field(o, on + np.array([0.0, 0.0, 0.5, 0.0]), 0.5)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_field_matches_path_derivative(name):
    o = oracle(name)
    rng = make_rng(1)
    x = o.h.sample(50, rng)
    for t in (0.01, 0.1, 0.3, 0.5, 0.77, 0.95, 0.995):
        h = 1e-6
        fd = (embed_path(o, x, t + h) - embed_path(o, x, t - h)) / (2 * h)
        assert np.max(np.abs(oracle_field(o, embed_path(o, x, t), t) - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_integrate_embedding_endpoint(name):
    o = oracle(name)
    x = o.h.sample(100, make_rng(2))
    end = integrate_embedding(o, x, 1000)
    want = np.concatenate([o.h(x), np.zeros_like(x)], axis=-1)
    assert np.max(np.abs(end - want)) <= 1e-3


def test_integrate_embedding_examples():
    assert np.allclose(integrate_embedding(oracle("negation"), np.array([2.0]), 1000), [-2.0, 0.0], atol=1e-3)
    assert integrate_embedding(oracle("identity"), np.array([3.0]), 10).tolist() == [3.0, 0.0]
    assert np.allclose(integrate_embedding(oracle("swap2d"), np.array([1.0, 2.0]), 1000), [2, 1, 0, 0], atol=1e-3)


@pytest.mark.parametrize("name", ["negation", "swap2d", "radial-swap"])
def test_paths_do_not_meet(name):
    o = oracle(name)
    rng = make_rng(3)
    a, b = o.h.sample(1000, rng), o.h.sample(1000, rng)
    sep = min_path_separation(o, a, b, np.linspace(0, 1, 100))
    assert np.all(sep >= 1e-6 * np.max(np.abs(a - b), axis=-1))


def test_boundary_field_is_zero():
    for name in REGISTRY:
        o = oracle(name)
        s = np.random.default_rng(0).normal(size=(20, 2 * o.p))
        assert not np.any(oracle_field(o, s, 0.0)) and not np.any(oracle_field(o, s, 1.0))


def test_constructed_negation_trace():
    net = build_iresnet_for(get_homeomorphism("negation"), 1.0)
    assert len(net) == 5 and net.T == 2
    trace = [s.tolist() for s in net.trace(np.array([[3.0, 0.0]]))]
    assert trace == [[[3.0, 0.0]], [[3.0, -3.0]], [[1.0, -3.0]], [[-1.0, -3.0]], [[-3.0, -3.0]], [[-3.0, 0.0]]]


@pytest.mark.parametrize("k,layers", [(1, 5), (2.5, 6), (7, 11)])
def test_layer_count(k, layers):
    assert len(build_iresnet_for(get_homeomorphism("negation"), k)) == layers == math.floor(k + 4)


@pytest.mark.parametrize("name", ["identity", "negation", "swap2d"])
def test_constructed_exactness(name):
    h = get_homeomorphism(name)
    net = build_iresnet_for(h)
    x = h.sample(1000, make_rng(4))
    y = net.forward(np.concatenate([x, np.zeros_like(x)], axis=-1))
    assert np.max(np.abs(y - np.concatenate([h(x), np.zeros_like(x)], axis=-1))) <= 1e-12


def test_middle_increments_telescope():
    h = get_homeomorphism("swap2d")
    net = build_iresnet_for(h)
    x = h.sample(200, make_rng(5))
    states = net.trace(np.concatenate([x, np.zeros_like(x)], axis=-1))
    total = states[-2][:, :2] - states[1][:, :2]
    assert np.max(np.abs(total - (h(x) - x))) <= 1e-12


def test_audit_examples():
    neg = residual_lipschitz_audit(build_iresnet_for(get_homeomorphism("negation"), 1.0), samples=10_000)
    assert neg.max_ratios[0] == pytest.approx(1.0, abs=1e-9)
    for r in neg.max_ratios[1:-1]:
        assert r <= 2 / 3 + 1e-12
    strict = residual_lipschitz_audit(build_iresnet_for(get_homeomorphism("negation"), 1.0, strict=True))
    assert strict.all_below(1.0)
    ident = residual_lipschitz_audit(build_iresnet_for(get_homeomorphism("identity"), 1.0))
    assert ident.max_ratios[0] == 0.0 and ident.max_ratios[-1] == 0.0
    assert neg.violations(1.0 - 1e-6) and len(neg.violations(1.0 - 1e-6)[0][2]) == 2


def test_constructed_inverse_and_round_trip_serialization():
    net = build_iresnet_for(get_homeomorphism("negation"), 1.0)
    x = net.inverse(np.array([[-3.0, 0.0]]))
    assert np.max(np.abs(x - [[3.0, 0.0]])) <= 1e-8
    again = model_from_dict(net.to_dict())
    assert len(again) == len(net)


def test_cap_field_examples():
    block = OdeBlock(cap_field(lambda x: x**2, 1, 1), 0.0, 1.0, 8)
    end = integrate(block, np.array([[2.0, 0.0]]))
    assert end.tolist() == [[2.0, 4.0]]
    assert (end @ linear_cap(1, 1).T).tolist() == [[4.0]]
    zero = OdeBlock(cap_field(lambda x: 0.0 * x, 1, 1), 0.0, 1.0, 7)
    odd = OdeBlock(cap_field(lambda x: x**2, 1, 1), 0.0, 1.0, 7)
    assert abs(integrate(odd, np.array([[2.0, 0.0]]))[0, 1] - 4.0) <= 1e-12
    assert integrate(zero, np.array([[1.5, 0.0]])).tolist() == [[1.5, 0.0]]


def test_cap_field_random_mlp():
    F = Mlp([3, 8, 2], seed=6)
    block = OdeBlock(cap_field(F, 3, 2), 0.0, 1.0, 10)
    x = np.random.default_rng(6).normal(size=(20, 3))
    end = integrate(block, np.concatenate([x, np.zeros((20, 2))], axis=1))
    assert np.array_equal(end[:, :3], x)
    assert np.max(np.abs(end[:, 3:] - F(x))) <= 1e-12
    assert linear_cap(2, 3).tolist() == [[0, 0, 1, 0, 0], [0, 0, 0, 1, 0], [0, 0, 0, 0, 1]]


def test_counterexample_suite():
    suite = {c.name: c for c in counterexample_suite()}
    assert set(suite) >= {"negation", "radial-swap"}
    neg = suite["negation"].h
    assert neg(np.array([0.0])).tolist() == [0.0] and neg(np.array([1.0])).tolist() == [-1.0]
    rs = suite["radial-swap"].h
    assert np.allclose(rs(np.array([1.0, 0.0])), [1.0, 0.0], atol=1e-15)
    assert np.allclose(rs(np.array([0.5, 0.0])), [1.5, 0.0], atol=1e-15)
    for c in suite.values():
        assert c.check()["ok"]
