import math

import numpy as np
import pytest

from scl import compute as C
from scl.compute import Graph, backward
from scl.errors import ContractError
from scl.gradnorm import apply_decay_after_norm
from scl.layers import build_dense_fc
from scl.masking import MaskedParameter, mask_variable_gradient, unit_step
from scl.objective import (
    connectivity_degree,
    cross_entropy,
    cross_entropy_value,
    l2_penalty,
    mse,
    total_objective,
)

from conftest import grad_check


def test_cross_entropy_uniform_is_log_k():
    assert cross_entropy_value(np.zeros((3, 10)), np.array([0, 4, 9])) == pytest.approx(2.302585, abs=1e-6)


@pytest.mark.parametrize("k", range(2, 17))
def test_cross_entropy_uniform_all_k(k):
    assert cross_entropy_value(np.full((2, k), 3.7), np.array([0, k - 1])) == pytest.approx(math.log(k), rel=1e-12)


def test_cross_entropy_saturated():
    z = np.zeros((1, 10))
    z[0, 3] = 50
    assert cross_entropy_value(z, np.array([3])) == pytest.approx(0, abs=1e-20)


def test_cross_entropy_matches_unstabilized(rng):
    z = rng.standard_normal((4, 3))
    y = np.array([2, 0, 1, 1])
    direct = -np.mean(np.log(np.exp(z[np.arange(4), y]) / np.exp(z).sum(axis=1)))
    assert cross_entropy_value(z, y) == pytest.approx(direct, rel=1e-12)
    assert cross_entropy_value(z, y) >= 0


def test_cross_entropy_bad_labels():
    with pytest.raises(ContractError):
        cross_entropy_value(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ContractError):
        cross_entropy_value(np.zeros((2, 3)), np.array([-1, 0]))


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    r = np.random.default_rng(seed)
    n, k = r.integers(1, 8), r.integers(2, 8)
    labels = r.integers(0, k, n)

    def build(g, leaves):
        return cross_entropy(leaves[0], labels)

    grad_check(build, [r.standard_normal((n, k))], rng=r)


def test_mse_gradient(rng):
    target = rng.standard_normal((4, 3))
    grad_check(lambda g, l: mse(l[0], target), [rng.standard_normal((4, 3))])


def test_connectivity_degree():
    assert connectivity_degree([np.array([[1, 0, 1, 1]])]) == 3
    assert connectivity_degree([np.zeros((3, 3)), np.zeros(5)]) == 0
    with pytest.raises(ContractError):
        connectivity_degree([np.array([0.5, 1])])


def test_degree_of_fresh_dense_fc():
    net = build_dense_fc(seed=0)
    assert connectivity_degree([unit_step(p.mask) for p in net.params]) == 117152


def test_degree_bounds(rng):
    masks = [rng.integers(0, 2, (5, 7)), rng.integers(0, 2, 11)]
    d = connectivity_degree(masks)
    total = sum(m.size for m in masks)
    assert 0 <= d <= total
    assert d == total - sum(int((m == 0).sum()) for m in masks)


def test_l2_penalty(rng):
    assert l2_penalty([np.array([[3.0, 4.0]])]) == 25
    assert l2_penalty([np.zeros(4)]) == 0
    ws = [rng.standard_normal((3, 4)), rng.standard_normal(6)]
    assert l2_penalty(ws) == pytest.approx(sum(float((w * w).sum()) for w in ws), rel=1e-12)


def test_total_objective():
    assert total_objective(2.3, 100, 25, 0.01, 0.001) == pytest.approx(3.325)
    assert total_objective(2.3, 100, 25, 0.0, 0.0) == 2.3
    with pytest.raises(ContractError):
        total_objective(1, 1, 1, -1, 0)


def test_total_objective_monotone_in_degree():
    values = [total_objective(0.7, d, 3.0, 0.05, 1e-4) for d in range(0, 1000, 37)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_decay_gradient_is_constant_lambda1(rng):
    # lambda1 * sum(H(m)) differentiated through the unit proxy: d/dm = lambda1 everywhere
    lam = 0.03
    m = rng.standard_normal(20)
    g = Graph()
    ml = g.leaf(m, dtype=np.float64)
    ones = g.leaf(np.ones(20), dtype=np.float64)
    from scl.masking import masked_weight

    node = masked_weight(ones, ml)  # H(m) with unit weights
    loss = C.mul(C.sum_all(node), g.leaf(lam, dtype=np.float64))
    np.testing.assert_allclose(backward(g, loss)[ml], lam)


def test_mask_gradient_pipeline_split(rng):
    # Norm(task) + lambda1 equals what you get by recomputing both pieces separately
    w = rng.standard_normal((3, 4)).astype(np.float32)
    gw = rng.standard_normal((3, 4)).astype(np.float32)
    p = MaskedParameter(w, np.ones((3, 4), dtype=np.float32))
    task = mask_variable_gradient(gw, p)
    s = np.sqrt((task**2).mean(axis=1, keepdims=True))
    final = apply_decay_after_norm(task / (s + 1e-8), 0.02)
    np.testing.assert_allclose(final - 0.02, task / (s + 1e-8), rtol=1e-6)
