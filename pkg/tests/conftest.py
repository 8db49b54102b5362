import os

import numpy as np
import pytest

from scl import compute as C
from scl.compute import Graph


def grad_check(build, arrays, h=1e-6, rtol=1e-3, atol=1e-5, rng=None):
    """Compare backward against central differences for every array in ``arrays``.

    ``build(graph, leaves)`` must return a node; a fixed random projection
    turns it into a scalar.  Everything runs in float64.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = {}

    def scalar(vals):
        g = Graph()
        leaves = [g.leaf(v, dtype=np.float64) for v in vals]
        out = build(g, leaves)
        if "r" not in probe:
            probe["r"] = rng.standard_normal(out.shape)
        loss = C.sum_all(C.mul(out, g.leaf(probe["r"], dtype=np.float64)))
        return g, leaves, loss

    g, leaves, loss = scalar(arrays)
    grads = C.backward(g, loss)
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            vals = list(arrays)
            vals[i] = x
            return scalar(vals)[2].value
        numeric = C.finite_difference_gradient(f, arrays[i].copy(), h)
        np.testing.assert_allclose(grads[leaf], numeric, rtol=rtol, atol=atol, err_msg=f"input {i}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MNIST_DIR = os.environ.get("SCL_DATA_DIR", "/root/data/mnist")


@pytest.fixture(scope="session")
def mnist():
    from scl.data import load_mnist

    if not os.path.isdir(MNIST_DIR):
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    return load_mnist(MNIST_DIR)


# acceptance criteria report ----------------------------------------------------

CRITERIA = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
