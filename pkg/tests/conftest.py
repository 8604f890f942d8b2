import numpy as np
import pytest

from distill_uq import numerics as nx
from distill_uq.graphdata import Graph

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error; ``floor`` keeps exactly-zero gradients from dividing noise by noise."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(loss_fn, node: nx.Node, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` with respect to ``node.value``."""
    grad = np.zeros_like(node.value)
    flat = node.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().value)
        flat[i] = orig - h
        down = float(loss_fn().value)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def check_gradients(loss_fn, params, h: float = 1e-5, fd_fn=None) -> float:
    """Largest relative error between backprop and finite differences over ``params``.

    ``fd_fn`` is the function to difference when it differs from ``loss_fn``
    (same value at the base point, with stop-gradient targets frozen).
    """
    for p in params:
        p.zero_grad()
    nx.backward(loss_fn())
    analytic = {id(p): p.grad.copy() for p in params}
    fd_fn = fd_fn or loss_fn
    worst = 0.0
    for p in params:
        worst = max(worst, relative_error(analytic[id(p)], numeric_grad(fd_fn, p, h)))
    return worst


def random_graph(rng: np.random.Generator, n_nodes: int, dim: int, label: int = 0, p_edge: float = 0.4) -> Graph:
    edges = [(s, d) for s in range(n_nodes) for d in range(n_nodes) if s != d and rng.random() < p_edge]
    return Graph(rng.uniform(-1, 1, (n_nodes, dim)), np.array(edges, dtype=np.int64).reshape(-1, 2), label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
