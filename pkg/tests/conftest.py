import numpy as np
import pytest

from madp.hypergraph import Hypergraph

# Toy email graph: users A, B, C, D -> 0, 1, 2, 3; edges e1..e5 -> 0..4.
A, B, C, D = range(4)
TOY_EDGES = [(A, B), (A, B, C), (B, D), (C, B), (D, C)]
TOY_TEXT = 'users=4\n0\t0,1\n1\t0,1,2\n2\t1,3\n3\t2,1\n4\t3,2\n'


@pytest.fixture
def toy():
    return Hypergraph.from_edges(4, TOY_EDGES)


def random_hypergraph(rng: np.random.Generator, max_edges=200, max_arity=5, max_users=None) -> Hypergraph:
    n = int(rng.integers(1, max_edges + 1))
    m = int(rng.integers(1, max_users or max(2, n) + 1))
    edges = []
    for _ in range(n):
        a = int(rng.integers(1, min(max_arity, m) + 1))
        edges.append(tuple(rng.choice(m, a, replace=False).tolist()))
    return Hypergraph.from_edges(m, edges)


def pytest_terminal_summary(terminalreporter):
    """Echoes the acceptance verdicts (one line per criterion) after the run."""
    import sys
    mod = sys.modules.get('test_acceptance')
    lines = getattr(mod, 'REPORT', None)
    if lines:
        terminalreporter.section('acceptance criteria')
        for line in sorted(lines):
            terminalreporter.write_line(line)
