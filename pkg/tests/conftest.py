import numpy as np
import pytest

from unigraph.graph import Graph, disjoint_union, complete_graph, cycle_graph, make_rng, random_graph


@pytest.fixture
def rng():
    return make_rng(1234)


def two_triangles():
    return disjoint_union(complete_graph(3), complete_graph(3))


def random_connected_graph(n, p, rng, tries=100):
    for _ in range(tries):
        g = random_graph(n, p, rng)
        if g.num_components() == 1:
            return g
    raise RuntimeError("no connected sample")


def random_graphs(count, rng, n_range=(3, 8), p=0.5):
    return [random_graph(int(rng.integers(n_range[0], n_range[1] + 1)), p, rng) for _ in range(count)]


# acceptance criterion number -> one-line verdict, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
