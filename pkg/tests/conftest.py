import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from countgnn.graph import LabeledDigraph, LabelVocab, undirected_to_directed

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def uniform_triangle() -> LabeledDigraph:
    return undirected_to_directed([0, 0, 0], [(0, 1, 0), (1, 2, 0), (0, 2, 0)], LabelVocab(1, 1))


def uniform_k4() -> LabeledDigraph:
    pairs = [(i, j, 0) for i in range(4) for j in range(i + 1, 4)]
    return undirected_to_directed([0] * 4, pairs, LabelVocab(1, 1))


def random_graph(rng, n, m, vocab, self_loops=True) -> LabeledDigraph:
    labels = rng.integers(0, vocab.num_node_labels, size=n)
    src = rng.integers(0, n, size=m)
    dst = rng.integers(0, n, size=m)
    if not self_loops and n > 1:
        clash = src == dst
        dst[clash] = (dst[clash] + 1) % n
    return LabeledDigraph(labels, src, dst, rng.integers(0, vocab.num_edge_labels, size=m), vocab)


@st.composite
def digraphs(draw, max_nodes=6, max_edges=10, vocab=LabelVocab(2, 2), min_nodes=1, min_edges=0):
    """Small labelled multigraphs, self-loops and parallel edges included."""
    n = draw(st.integers(min_nodes, max_nodes))
    m = draw(st.integers(min_edges, max_edges))
    node = st.integers(0, n - 1)
    edges = draw(st.lists(st.tuples(node, node, st.integers(0, vocab.num_edge_labels - 1)), min_size=m, max_size=m))
    labels = draw(st.lists(st.integers(0, vocab.num_node_labels - 1), min_size=n, max_size=n))
    if edges:
        s, d, l = zip(*edges)
    else:
        s = d = l = ()
    return LabeledDigraph(labels, s, d, l, vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
