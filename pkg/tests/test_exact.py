import itertools
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import digraphs, random_graph, uniform_k4, uniform_triangle
from countgnn.exact import (
    BRUTE_FORCE_MAX_NODES,
    CountTimeout,
    brute_force_count,
    count_automorphisms,
    count_embeddings,
    count_subgraphs,
    is_isomorphic,
    matching_order,
)
from countgnn.graph import LabeledDigraph, LabelVocab, build_graph, permute_nodes

V1 = LabelVocab(1, 1)


def test_triangle_in_k4():
    r = count_subgraphs(uniform_triangle(), uniform_k4())
    assert (r.subgraphs, r.embeddings, r.automorphisms) == (4, 24, 6)
    assert brute_force_count(uniform_triangle(), uniform_k4()).counts() == r.counts()


def test_single_edge_counts_matching_edges():
    vocab = LabelVocab(2, 2)
    q = build_graph([0, 1], [(0, 1, 1)], vocab)
    g = build_graph([0, 1, 0, 1, 0, 1], [(0, 1, 1), (2, 3, 1), (4, 5, 1)], vocab)
    assert count_embeddings(q, g) == 3
    assert count_subgraphs(q, g).subgraphs == 3
    # wrong edge label or direction does not match
    g2 = build_graph([0, 1, 0, 1], [(0, 1, 0), (3, 2, 1)], vocab)
    assert count_subgraphs(q, g2).subgraphs == 0


@pytest.mark.parametrize(
    "q,expected",
    [
        (uniform_triangle(), 6),
        (build_graph([0, 0, 0], [(0, 1, 0), (1, 2, 0), (2, 0, 0)], V1), 3),
        (build_graph([0, 1], [(0, 1, 0)], LabelVocab(2, 1)), 1),
    ],
)
def test_automorphisms(q, expected):
    assert count_automorphisms(q) == expected
    assert count_embeddings(q, q) == expected


def test_absent_label_gives_zero():
    q = build_graph([2, 0], [(0, 1, 0)], LabelVocab(3, 1))
    g = build_graph([0, 1, 0], [(0, 1, 0), (1, 2, 0)], LabelVocab(3, 1))
    assert count_subgraphs(q, g).subgraphs == 0


def test_parallel_edges_need_distinct_images():
    q = build_graph([0, 0], [(0, 1, 0), (0, 1, 0)], V1)
    g1 = build_graph([0, 0], [(0, 1, 0)], V1)
    g3 = build_graph([0, 0], [(0, 1, 0)] * 3, V1)
    assert count_embeddings(q, g1) == 0
    # 3 * 2 ordered choices of distinct graph edges; q has 2 automorphisms (swap its edges)
    assert count_embeddings(q, g3) == 6
    assert count_automorphisms(q) == 2
    assert count_subgraphs(q, g3).subgraphs == 3
    assert brute_force_count(q, g3).counts() == count_subgraphs(q, g3).counts()


def test_non_induced_semantics():
    path = build_graph([0, 0, 0], [(0, 1, 0), (1, 2, 0)], V1)
    cycle = build_graph([0, 0, 0], [(0, 1, 0), (1, 2, 0), (2, 0, 0)], V1)
    assert count_subgraphs(path, cycle).subgraphs == 3


def test_empty_query_and_oversized_query():
    q0 = LabeledDigraph([], [], [], [], V1)
    assert count_embeddings(q0, uniform_k4()) == 1
    assert count_embeddings(uniform_k4(), uniform_triangle()) == 0


def test_budget_exhaustion_raises():
    with pytest.raises(CountTimeout) as info:
        count_subgraphs(uniform_triangle(), uniform_k4(), budget=3)
    assert info.value.steps >= 3


def test_brute_force_refuses_large_graphs():
    big = LabeledDigraph([0] * (BRUTE_FORCE_MAX_NODES + 1), [], [], [], V1)
    with pytest.raises(ValueError):
        brute_force_count(uniform_triangle(), big)


def test_matching_order_is_connected_first():
    q = build_graph([0] * 5, [(0, 1, 0), (1, 2, 0), (2, 3, 0), (3, 4, 0), (1, 3, 0)], V1)
    order, parent_pos, _ = matching_order(q)
    assert sorted(order) == list(range(5))
    assert parent_pos[0] == -1
    assert all(p >= 0 for p in parent_pos[1:])


def _random_pair(seed):
    rng = np.random.default_rng(seed)
    vocab = LabelVocab(int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    nq = int(rng.integers(1, 5))
    q = random_graph(rng, nq, int(rng.integers(0, 6)), vocab)
    ng = int(rng.integers(1, 9))
    g = random_graph(rng, ng, int(rng.integers(0, 20)), vocab)
    return q, g


@pytest.mark.parametrize("seed", range(60))
def test_matches_brute_force_on_random_pairs(seed):
    q, g = _random_pair(seed)
    assert count_subgraphs(q, g).counts() == brute_force_count(q, g).counts()


@given(digraphs(max_nodes=4, max_edges=6), digraphs(max_nodes=7, max_edges=14))
def test_matches_brute_force_property(q, g):
    r = count_subgraphs(q, g)
    assert r.counts() == brute_force_count(q, g).counts()
    assert r.embeddings == r.subgraphs * r.automorphisms


@given(digraphs(max_nodes=4, max_edges=5), digraphs(max_nodes=7, max_edges=14), st.randoms(use_true_random=False))
def test_relabelling_invariance(q, g, r):
    pq = list(range(q.num_nodes))
    pg = list(range(g.num_nodes))
    r.shuffle(pq)
    r.shuffle(pg)
    assert count_subgraphs(permute_nodes(q, pq), permute_nodes(g, pg)).counts() == count_subgraphs(q, g).counts()


@given(digraphs(max_nodes=4, max_edges=5), digraphs(max_nodes=6, max_edges=10), st.data())
def test_adding_edges_never_decreases(q, g, data):
    s = data.draw(st.integers(0, g.num_nodes - 1))
    d = data.draw(st.integers(0, g.num_nodes - 1))
    lab = data.draw(st.integers(0, g.vocab.num_edge_labels - 1))
    bigger = LabeledDigraph(g.node_labels, [*g.src, s], [*g.dst, d], [*g.edge_labels, lab], g.vocab)
    assert count_embeddings(q, bigger) >= count_embeddings(q, g)


@given(digraphs(max_nodes=5, max_edges=8), st.randoms(use_true_random=False))
def test_isomorphic_to_own_permutation(g, r):
    perm = list(range(g.num_nodes))
    r.shuffle(perm)
    assert is_isomorphic(g, permute_nodes(g, perm))


def test_not_isomorphic():
    a = build_graph([0, 0, 0], [(0, 1, 0), (1, 2, 0)], V1)
    b = build_graph([0, 0, 0], [(0, 1, 0), (0, 2, 0)], V1)
    assert not is_isomorphic(a, b)


def test_numpy_fallback_agrees():
    # the pure-numpy kernels are selected at import time, so run them in a fresh interpreter
    code = (
        "import numpy as np, json\n"
        "from countgnn import _kernels\n"
        "from countgnn.exact import count_subgraphs\n"
        "from countgnn.graph import LabeledDigraph, LabelVocab\n"
        "assert _kernels.BACKEND == 'numpy'\n"
        "out = []\n"
        "for seed in range(25):\n"
        "    rng = np.random.default_rng(seed)\n"
        "    v = LabelVocab(2, 2)\n"
        "    def rg(n, m):\n"
        "        return LabeledDigraph(rng.integers(0, 2, n), rng.integers(0, n, m), rng.integers(0, n, m), rng.integers(0, 2, m), v)\n"
        "    out.append(count_subgraphs(rg(3, 3), rg(8, 20)).counts())\n"
        "print(json.dumps(out))\n"
    )
    env = dict(os.environ, COUNTGNN_DISABLE_NUMBA="1")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    fallback = [tuple(x) for x in __import__("json").loads(res.stdout)]
    expected = []
    for seed in range(25):
        rng = np.random.default_rng(seed)
        v = LabelVocab(2, 2)

        def rg(n, m):
            return LabeledDigraph(rng.integers(0, 2, n), rng.integers(0, n, m), rng.integers(0, n, m), rng.integers(0, 2, m), v)

        expected.append(tuple(count_subgraphs(rg(3, 3), rg(8, 20)).counts()))
    assert fallback == expected


def test_brute_force_subgraphs_are_independent_of_embeddings():
    # hand count: directed 2-paths a->b->c in a complete digraph on 3 nodes, uniform labels
    k3 = build_graph([0] * 3, [(i, j, 0) for i, j in itertools.permutations(range(3), 2)], V1)
    path = build_graph([0] * 3, [(0, 1, 0), (1, 2, 0)], V1)
    r = brute_force_count(path, k3)
    assert r.subgraphs == 6 and r.embeddings == 6 and r.automorphisms == 1
