import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import digraphs
from countgnn.graph import (
    LabeledDigraph,
    LabelTable,
    LabelVocab,
    SchemaError,
    StructureError,
    VocabError,
    build_graph,
    from_json,
    graph_to_dict,
    permute_nodes,
    preceding_edges,
    reverse_edges,
    to_json,
    undirected_to_directed,
)

V1 = LabelVocab(1, 1)


def edge_list(g):
    return list(zip(g.src.tolist(), g.dst.tolist(), g.edge_labels.tolist()))


def test_single_edge_in_index():
    g = build_graph([0, 0], [(0, 1, 0)], V1)
    assert g.in_index(1) == [0]
    assert g.in_index(0) == []
    assert g.out_index(0) == [0]


def test_parallel_edges_are_kept():
    g = build_graph([0, 0], [(0, 1, 0), (0, 1, 0)], V1)
    assert g.num_edges == 2
    assert g.in_index(1) == [0, 1]


def test_dangling_endpoint_rejected():
    with pytest.raises(StructureError):
        build_graph([0, 0], [(0, 5, 0)], V1)


@pytest.mark.parametrize("node_label,edge_label", [(3, 0), (0, 2), (-1, 0)])
def test_label_outside_vocab(node_label, edge_label):
    with pytest.raises(VocabError):
        build_graph([node_label, 0], [(0, 1, edge_label)], LabelVocab(2, 2))


def test_vocab_needs_a_label():
    with pytest.raises(VocabError):
        LabelVocab(0, 1)


def test_node_records_with_ids():
    g = build_graph([{"id": 1, "label": 1}, {"id": 0, "label": 0}], [{"src": 1, "dst": 0, "label": 0}], LabelVocab(2, 1))
    assert g.node_labels.tolist() == [0, 1]
    with pytest.raises(StructureError):
        build_graph([{"id": 0, "label": 0}, {"id": 2, "label": 0}], [], V1)


def test_undirected_doubling():
    tri = undirected_to_directed([0, 0, 0], [(0, 1, 0), (1, 2, 0), (0, 2, 0)], V1)
    assert tri.num_edges == 6
    one = undirected_to_directed([0, 0], [(0, 1, 0)], V1)
    assert sorted(edge_list(one)) == [(0, 1, 0), (1, 0, 0)]
    empty = undirected_to_directed([0, 0], [], V1)
    assert empty.num_edges == 0


def test_preceding_edges_examples():
    path = build_graph([0, 0, 0], [(0, 1, 0), (1, 2, 0)], V1)
    assert preceding_edges(path, 1) == [0]
    assert preceding_edges(build_graph([0, 0], [(0, 1, 0)], V1), 0) == []
    doubled = undirected_to_directed([0, 0], [(0, 1, 0)], V1)
    fwd = edge_list(doubled).index((0, 1, 0))
    back = edge_list(doubled).index((1, 0, 0))
    assert preceding_edges(doubled, fwd) == [back]
    assert preceding_edges(doubled, fwd, exclude_backtrack=True) == []
    with pytest.raises(StructureError):
        preceding_edges(doubled, 7)


def test_self_loop_precedes_itself():
    g = build_graph([0], [(0, 0, 0)], V1)
    assert preceding_edges(g, 0) == [0]


@given(digraphs())
def test_in_index_partitions_edges(g):
    seen = sorted(e for u in range(g.num_nodes) for e in g.in_index(u))
    assert seen == list(range(g.num_edges))
    for u in range(g.num_nodes):
        assert all(g.dst[e] == u for e in g.in_index(u))
        assert g.in_index(u) == sorted(g.in_index(u))


@given(digraphs())
def test_preceding_excludes_self_unless_loop(g):
    for e in range(g.num_edges):
        if e in preceding_edges(g, e):
            assert g.src[e] == g.dst[e]


@given(digraphs())
def test_json_round_trip(g):
    assert from_json(to_json(g)) == g
    assert to_json(from_json(to_json(g))) == to_json(g)


def test_round_trip_with_features():
    rng = np.random.default_rng(3)
    g = LabeledDigraph([0, 1], [0], [1], [0], LabelVocab(2, 1), rng.normal(size=(2, 3)), rng.normal(size=(1, 2)))
    h = from_json(to_json(g))
    assert h == g
    assert np.array_equal(h.node_features, g.node_features)
    assert h.edge_features.tobytes() == g.edge_features.tobytes()


def test_json_layout_is_fixed():
    g = build_graph([0, 1], [(0, 1, 0)], LabelVocab(2, 1))
    obj = json.loads(to_json(g))
    assert list(obj) == ["directed", "num_node_labels", "num_edge_labels", "nodes", "edges"]
    assert obj["nodes"] == [{"id": 0, "label": 0}, {"id": 1, "label": 1}]
    assert obj["edges"] == [{"src": 0, "dst": 1, "label": 0}]


@pytest.mark.parametrize(
    "mutate",
    [
        lambda o: o.pop("edges"),
        lambda o: o["nodes"][0].__setitem__("label", 0.0),
        lambda o: o["nodes"][0].__setitem__("label", True),
        lambda o: o["edges"][0].__setitem__("dst", "1"),
        lambda o: o.__setitem__("num_node_labels", 1.5),
    ],
)
def test_schema_violations(mutate):
    obj = graph_to_dict(build_graph([0, 1], [(0, 1, 0)], LabelVocab(2, 1)))
    mutate(obj)
    with pytest.raises(SchemaError):
        from_json(json.dumps(obj))


def test_malformed_json():
    with pytest.raises(SchemaError):
        from_json("{not json")


def test_one_hot_defaults():
    g = build_graph([1, 0], [(0, 1, 2)], LabelVocab(2, 3))
    assert g.node_features.tolist() == [[0, 1], [1, 0]]
    assert g.edge_features.tolist() == [[0, 0, 1]]


def test_graph_is_immutable():
    g = build_graph([0, 0], [(0, 1, 0)], V1)
    with pytest.raises(AttributeError):
        g.src = np.array([1])
    with pytest.raises(ValueError):
        g.src[0] = 1


@given(digraphs(), st.randoms(use_true_random=False))
def test_permute_then_invert(g, r):
    perm = list(range(g.num_nodes))
    r.shuffle(perm)
    inv = np.argsort(perm)
    assert permute_nodes(permute_nodes(g, perm), inv) == g


def test_reverse_edges_twice():
    g = build_graph([0, 1, 0], [(0, 1, 0), (1, 2, 0)], LabelVocab(2, 1))
    assert edge_list(reverse_edges(g)) == [(1, 0, 0), (2, 1, 0)]
    assert reverse_edges(reverse_edges(g)) == g


def test_label_table_is_stable():
    t = LabelTable()
    assert [t.node_id(s) for s in ("C", "N", "C")] == [0, 1, 0]
    assert t.edge_id("single") == 0
    u = LabelTable.from_json(t.to_json())
    assert u.node_id("N") == 1 and u.node_id("O") == 2
    assert t.vocab() == LabelVocab(2, 1)
