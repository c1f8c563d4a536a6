"""Labeled directed multigraphs and their JSON form.

A :class:`LabeledDigraph` is used both for query patterns and for input
graphs.  Nodes are dense integer ids ``0..n-1``; edges are stored as parallel
arrays ``src``, ``dst``, ``label`` and are addressed by their position.  The
incoming-edge index (``in_index``) is what edge-centric message passing walks:
the edges preceding ``<u, v>`` are exactly the edges whose destination is
``u``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "StructureError",
    "VocabError",
    "SchemaError",
    "LabelVocab",
    "LabelTable",
    "LabeledDigraph",
    "Triple",
    "build_graph",
    "undirected_to_directed",
    "preceding_edges",
    "to_json",
    "from_json",
    "graph_to_dict",
    "graph_from_dict",
    "permute_nodes",
    "reverse_edges",
]


class GraphError(ValueError):
    """Base class for malformed graphs."""


class StructureError(GraphError):
    """Dangling endpoint, bad node id or bad edge id."""


class VocabError(GraphError):
    """A label falls outside the declared vocabulary."""


class SchemaError(GraphError):
    """JSON text does not follow the graph schema."""


@dataclass(frozen=True)
class LabelVocab:
    num_node_labels: int
    num_edge_labels: int

    def __post_init__(self) -> None:
        if self.num_node_labels < 1 or self.num_edge_labels < 1:
            raise VocabError("label vocabularies must contain at least one label")


class LabelTable:
    """Maps string labels to dense integers at ingestion time.

    The table is append-only so that ids stay stable across files; persist it
    with :meth:`to_json` next to the corpus it was used for.
    """

    def __init__(self, node_labels: Sequence[str] = (), edge_labels: Sequence[str] = ()):
        self.node_labels: list[str] = list(node_labels)
        self.edge_labels: list[str] = list(edge_labels)
        self._node_ids = {s: i for i, s in enumerate(self.node_labels)}
        self._edge_ids = {s: i for i, s in enumerate(self.edge_labels)}

    def node_id(self, label: str) -> int:
        if label not in self._node_ids:
            self._node_ids[label] = len(self.node_labels)
            self.node_labels.append(label)
        return self._node_ids[label]

    def edge_id(self, label: str) -> int:
        if label not in self._edge_ids:
            self._edge_ids[label] = len(self.edge_labels)
            self.edge_labels.append(label)
        return self._edge_ids[label]

    def vocab(self) -> LabelVocab:
        return LabelVocab(max(1, len(self.node_labels)), max(1, len(self.edge_labels)))

    def to_json(self) -> str:
        return json.dumps({"node_labels": self.node_labels, "edge_labels": self.edge_labels})

    @classmethod
    def from_json(cls, text: str) -> "LabelTable":
        obj = json.loads(text)
        return cls(obj["node_labels"], obj["edge_labels"])


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class LabeledDigraph:
    """Immutable directed multigraph with integer node and edge labels.

    Parallel edges and self-loops are allowed.  When no dense features are
    given, one-hot encodings of the labels are used instead.
    """

    __slots__ = (
        "vocab",
        "node_labels",
        "src",
        "dst",
        "edge_labels",
        "_node_features",
        "_edge_features",
        "in_ptr",
        "in_edges",
        "out_ptr",
        "out_edges",
    )

    def __init__(
        self,
        node_labels: Sequence[int] | np.ndarray,
        src: Sequence[int] | np.ndarray,
        dst: Sequence[int] | np.ndarray,
        edge_labels: Sequence[int] | np.ndarray,
        vocab: LabelVocab,
        node_features: np.ndarray | None = None,
        edge_features: np.ndarray | None = None,
    ):
        nl = np.array(node_labels, dtype=np.int64).reshape(-1)
        s = np.array(src, dtype=np.int64).reshape(-1)
        d = np.array(dst, dtype=np.int64).reshape(-1)
        el = np.array(edge_labels, dtype=np.int64).reshape(-1)
        n = nl.shape[0]
        if not (s.shape == d.shape == el.shape):
            raise StructureError("src, dst and edge label arrays differ in length")
        if s.size and (s.min() < 0 or d.min() < 0 or s.max() >= n or d.max() >= n):
            bad = int(max(s.max(), d.max())) if s.max() >= n or d.max() >= n else int(min(s.min(), d.min()))
            raise StructureError(f"edge endpoint {bad} is not a node of a {n}-node graph")
        if nl.size and (nl.min() < 0 or nl.max() >= vocab.num_node_labels):
            raise VocabError(f"node label outside [0, {vocab.num_node_labels})")
        if el.size and (el.min() < 0 or el.max() >= vocab.num_edge_labels):
            raise VocabError(f"edge label outside [0, {vocab.num_edge_labels})")

        if node_features is not None:
            node_features = np.array(node_features, dtype=np.float64)
            if node_features.ndim != 2 or node_features.shape[0] != n:
                raise StructureError("node_features must be a |V| x d matrix")
            node_features = _readonly(node_features)
        if edge_features is not None:
            edge_features = np.array(edge_features, dtype=np.float64)
            if edge_features.ndim != 2 or edge_features.shape[0] != s.shape[0]:
                raise StructureError("edge_features must be a |E| x d matrix")
            edge_features = _readonly(edge_features)

        self.vocab = vocab
        self.node_labels = _readonly(nl)
        self.src = _readonly(s)
        self.dst = _readonly(d)
        self.edge_labels = _readonly(el)
        self._node_features = node_features
        self._edge_features = edge_features

        # stable sort keeps edge ids ascending within each bucket
        order = np.argsort(d, kind="stable")
        self.in_edges = _readonly(order.astype(np.int64))
        self.in_ptr = _readonly(np.concatenate([[0], np.cumsum(np.bincount(d, minlength=n))]).astype(np.int64))
        order = np.argsort(s, kind="stable")
        self.out_edges = _readonly(order.astype(np.int64))
        self.out_ptr = _readonly(np.concatenate([[0], np.cumsum(np.bincount(s, minlength=n))]).astype(np.int64))

    def __setattr__(self, name: str, value: Any) -> None:
        if hasattr(self, "out_ptr"):
            raise AttributeError("LabeledDigraph is immutable")
        object.__setattr__(self, name, value)

    @property
    def num_nodes(self) -> int:
        return int(self.node_labels.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def has_node_features(self) -> bool:
        return self._node_features is not None

    @property
    def has_edge_features(self) -> bool:
        return self._edge_features is not None

    @property
    def node_features(self) -> np.ndarray:
        if self._node_features is not None:
            return self._node_features
        return np.eye(self.vocab.num_node_labels)[self.node_labels]

    @property
    def edge_features(self) -> np.ndarray:
        if self._edge_features is not None:
            return self._edge_features
        return np.eye(self.vocab.num_edge_labels)[self.edge_labels]

    @property
    def nodes(self) -> list[dict[str, int]]:
        return [{"id": i, "label": int(l)} for i, l in enumerate(self.node_labels)]

    @property
    def edges(self) -> list[dict[str, int]]:
        return [
            {"src": int(s), "dst": int(d), "label": int(l)}
            for s, d, l in zip(self.src, self.dst, self.edge_labels)
        ]

    def in_index(self, u: int) -> list[int]:
        """Sorted ids of the edges whose destination is ``u``."""
        return self.in_edges[self.in_ptr[u] : self.in_ptr[u + 1]].tolist()

    def out_index(self, u: int) -> list[int]:
        return self.out_edges[self.out_ptr[u] : self.out_ptr[u + 1]].tolist()

    def in_degree(self) -> np.ndarray:
        return np.diff(self.in_ptr)

    def out_degree(self) -> np.ndarray:
        return np.diff(self.out_ptr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDigraph):
            return NotImplemented
        if self.vocab != other.vocab:
            return False
        for a, b in (
            (self.node_labels, other.node_labels),
            (self.src, other.src),
            (self.dst, other.dst),
            (self.edge_labels, other.edge_labels),
        ):
            if not np.array_equal(a, b):
                return False
        for a, b in ((self._node_features, other._node_features), (self._edge_features, other._edge_features)):
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True

    __hash__ = None  # type: ignore[assignment]

    def __reduce__(self):
        return (
            LabeledDigraph,
            (self.node_labels, self.src, self.dst, self.edge_labels, self.vocab, self._node_features, self._edge_features),
        )

    def __repr__(self) -> str:
        return f"LabeledDigraph(|V|={self.num_nodes}, |E|={self.num_edges}, vocab={self.vocab})"


@dataclass(frozen=True)
class Triple:
    """A (query, input graph, count) record.

    ``count`` is the training target; ``subgraphs``/``embeddings``/
    ``automorphisms`` keep both count semantics when they are known.
    """

    query: LabeledDigraph
    graph: LabeledDigraph
    count: int
    subgraphs: int | None = None
    embeddings: int | None = None
    automorphisms: int | None = None
    query_id: str | None = None
    graph_id: str | None = None

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("counts are non-negative")


def build_graph(
    nodes: Iterable[Any],
    edges: Iterable[Any],
    vocab: LabelVocab,
    node_features: np.ndarray | None = None,
    edge_features: np.ndarray | None = None,
) -> LabeledDigraph:
    """Build a graph from node and edge records.

    ``nodes`` holds either bare labels (ids are positions) or mappings with
    ``id``/``label``; ids must be exactly ``0..n-1``.  ``edges`` holds
    ``(src, dst, label)`` tuples or mappings with those keys.
    """
    labels: dict[int, int] = {}
    for pos, rec in enumerate(nodes):
        if isinstance(rec, dict):
            nid, lab = rec["id"], rec["label"]
        else:
            nid, lab = pos, rec
        if nid in labels:
            raise StructureError(f"duplicate node id {nid}")
        labels[int(nid)] = int(lab)
    n = len(labels)
    if set(labels) != set(range(n)):
        raise StructureError("node ids must be exactly 0..|V|-1")
    src, dst, elab = [], [], []
    for rec in edges:
        if isinstance(rec, dict):
            s, d, l = rec["src"], rec["dst"], rec["label"]
        else:
            s, d, l = rec
        src.append(int(s))
        dst.append(int(d))
        elab.append(int(l))
    return LabeledDigraph(
        [labels[i] for i in range(n)], src, dst, elab, vocab, node_features, edge_features
    )


def undirected_to_directed(
    node_labels: Sequence[int],
    edge_list: Iterable[tuple[int, int, int]],
    vocab: LabelVocab,
) -> LabeledDigraph:
    """Replace every undirected edge ``{u, v}`` by ``<u, v>`` and ``<v, u>``."""
    edges = []
    for u, v, lab in edge_list:
        edges.append((u, v, lab))
        edges.append((v, u, lab))
    return build_graph(list(node_labels), edges, vocab)


def preceding_edges(g: LabeledDigraph, edge_id: int, exclude_backtrack: bool = False) -> list[int]:
    """Edges ``<i, u>`` feeding edge ``<u, v>``.

    A self-loop ``<u, u>`` precedes itself.  With ``exclude_backtrack`` the
    reverse edges ``<v, u>`` are dropped.
    """
    if not 0 <= edge_id < g.num_edges:
        raise StructureError(f"edge id {edge_id} out of range for {g.num_edges} edges")
    u, v = int(g.src[edge_id]), int(g.dst[edge_id])
    prev = g.in_index(u)
    if exclude_backtrack:
        prev = [e for e in prev if int(g.src[e]) != v]
    return prev


def graph_to_dict(g: LabeledDigraph) -> dict[str, Any]:
    out: dict[str, Any] = {
        "directed": True,
        "num_node_labels": g.vocab.num_node_labels,
        "num_edge_labels": g.vocab.num_edge_labels,
        "nodes": g.nodes,
        "edges": g.edges,
    }
    if g.has_node_features:
        out["node_features"] = g.node_features.tolist()
    if g.has_edge_features:
        out["edge_features"] = g.edge_features.tolist()
    return out


def to_json(g: LabeledDigraph) -> str:
    # float repr is shortest-round-trip, so features survive exactly
    return json.dumps(graph_to_dict(g))


def _int_field(obj: dict, key: str, where: str) -> int:
    if key not in obj:
        raise SchemaError(f"{where}: missing {key!r}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise SchemaError(f"{where}: {key!r} must be an integer, got {val!r}")
    return val


def _matrix_field(obj: dict, key: str, rows: int) -> np.ndarray | None:
    if key not in obj or obj[key] is None:
        return None
    val = obj[key]
    if not isinstance(val, list) or len(val) != rows:
        raise SchemaError(f"{key!r} must be a list of {rows} rows")
    width = None
    for row in val:
        if not isinstance(row, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in row):
            raise SchemaError(f"{key!r} rows must be lists of numbers")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise SchemaError(f"{key!r} rows have unequal length")
    return np.array(val, dtype=np.float64).reshape(rows, width or 0)


def graph_from_dict(obj: Any) -> LabeledDigraph:
    if not isinstance(obj, dict):
        raise SchemaError("graph JSON must be an object")
    if obj.get("directed", True) is not True:
        raise SchemaError("only directed graphs are supported; double undirected edges first")
    for key in ("nodes", "edges"):
        if key not in obj:
            raise SchemaError(f"missing {key!r}")
        if not isinstance(obj[key], list):
            raise SchemaError(f"{key!r} must be a list")
    try:
        vocab = LabelVocab(_int_field(obj, "num_node_labels", "graph"), _int_field(obj, "num_edge_labels", "graph"))
    except VocabError as exc:
        raise SchemaError(str(exc)) from exc
    nodes = []
    for i, rec in enumerate(obj["nodes"]):
        if not isinstance(rec, dict):
            raise SchemaError(f"node {i} must be an object")
        nodes.append({"id": _int_field(rec, "id", f"node {i}"), "label": _int_field(rec, "label", f"node {i}")})
    edges = []
    for i, rec in enumerate(obj["edges"]):
        if not isinstance(rec, dict):
            raise SchemaError(f"edge {i} must be an object")
        edges.append(tuple(_int_field(rec, k, f"edge {i}") for k in ("src", "dst", "label")))
    nf = _matrix_field(obj, "node_features", len(nodes))
    ef = _matrix_field(obj, "edge_features", len(edges))
    return build_graph(nodes, edges, vocab, nf, ef)


def from_json(text: str) -> LabeledDigraph:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from exc
    return graph_from_dict(obj)


def permute_nodes(g: LabeledDigraph, perm: Sequence[int], edge_order: Sequence[int] | None = None) -> LabeledDigraph:
    """Relabel node ``i`` as ``perm[i]`` and optionally reorder the edges."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.num_nodes)):
        raise StructureError("perm must be a permutation of the node ids")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    eo = np.arange(g.num_edges) if edge_order is None else np.asarray(edge_order, dtype=np.int64)
    nf = g.node_features[inv] if g.has_node_features else None
    ef = g.edge_features[eo] if g.has_edge_features else None
    return LabeledDigraph(
        g.node_labels[inv], perm[g.src[eo]], perm[g.dst[eo]], g.edge_labels[eo], g.vocab, nf, ef
    )


def reverse_edges(g: LabeledDigraph) -> LabeledDigraph:
    nf = g.node_features if g.has_node_features else None
    ef = g.edge_features if g.has_edge_features else None
    return LabeledDigraph(g.node_labels, g.dst, g.src, g.edge_labels, g.vocab, nf, ef)
