"""Weisfeiler-Lehman style colour refinement on nodes and on directed edges.

Node mode is 1-WL where a node absorbs ``(edge label, source colour)`` over
its incoming edges, i.e. messages flow along edge direction as in a
node-centric GNN on a directed graph.  Edge mode refines
colours of directed edges: an edge starts as ``(l(u), l'(e), l(v))`` and then
absorbs the multiset of colours of its preceding edges ``<i, u>``, which is
the adjacency edge-centric message passing uses.  Colours are stable hashes,
so histograms of different graphs can be compared directly.

Both refinements run for an exact number of rounds; comparing at equal depth
is what matches an L-layer encoder.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from typing import Callable, Literal

import numpy as np

from countgnn.exact import is_isomorphic
from countgnn.graph import LabeledDigraph, LabelVocab, build_graph

Mode = Literal["node", "edge"]

__all__ = ["node_colors", "edge_colors", "wl_refinement_histogram", "random_small_graph", "find_witness"]


def _h(obj) -> str:
    return hashlib.blake2b(repr(obj).encode(), digest_size=10).hexdigest()


def node_colors(g: LabeledDigraph, rounds: int) -> list[str]:
    src, dst, el = g.src.tolist(), g.dst.tolist(), g.edge_labels.tolist()
    colors = [_h(("n", int(l))) for l in g.node_labels]
    for _ in range(rounds):
        ins: list[list] = [[] for _ in colors]
        for s, d, l in zip(src, dst, el):
            ins[d].append((l, colors[s]))
        colors = [_h((c, sorted(i))) for c, i in zip(colors, ins)]
    return colors


def edge_colors(g: LabeledDigraph, rounds: int, exclude_backtrack: bool = False) -> list[str]:
    src, dst, el = g.src.tolist(), g.dst.tolist(), g.edge_labels.tolist()
    nl = g.node_labels.tolist()
    colors = [_h(("e", nl[s], l, nl[d])) for s, d, l in zip(src, dst, el)]
    incoming = [g.in_index(u) for u in range(g.num_nodes)]
    for _ in range(rounds):
        new = []
        for e, (s, d) in enumerate(zip(src, dst)):
            prev = incoming[s]
            if exclude_backtrack:
                prev = [p for p in prev if src[p] != d]
            new.append(_h((colors[e], sorted(colors[p] for p in prev))))
        colors = new
    return colors


def wl_refinement_histogram(g: LabeledDigraph, mode: Mode = "node", rounds: int = 3) -> Counter:
    """Colour histogram after ``rounds`` refinement rounds (0 gives the initial colours)."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if mode == "node":
        return Counter(node_colors(g, rounds))
    if mode == "edge":
        return Counter(edge_colors(g, rounds))
    raise ValueError(f"unknown mode {mode!r}")


def random_small_graph(
    rng: np.random.Generator,
    n_nodes: int,
    n_edges: int,
    vocab: LabelVocab = LabelVocab(1, 1),
    symmetric: bool = False,
) -> LabeledDigraph:
    """Random simple graph; with ``symmetric`` every edge comes with its reverse."""
    if symmetric:
        pairs = [(a, b) for a in range(n_nodes) for b in range(a + 1, n_nodes)]
    else:
        pairs = [(a, b) for a in range(n_nodes) for b in range(n_nodes) if a != b]
    n_edges = min(n_edges, len(pairs))
    picks = rng.choice(len(pairs), size=n_edges, replace=False)
    labels = rng.integers(0, vocab.num_node_labels, size=n_nodes).tolist()
    edges = []
    for i in sorted(picks.tolist()):
        a, b = pairs[i]
        lab = int(rng.integers(0, vocab.num_edge_labels))
        edges.append((a, b, lab))
        if symmetric:
            edges.append((b, a, lab))
    return build_graph(labels, edges, vocab)


def find_witness(
    rounds: int,
    max_nodes: int = 8,
    seed: int = 0,
    trials: int = 20000,
    symmetric: bool = False,
    vocab: LabelVocab = LabelVocab(1, 1),
    accept: Callable[[LabeledDigraph, LabeledDigraph], bool] | None = None,
) -> tuple[LabeledDigraph, LabeledDigraph] | None:
    """Search for non-isomorphic graphs that node refinement cannot tell apart but edge refinement can.

    Random graphs are bucketed by their node histogram after ``rounds``
    rounds; within a bucket the first pair with different edge histograms
    (and passing ``accept``, if given) is returned.
    """
    rng = np.random.default_rng(seed)
    buckets: dict[tuple, list[tuple[LabeledDigraph, frozenset]]] = {}
    for _ in range(trials):
        n = int(rng.integers(3, max_nodes + 1))
        max_m = n * (n - 1) // 2 if symmetric else n * (n - 1)
        m = int(rng.integers(n - 1, max_m + 1))
        g = random_small_graph(rng, n, m, vocab, symmetric)
        key = tuple(sorted(wl_refinement_histogram(g, "node", rounds).items()))
        ehist = frozenset(wl_refinement_histogram(g, "edge", rounds).items())
        bucket = buckets.setdefault((g.num_edges, key), [])
        for other, other_hist in bucket:
            if other_hist == ehist or is_isomorphic(g, other):
                continue
            if accept is None or accept(other, g):
                return other, g
        if all(h != ehist for _, h in bucket):
            bucket.append((g, ehist))
    return None
