"""Exact labeled subgraph-isomorphism counting.

Matching is non-induced: every query edge must be covered by a distinct graph
edge with the same label, extra graph edges among matched nodes are allowed.
Parallel query edges need as many parallel graph edges, and the number of ways
to pick them is counted, so ``embeddings = subgraphs * automorphisms`` holds
for multigraphs as well.
"""

from __future__ import annotations

import itertools
import time
from collections import Counter
from dataclasses import dataclass
from math import perm as falling

import numpy as np

from countgnn import _kernels
from countgnn.graph import LabeledDigraph

__all__ = [
    "DEFAULT_BUDGET",
    "BRUTE_FORCE_MAX_NODES",
    "CountTimeout",
    "CountResult",
    "count_embeddings",
    "count_automorphisms",
    "count_subgraphs",
    "brute_force_count",
    "is_isomorphic",
    "matching_order",
]

DEFAULT_BUDGET = 10**8
BRUTE_FORCE_MAX_NODES = 10


class CountTimeout(RuntimeError):
    """The step budget ran out; ``partial`` is a lower bound, never a result."""

    def __init__(self, steps: int, partial: int):
        super().__init__(f"backtracking budget exhausted after {steps} steps")
        self.steps = steps
        self.partial = partial


@dataclass(frozen=True)
class CountResult:
    embeddings: int
    subgraphs: int
    automorphisms: int
    elapsed: float = 0.0

    def counts(self) -> tuple[int, int, int]:
        return (self.embeddings, self.subgraphs, self.automorphisms)


def _edge_groups(g: LabeledDigraph) -> Counter:
    return Counter(zip(g.src.tolist(), g.dst.tolist(), g.edge_labels.tolist()))


def matching_order(q: LabeledDigraph) -> tuple[list[int], list[int], list[int]]:
    """Order query nodes connectivity-first.

    Returns ``(order, parent_pos, parent_dir)``: BFS from the highest-degree
    node, visiting neighbours by decreasing degree; each later component
    restarts from its highest-degree node.  ``parent_dir`` is 0 when the
    parent has an edge *to* the node, 1 when the node points to the parent.
    """
    n = q.num_nodes
    deg = q.in_degree() + q.out_degree()
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for s, d in zip(q.src.tolist(), q.dst.tolist()):
        if s != d:
            nbrs[s].add(d)
            nbrs[d].add(s)
    rank = sorted(range(n), key=lambda v: (-int(deg[v]), v))
    pos = [-1] * n
    order: list[int] = []
    parent: list[int] = []
    for root in rank:
        if pos[root] >= 0:
            continue
        pos[root] = len(order)
        order.append(root)
        parent.append(-1)
        head = len(order) - 1
        while head < len(order):
            u = order[head]
            head += 1
            for w in sorted(nbrs[u], key=lambda v: (-int(deg[v]), v)):
                if pos[w] < 0:
                    pos[w] = len(order)
                    order.append(w)
                    parent.append(u)
    out_pairs = set(zip(q.src.tolist(), q.dst.tolist()))
    parent_pos = [pos[p] if p >= 0 else -1 for p in parent]
    parent_dir = [0 if p < 0 or (p, v) in out_pairs else 1 for v, p in zip(order, parent)]
    return order, parent_pos, parent_dir


def _query_plan(q: LabeledDigraph):
    order, parent_pos, parent_dir = matching_order(q)
    pos = {v: k for k, v in enumerate(order)}
    per_pos: list[list[tuple[int, int, int, int]]] = [[] for _ in order]
    for (s, d, lab), m in sorted(_edge_groups(q).items()):
        ps, pd = pos[s], pos[d]
        k = max(ps, pd)
        if ps == pd:
            per_pos[k].append((k, 0, lab, m))
        elif ps == k:
            per_pos[k].append((pd, 0, lab, m))
        else:
            per_pos[k].append((ps, 1, lab, m))
    con_ptr = np.zeros(len(order) + 1, dtype=np.int64)
    rows = []
    for k, cons in enumerate(per_pos):
        rows.extend(cons)
        con_ptr[k + 1] = len(rows)
    con = np.array(rows, dtype=np.int64).reshape(-1, 4)
    ordered = np.array(order, dtype=np.int64)
    return (
        q.node_labels[ordered].astype(np.int64),
        q.in_degree()[ordered].astype(np.int64),
        q.out_degree()[ordered].astype(np.int64),
        np.array(parent_pos, dtype=np.int64),
        np.array(parent_dir, dtype=np.int64),
        con_ptr,
        np.ascontiguousarray(con[:, 0]),
        np.ascontiguousarray(con[:, 1]),
        np.ascontiguousarray(con[:, 2]),
        np.ascontiguousarray(con[:, 3]),
    )


def _graph_index(g: LabeledDigraph):
    n = g.num_nodes
    if g.num_edges:
        keys = np.stack([g.src, g.dst, g.edge_labels], axis=1)
        uniq, mult = np.unique(keys, axis=0, return_counts=True)
    else:
        uniq = np.zeros((0, 3), dtype=np.int64)
        mult = np.zeros(0, dtype=np.int64)
    mult = mult.astype(np.int64)
    # np.unique sorts rows lexicographically: (src, dst, label)
    out_ptr = np.concatenate([[0], np.cumsum(np.bincount(uniq[:, 0], minlength=n))]).astype(np.int64)
    out_nbr = np.ascontiguousarray(uniq[:, 1], dtype=np.int64)
    out_lab = np.ascontiguousarray(uniq[:, 2], dtype=np.int64)
    by_dst = np.lexsort((uniq[:, 2], uniq[:, 0], uniq[:, 1]))
    in_ptr = np.concatenate([[0], np.cumsum(np.bincount(uniq[:, 1], minlength=n))]).astype(np.int64)
    in_nbr = np.ascontiguousarray(uniq[by_dst, 0], dtype=np.int64)
    in_lab = np.ascontiguousarray(uniq[by_dst, 2], dtype=np.int64)
    return (
        g.node_labels.astype(np.int64),
        g.in_degree().astype(np.int64),
        g.out_degree().astype(np.int64),
        out_ptr,
        out_nbr,
        out_lab,
        mult,
        in_ptr,
        in_nbr,
        in_lab,
        np.ascontiguousarray(mult[by_dst]),
    )


def _run(q: LabeledDigraph, g: LabeledDigraph, budget: int) -> tuple[int, int]:
    if q.num_nodes == 0:
        return 1, 0
    if q.num_nodes > g.num_nodes or q.num_edges > g.num_edges:
        return 0, 0
    count, steps, exhausted = _kernels.count_embeddings_kernel(
        *_query_plan(q), *_graph_index(g), np.int64(budget)
    )
    if exhausted:
        raise CountTimeout(int(steps), int(count))
    return int(count), int(steps)


def count_embeddings(q: LabeledDigraph, g: LabeledDigraph, budget: int = DEFAULT_BUDGET) -> int:
    """Number of label-preserving injective maps of ``q`` into ``g``.

    Raises :class:`CountTimeout` when more than ``budget`` candidate checks
    would be needed.
    """
    return _run(q, g, budget)[0]


def count_automorphisms(q: LabeledDigraph, budget: int = DEFAULT_BUDGET) -> int:
    return count_embeddings(q, q, budget)


def count_subgraphs(q: LabeledDigraph, g: LabeledDigraph, budget: int = DEFAULT_BUDGET) -> CountResult:
    t0 = time.perf_counter()
    emb = count_embeddings(q, g, budget)
    aut = count_automorphisms(q, budget)
    sub, rem = divmod(emb, aut)
    if rem:
        raise AssertionError(f"embeddings {emb} not divisible by automorphisms {aut}")
    return CountResult(emb, sub, aut, time.perf_counter() - t0)


def is_isomorphic(a: LabeledDigraph, b: LabeledDigraph) -> bool:
    if (a.num_nodes, a.num_edges) != (b.num_nodes, b.num_edges):
        return False
    if sorted(a.node_labels.tolist()) != sorted(b.node_labels.tolist()):
        return False
    return count_embeddings(a, b) > 0


# ---------------------------------------------------------------------------
# brute-force oracle: shares nothing with the backtracking path above


def _bf_embeddings(q: LabeledDigraph, g: LabeledDigraph) -> int:
    qlab = q.node_labels.tolist()
    glab = g.node_labels.tolist()
    qgroups = _edge_groups(q)
    ggroups = _edge_groups(g)
    total = 0
    for image in itertools.permutations(range(g.num_nodes), q.num_nodes):
        if any(qlab[i] != glab[v] for i, v in enumerate(image)):
            continue
        ways = 1
        for (s, d, lab), m in qgroups.items():
            ways *= falling(ggroups.get((image[s], image[d], lab), 0), m)
            if not ways:
                break
        total += ways
    return total


def _bf_subgraphs(q: LabeledDigraph, g: LabeledDigraph) -> int:
    """Count subgraphs ``S`` of ``g`` with a bijection onto ``q`` (Definition of S ~ Q)."""
    nq, mq = q.num_nodes, q.num_edges
    qlab = q.node_labels.tolist()
    glab = g.node_labels.tolist()
    qedges = Counter(zip(q.src.tolist(), q.dst.tolist(), q.edge_labels.tolist()))
    want_labels = sorted(qlab)
    gsrc, gdst, gel = g.src.tolist(), g.dst.tolist(), g.edge_labels.tolist()
    found = 0
    for nodes in itertools.combinations(range(g.num_nodes), nq):
        if sorted(glab[v] for v in nodes) != want_labels:
            continue
        inside = set(nodes)
        cand = [e for e in range(g.num_edges) if gsrc[e] in inside and gdst[e] in inside]
        for chosen in itertools.combinations(cand, mq):
            for target in itertools.permutations(range(nq)):
                psi = dict(zip(nodes, target))
                if any(glab[v] != qlab[psi[v]] for v in nodes):
                    continue
                mapped = Counter((psi[gsrc[e]], psi[gdst[e]], gel[e]) for e in chosen)
                if mapped == qedges:
                    found += 1
                    break
    return found


def brute_force_count(q: LabeledDigraph, g: LabeledDigraph) -> CountResult:
    """Enumerate everything; only meant as a test oracle for tiny graphs."""
    if g.num_nodes > BRUTE_FORCE_MAX_NODES or q.num_nodes > BRUTE_FORCE_MAX_NODES:
        raise ValueError(f"brute force is limited to {BRUTE_FORCE_MAX_NODES} nodes")
    t0 = time.perf_counter()
    emb = _bf_embeddings(q, g)
    aut = _bf_embeddings(q, q)
    sub = _bf_subgraphs(q, g)
    return CountResult(emb, sub, aut, time.perf_counter() - t0)
