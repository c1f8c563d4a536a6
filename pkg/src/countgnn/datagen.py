"""Synthetic corpora: random labelled queries and graphs, exact labels, splits.

Every random draw comes from a stream derived from ``(seed, kind, index)``,
so items can be generated or labelled in any order, or in parallel, and the
corpus is still bit-identical.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from countgnn.exact import DEFAULT_BUDGET, CountTimeout, count_subgraphs
from countgnn.graph import (
    LabeledDigraph,
    LabelVocab,
    SchemaError,
    Triple,
    from_json,
    graph_from_dict,
    graph_to_dict,
    to_json,
)

log = logging.getLogger(__name__)

__all__ = [
    "GenSpec",
    "Corpus",
    "DegenerateCorpus",
    "gen_query",
    "gen_graph",
    "make_triples",
    "sample_pairs",
    "split",
    "generate",
    "write_corpus",
    "read_triples",
    "write_triples",
    "is_weakly_connected",
]

_QUERY, _GRAPH, _PAIRS = 0, 1, 2


class DegenerateCorpus(RuntimeError):
    """Every retry produced identical counts for all triples."""


@dataclass(frozen=True)
class GenSpec:
    n_queries: int = 60
    n_graphs: int = 300
    n_triples: int | None = 1000
    query_nodes: tuple[int, int] = (3, 5)
    query_edge_factor: float = 1.3
    graph_nodes: tuple[int, int] = (8, 16)
    # each graph draws its own factor uniformly from this range
    graph_edge_factor: tuple[float, float] = (8.0, 40.0)
    num_node_labels: int = 4
    num_edge_labels: int = 4
    seed: int = 0
    max_count_budget: int = DEFAULT_BUDGET
    allow_self_loops: bool = False
    allow_duplicate_edges: bool = False
    max_retries: int = 5

    def __post_init__(self) -> None:
        gef = self.graph_edge_factor
        if isinstance(gef, (int, float)):
            object.__setattr__(self, "graph_edge_factor", (float(gef), float(gef)))
        elif len(gef) != 2 or gef[0] > gef[1] or gef[0] < 0:
            raise ValueError("graph_edge_factor must be a number or an increasing (low, high) pair")
        else:
            object.__setattr__(self, "graph_edge_factor", (float(gef[0]), float(gef[1])))
        if self.query_edge_factor < 0:
            raise ValueError("query_edge_factor must be >= 0")
        for name in ("query_nodes", "graph_nodes"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a nonempty range of positive sizes")
        if self.query_nodes[0] < 2:
            raise ValueError("queries need at least two nodes to carry an edge")
        if self.n_queries < 1 or self.n_graphs < 1:
            raise ValueError("need at least one query and one graph")

    @property
    def vocab(self) -> LabelVocab:
        return LabelVocab(self.num_node_labels, self.num_edge_labels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["query_nodes"] = list(self.query_nodes)
        d["graph_nodes"] = list(self.graph_nodes)
        d["graph_edge_factor"] = list(self.graph_edge_factor)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "GenSpec":
        obj = dict(obj)
        for k in ("query_nodes", "graph_nodes", "graph_edge_factor"):
            if k in obj:
                obj[k] = tuple(obj[k])
        return cls(**obj)


def _stream(seed: int, kind: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, kind, index])


def _edge_count(rng: np.random.Generator, n: int, factor: float) -> int:
    # stochastic rounding keeps the mean at factor * n
    target = factor * n
    base = int(np.floor(target))
    return base + int(rng.random() < target - base)


def _sample_edges(rng, n, m, vocab, self_loops, duplicates):
    ne = vocab.num_edge_labels
    if duplicates:
        src = rng.integers(0, n, size=m)
        dst = rng.integers(0, n, size=m)
        if not self_loops:
            # shift collided destinations onto another node
            clash = src == dst
            dst[clash] = (dst[clash] + rng.integers(1, n, size=int(clash.sum()))) % n
        return list(zip(src.tolist(), dst.tolist(), rng.integers(0, ne, size=m).tolist()))
    per_src = n if self_loops else n - 1
    space = n * per_src * ne
    m = min(m, space)
    codes = np.sort(rng.choice(space, size=m, replace=False))
    lab = codes % ne
    pair = codes // ne
    s = pair // per_src
    d = pair % per_src
    if not self_loops:
        d = d + (d >= s)
    return list(zip(s.tolist(), d.tolist(), lab.tolist()))


def is_weakly_connected(g: LabeledDigraph) -> bool:
    n = g.num_nodes
    if n == 0:
        return True
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, d in zip(g.src.tolist(), g.dst.tolist()):
        parent[find(s)] = find(d)
    return len({find(v) for v in range(n)}) == 1


def gen_query(spec: GenSpec, rng: np.random.Generator) -> LabeledDigraph:
    """Weakly connected random query with at least one edge (rejection sampling)."""
    vocab = spec.vocab
    while True:
        n = int(rng.integers(spec.query_nodes[0], spec.query_nodes[1] + 1))
        m = max(n - 1, _edge_count(rng, n, spec.query_edge_factor), 1)
        labels = rng.integers(0, vocab.num_node_labels, size=n).tolist()
        edges = _sample_edges(rng, n, m, vocab, spec.allow_self_loops, spec.allow_duplicate_edges)
        g = LabeledDigraph(labels, *zip(*edges), vocab=vocab) if edges else None
        if g is not None and is_weakly_connected(g):
            return g


def gen_graph(spec: GenSpec, rng: np.random.Generator, edge_factor: float | None = None) -> LabeledDigraph:
    vocab = spec.vocab
    n = int(rng.integers(spec.graph_nodes[0], spec.graph_nodes[1] + 1))
    if edge_factor is None:
        lo, hi = spec.graph_edge_factor
        edge_factor = lo if lo == hi else float(rng.uniform(lo, hi))
    m = _edge_count(rng, n, edge_factor)
    labels = rng.integers(0, vocab.num_node_labels, size=n).tolist()
    edges = _sample_edges(rng, n, m, vocab, spec.allow_self_loops, spec.allow_duplicate_edges)
    if not edges:
        return LabeledDigraph(labels, [], [], [], vocab)
    return LabeledDigraph(labels, *zip(*edges), vocab=vocab)


def sample_pairs(n_queries: int, n_graphs: int, n_triples: int | None, seed: int) -> list[tuple[int, int]]:
    """Distinct (query, graph) index pairs: all of them, or a uniform sample in index order."""
    total = n_queries * n_graphs
    if n_triples is None or n_triples >= total:
        codes = np.arange(total)
    else:
        codes = np.sort(_stream(seed, _PAIRS).choice(total, size=n_triples, replace=False))
    return [(int(c // n_graphs), int(c % n_graphs)) for c in codes]


def _label_one(args):
    qi, gi, q, g, budget = args
    try:
        r = count_subgraphs(q, g, budget)
    except CountTimeout as exc:
        return qi, gi, None, exc.steps
    return qi, gi, (r.subgraphs, r.embeddings, r.automorphisms), None


def make_triples(
    queries: Sequence[LabeledDigraph],
    graphs: Sequence[LabeledDigraph],
    budget: int = DEFAULT_BUDGET,
    pairs: Iterable[tuple[int, int]] | None = None,
    jobs: int = 1,
    semantics: str = "subgraphs",
    query_ids: Sequence[str] | None = None,
    graph_ids: Sequence[str] | None = None,
) -> list[Triple]:
    """Label (query, graph) pairs exactly; all pairs by default.  Timed-out pairs are dropped."""
    if pairs is None:
        pairs = [(i, j) for i in range(len(queries)) for j in range(len(graphs))]
    work = [(i, j, queries[i], graphs[j], budget) for i, j in pairs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_label_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_label_one(w) for w in work]
    triples = []
    dropped = 0
    for qi, gi, counts, steps in results:
        if counts is None:
            dropped += 1
            log.warning("dropping pair (query %d, graph %d): budget exhausted after %d steps", qi, gi, steps)
            continue
        sub, emb, aut = counts
        triples.append(
            Triple(
                queries[qi],
                graphs[gi],
                sub if semantics == "subgraphs" else emb,
                sub,
                emb,
                aut,
                query_ids[qi] if query_ids else f"q{qi}",
                graph_ids[gi] if graph_ids else f"g{gi}",
            )
        )
    if dropped:
        log.warning("dropped %d of %d pairs on timeout", dropped, len(work))
    return triples


def split(
    triples: Sequence[Triple], fractions: Sequence[float] = (0.4, 0.1, 0.5), seed: int = 0
) -> tuple[list[Triple], list[Triple], list[Triple]]:
    """Deterministic train/val/test split in which every query occurs in train."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(triples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    rng = np.random.default_rng([seed, 3])
    groups: dict[str, list[int]] = {}
    for i, t in enumerate(triples):
        key = t.query_id if t.query_id is not None else to_json(t.query)
        groups.setdefault(key, []).append(i)
    if len(groups) > n_train:
        raise ValueError(f"{len(groups)} queries cannot all appear in {n_train} training triples")
    reserved = [int(rng.choice(idx)) for _, idx in sorted(groups.items())]
    rest = np.array(sorted(set(range(n)) - set(reserved)), dtype=np.int64)
    rest = rest[rng.permutation(rest.size)].tolist()
    train_idx = reserved + rest[: n_train - len(reserved)]
    rest = rest[n_train - len(reserved) :]
    val_idx, test_idx = rest[:n_val], rest[n_val:]
    pick = lambda ids: [triples[i] for i in sorted(ids)]
    return pick(train_idx), pick(val_idx), pick(test_idx)


@dataclass
class Corpus:
    spec: GenSpec
    queries: list[LabeledDigraph]
    graphs: list[LabeledDigraph]
    triples: list[Triple]


def generate(spec: GenSpec = GenSpec(), jobs: int = 1) -> Corpus:
    """Generate and exactly label a corpus; retries with denser graphs if every count is equal."""
    current = spec
    for attempt in range(spec.max_retries + 1):
        queries = [gen_query(current, _stream(current.seed, _QUERY, i)) for i in range(current.n_queries)]
        graphs = [gen_graph(current, _stream(current.seed, _GRAPH, j)) for j in range(current.n_graphs)]
        pairs = sample_pairs(current.n_queries, current.n_graphs, current.n_triples, current.seed)
        triples = make_triples(
            queries,
            graphs,
            current.max_count_budget,
            pairs,
            jobs,
            query_ids=[f"q{i:05d}" for i in range(len(queries))],
            graph_ids=[f"g{j:05d}" for j in range(len(graphs))],
        )
        counts = np.array([t.count for t in triples], dtype=np.float64)
        if counts.size > 1 and counts.var() > 0:
            return Corpus(current, queries, graphs, triples)
        log.warning("degenerate counts on attempt %d; raising graph edge factor", attempt)
        lo, hi = current.graph_edge_factor
        current = replace(current, graph_edge_factor=(lo + 0.5, hi + 0.5))
    raise DegenerateCorpus(f"counts stayed constant after {spec.max_retries} retries; try denser graphs")


# ---------------------------------------------------------------------------
# files


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=False)


def write_triples(path: str | os.PathLike, triples: Sequence[Triple], refs: dict[int, str] | None = None) -> None:
    """JSON lines; graphs are written as relative paths when ``refs`` maps ``id(graph)`` to one."""
    refs = refs or {}
    with open(path, "w") as fh:
        for t in triples:
            rec = {
                "query": refs.get(id(t.query)) or graph_to_dict(t.query),
                "graph": refs.get(id(t.graph)) or graph_to_dict(t.graph),
                "subgraphs": t.subgraphs,
                "embeddings": t.embeddings,
                "automorphisms": t.automorphisms,
            }
            fh.write(_dump(rec) + "\n")


def _load_graph(ref, base: Path, cache: dict) -> tuple[LabeledDigraph, str]:
    if isinstance(ref, str):
        if ref not in cache:
            with open(base / ref) as fh:
                cache[ref] = from_json(fh.read())
        return cache[ref], ref
    g = graph_from_dict(ref)
    return g, to_json(g)


def read_triples(path: str | os.PathLike, semantics: str = "subgraphs", require_counts: bool = True) -> list[Triple]:
    """Read a triple file; graph references are paths relative to the file or inline objects."""
    if semantics not in ("subgraphs", "embeddings"):
        raise ValueError("semantics must be 'subgraphs' or 'embeddings'")
    base = Path(path).parent
    cache: dict = {}
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(rec, dict) or "query" not in rec or "graph" not in rec:
                raise SchemaError(f"{path}:{lineno}: records need 'query' and 'graph'")
            q, qid = _load_graph(rec["query"], base, cache)
            g, gid = _load_graph(rec["graph"], base, cache)
            counts = {k: rec.get(k) for k in ("subgraphs", "embeddings", "automorphisms")}
            for k, v in counts.items():
                if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 0):
                    raise SchemaError(f"{path}:{lineno}: {k!r} must be a non-negative integer")
            target = counts[semantics]
            if target is None and require_counts:
                raise SchemaError(f"{path}:{lineno}: missing {semantics!r}")
            out.append(Triple(q, g, target or 0, counts["subgraphs"], counts["embeddings"], counts["automorphisms"], qid, gid))
    return out


def write_corpus(outdir: str | os.PathLike, corpus: Corpus) -> None:
    out = Path(outdir)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    refs: dict[int, str] = {}
    for i, q in enumerate(corpus.queries):
        rel = f"queries/q{i:05d}.json"
        (out / rel).write_text(to_json(q) + "\n")
        refs[id(q)] = rel
    for j, g in enumerate(corpus.graphs):
        rel = f"graphs/g{j:05d}.json"
        (out / rel).write_text(to_json(g) + "\n")
        refs[id(g)] = rel
    write_triples(out / "triples.jsonl", corpus.triples, refs)
    meta = {
        "spec": corpus.spec.to_dict(),
        "seed": corpus.spec.seed,
        "label_distribution": "uniform",
        "degree_model": "uniform edge sampling without replacement; each graph draws its edge factor uniformly from graph_edge_factor",
        "count_semantics": "non-induced; subgraphs = embeddings / automorphisms",
        "n_triples_kept": len(corpus.triples),
    }
    (out / "genspec.json").write_text(json.dumps(meta, indent=2) + "\n")
