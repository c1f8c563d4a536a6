"""Exact and learned (Count-GNN) subgraph isomorphism counting on labelled digraphs."""

from countgnn.exact import CountTimeout, brute_force_count, count_automorphisms, count_embeddings, count_subgraphs
from countgnn.graph import LabeledDigraph, LabelVocab, Triple, build_graph, from_json, to_json

__version__ = "0.1.0"

__all__ = [
    "CountTimeout",
    "LabeledDigraph",
    "LabelVocab",
    "Triple",
    "brute_force_count",
    "build_graph",
    "count_automorphisms",
    "count_embeddings",
    "count_subgraphs",
    "from_json",
    "to_json",
]
