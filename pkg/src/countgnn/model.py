"""Count-GNN: edge-centric encoders, query-conditioned FiLM readout and a counter head.

Edge state tables are ``(|E|, d)`` tensors whose row ``i`` belongs to edge
``i``.  Several (query, graph) pairs are processed at once by stacking their
edges block-diagonally; aggregation, readout and broadcasting of the query
vector onto graph edges are all constant sparse operators (:class:`SparseOp`),
so one forward pass handles a whole minibatch.

Parameter names::

    {query,graph}.{l}.W / .U / .b      edge-centric layer l (1-based)
    {query,graph}.{l}.W1/.U/.b1/.W2/.b2 node-centric layer (ablation)
    {query,graph}.proj                 optional input projection
    readout.Q, readout.G
    film.W_gamma, film.U_gamma, film.b_gamma, film.W_beta, film.U_beta, film.b_beta
    match.W, match.b, head.w, head.b
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from functools import cached_property
from typing import Literal, Sequence

import numpy as np

from countgnn import autodiff as ad
from countgnn.autodiff import SparseOp, Tensor
from countgnn.graph import LabeledDigraph, LabelVocab

Params = dict[str, Tensor]
Side = Literal["query", "graph"]

__all__ = [
    "ModelConfig",
    "GraphPieces",
    "Batch",
    "Forward",
    "init_params",
    "init_edge_messages",
    "preceding_operator",
    "edge_layer",
    "encode",
    "query_readout",
    "film_factors",
    "modulate",
    "graph_readout",
    "match",
    "forward",
    "predict_count",
    "predict_many",
    "graph_embedding",
    "params_to_dict",
    "params_from_dict",
    "save_checkpoint",
    "load_checkpoint",
    "dumps_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    d_node: int
    d_edge: int
    num_layers: int = 3
    hidden: int = 64
    match_dim: int = 64
    leaky_slope: float = 0.01
    residual: bool = False
    exclude_backtrack: bool = False
    modulation: bool = True
    encoder: str = "edge"
    film_activation: str = "leaky_relu"
    input_projection: bool = False
    # constant factor on every sum readout; keeps whole-graph vectors of
    # graphs with hundreds of edges near unit scale
    readout_scale: float = 0.01

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.hidden < 1 or self.match_dim < 1:
            raise ValueError("num_layers, hidden and match_dim must be >= 1")
        if not self.readout_scale > 0:
            raise ValueError("readout_scale must be positive")
        if self.d_node < 1 or self.d_edge < 1:
            raise ValueError("feature dims must be >= 1")
        if self.encoder not in ("edge", "node"):
            raise ValueError(f"encoder must be 'edge' or 'node', not {self.encoder!r}")
        if self.film_activation not in ("leaky_relu", "sigmoid"):
            raise ValueError(f"unknown film_activation {self.film_activation!r}")

    @classmethod
    def for_vocab(cls, vocab: LabelVocab, **kw) -> "ModelConfig":
        return cls(d_node=vocab.num_node_labels, d_edge=vocab.num_edge_labels, **kw)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})

    @property
    def d_0(self) -> int:
        """Width of the initial edge message ``x_u || x_uv || x_v``."""
        return 2 * self.d_node + self.d_edge

    @property
    def variant(self) -> str:
        if self.encoder == "node":
            return "node-centric"
        return "full" if self.modulation else "no-modulation"

    def ablation(self, variant: str) -> "ModelConfig":
        if variant == "full":
            return replace(self, encoder="edge", modulation=True)
        if variant == "no-modulation":
            return replace(self, encoder="edge", modulation=False)
        if variant == "node-centric":
            return replace(self, encoder="node", modulation=True)
        raise ValueError(f"unknown variant {variant!r}")


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_params(config: ModelConfig, seed: int = 0, head_bias: float = 0.0) -> Params:
    """Glorot-uniform matrices and zero biases, created in a fixed order.

    The counter head starts near the constant ``head_bias`` (pass the mean
    training count): its weight vector is drawn at 1% of the Glorot scale, so
    the final ReLU begins active on every input instead of dead on many.
    """
    rng = np.random.default_rng(seed)
    d = config.hidden
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for side in ("query", "graph"):
        if config.encoder == "edge":
            width = config.d_0
            if config.input_projection:
                shapes.append((f"{side}.proj", (d, width)))
                width = d
            for l in range(1, config.num_layers + 1):
                shapes += [(f"{side}.{l}.W", (d, width)), (f"{side}.{l}.U", (d, width)), (f"{side}.{l}.b", (d,))]
                width = d
        else:
            width = config.d_node
            if config.input_projection:
                shapes.append((f"{side}.proj", (d, width)))
                width = d
            for l in range(1, config.num_layers + 1):
                shapes += [
                    (f"{side}.{l}.W1", (d, width)),
                    (f"{side}.{l}.U", (d, width + config.d_edge)),
                    (f"{side}.{l}.b1", (d,)),
                    (f"{side}.{l}.W2", (d, d)),
                    (f"{side}.{l}.b2", (d,)),
                ]
                width = d
    shapes += [("readout.Q", (d, d)), ("readout.G", (d, d))]
    if config.modulation:
        shapes += [
            ("film.W_gamma", (d, d)),
            ("film.U_gamma", (d, d)),
            ("film.b_gamma", (d,)),
            ("film.W_beta", (d, d)),
            ("film.U_beta", (d, d)),
            ("film.b_beta", (d,)),
        ]
    shapes += [("match.W", (config.match_dim, 4 * d)), ("match.b", (config.match_dim,))]
    shapes += [("head.w", (config.match_dim,)), ("head.b", (1,))]
    params: Params = {}
    for name, shape in shapes:
        if len(shape) == 2:
            data = _glorot(rng, *shape)
        elif name == "head.w":
            # a vector weight: fan_in = match_dim, fan_out = 1
            a = 0.01 * np.sqrt(6.0 / (shape[0] + 1))
            data = rng.uniform(-a, a, size=shape)
        elif name == "head.b":
            data = np.full(shape, float(head_bias))
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# per-graph structure and batching


def _check_dims(g: LabeledDigraph, config: ModelConfig) -> None:
    dn = g.node_features.shape[1]
    de = g.edge_features.shape[1]
    if (dn, de) != (config.d_node, config.d_edge):
        raise ValueError(f"graph feature dims ({dn}, {de}) do not match config ({config.d_node}, {config.d_edge})")


def init_edge_messages(g: LabeledDigraph) -> Tensor:
    """Initial edge state table: row ``i`` is ``x_src || x_edge || x_dst`` for edge ``i``."""
    xn = g.node_features
    return Tensor(np.concatenate([xn[g.src], g.edge_features, xn[g.dst]], axis=1).reshape(g.num_edges, -1))


def _preceding_coo(g: LabeledDigraph, exclude_backtrack: bool):
    rows, cols, vals = [], [], []
    src, dst = g.src, g.dst
    for e in range(g.num_edges):
        u = src[e]
        prev = g.in_edges[g.in_ptr[u] : g.in_ptr[u + 1]]
        if exclude_backtrack:
            prev = prev[src[prev] != dst[e]]
        if prev.size:
            rows.append(np.full(prev.size, e))
            cols.append(prev)
            vals.append(np.full(prev.size, 1.0 / prev.size))
    if not rows:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def preceding_operator(g: LabeledDigraph, exclude_backtrack: bool = False) -> SparseOp:
    """Row ``e`` averages the states of the edges preceding ``e``; empty rows give zeros."""
    r, c, v = _preceding_coo(g, exclude_backtrack)
    return SparseOp.from_coo(r, c, v, (g.num_edges, g.num_edges))


@dataclass(frozen=True)
class GraphPieces:
    """Everything a batch needs from one graph, precomputed once."""

    num_nodes: int
    num_edges: int
    src: np.ndarray
    dst: np.ndarray
    node_x: np.ndarray
    edge_x: np.ndarray
    edge_init: np.ndarray
    prec: tuple[np.ndarray, np.ndarray, np.ndarray]

    @classmethod
    def of(cls, g: LabeledDigraph, config: ModelConfig) -> "GraphPieces":
        _check_dims(g, config)
        xn, xe = g.node_features, g.edge_features
        init = np.concatenate([xn[g.src], xe, xn[g.dst]], axis=1).reshape(g.num_edges, config.d_0)
        return cls(
            g.num_nodes,
            g.num_edges,
            np.asarray(g.src),
            np.asarray(g.dst),
            np.asarray(xn),
            np.asarray(xe),
            init,
            _preceding_coo(g, config.exclude_backtrack),
        )


class Batch:
    """Block-diagonal stack of graphs (one block per pair in a minibatch).

    Sparse operators are built on first use, so an edge-centric forward pass
    never pays for the node-level ones.
    """

    def __init__(self, pieces: Sequence[GraphPieces]):
        self.pieces = tuple(pieces)
        b = self.size = len(self.pieces)
        ne = np.array([p.num_edges for p in self.pieces], dtype=np.int64)
        nn = np.array([p.num_nodes for p in self.pieces], dtype=np.int64)
        self.edges_per_graph = ne
        self._eoff = np.concatenate([[0], np.cumsum(ne)]).astype(np.int64)
        self._noff = np.concatenate([[0], np.cumsum(nn)]).astype(np.int64)
        self.num_edges, self.num_nodes = int(self._eoff[-1]), int(self._noff[-1])
        self._edge_graph = np.repeat(np.arange(b), ne)
        self._node_graph = np.repeat(np.arange(b), nn)

    @classmethod
    def of(cls, pieces: Sequence[GraphPieces]) -> "Batch":
        return cls(pieces)

    def _cat(self, name: str, offsets: np.ndarray | None = None) -> np.ndarray:
        parts = [getattr(p, name) for p in self.pieces]
        if offsets is not None:
            parts = [a + offsets[i] for i, a in enumerate(parts)]
        return np.concatenate(parts) if parts else np.zeros(0, np.int64)

    @cached_property
    def edge_init(self) -> np.ndarray:
        return np.concatenate([p.edge_init for p in self.pieces], axis=0)

    @cached_property
    def node_x(self) -> np.ndarray:
        return np.concatenate([p.node_x for p in self.pieces], axis=0)

    @cached_property
    def edge_x(self) -> np.ndarray:
        return np.concatenate([p.edge_x for p in self.pieces], axis=0)

    @cached_property
    def prec(self) -> SparseOp:
        E = self.num_edges
        rows = [p.prec[0] + self._eoff[i] for i, p in enumerate(self.pieces)]
        cols = [p.prec[1] + self._eoff[i] for i, p in enumerate(self.pieces)]
        vals = [p.prec[2] for p in self.pieces]
        if not rows:
            z = np.zeros(0, np.int64)
            return SparseOp.from_coo(z, z, np.zeros(0), (E, E))
        return SparseOp.from_coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (E, E))

    @cached_property
    def edge_readout(self) -> SparseOp:
        E = self.num_edges
        return SparseOp.from_coo(self._edge_graph, np.arange(E), np.ones(E), (self.size, E))

    @cached_property
    def edge_broadcast(self) -> SparseOp:
        E = self.num_edges
        return SparseOp.from_coo(np.arange(E), self._edge_graph, np.ones(E), (E, self.size))

    @cached_property
    def node_readout(self) -> SparseOp:
        N = self.num_nodes
        return SparseOp.from_coo(self._node_graph, np.arange(N), np.ones(N), (self.size, N))

    @cached_property
    def node_broadcast(self) -> SparseOp:
        N = self.num_nodes
        return SparseOp.from_coo(np.arange(N), self._node_graph, np.ones(N), (N, self.size))

    @cached_property
    def gather_src(self) -> SparseOp:
        E, N = self.num_edges, self.num_nodes
        return SparseOp.from_coo(np.arange(E), self._cat("src", self._noff), np.ones(E), (E, N))

    @cached_property
    def in_mean(self) -> SparseOp:
        E, N = self.num_edges, self.num_nodes
        dst = self._cat("dst", self._noff)
        indeg = np.bincount(dst, minlength=N)
        return SparseOp.from_coo(dst, np.arange(E), 1.0 / np.maximum(indeg[dst], 1), (N, E))


# ---------------------------------------------------------------------------
# the model, one equation per function


def _act(x: Tensor, config: ModelConfig) -> Tensor:
    return ad.leaky_relu(x, config.leaky_slope)


def edge_layer(states: Tensor, prec: SparseOp, layer: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """``h_uv <- act(W h_uv + U mean{h_iu} + b)``, zero mean for edges without predecessors."""
    agg = ad.spmm(prec, states)
    pre = ad.add(ad.add(ad.linear(states, layer["W"]), ad.linear(agg, layer["U"])), layer["b"])
    out = _act(pre, config)
    if config.residual and out.shape == states.shape:
        out = ad.add(out, states)
    return out


def _layer(params: Params, side: str, l: int, keys: Sequence[str]) -> dict[str, Tensor]:
    return {k: params[f"{side}.{l}.{k}"] for k in keys}


def _encode_edges(batch: Batch, side: str, params: Params, config: ModelConfig) -> Tensor:
    h = Tensor(batch.edge_init)
    if config.input_projection:
        h = ad.linear(h, params[f"{side}.proj"])
    for l in range(1, config.num_layers + 1):
        h = edge_layer(h, batch.prec, _layer(params, side, l, ("W", "U", "b")), config)
    return h


def _encode_nodes(batch: Batch, side: str, params: Params, config: ModelConfig) -> Tensor:
    # GIN-style node update over incoming edges, two-layer MLP
    h = Tensor(batch.node_x)
    xe = Tensor(batch.edge_x)
    if config.input_projection:
        h = ad.linear(h, params[f"{side}.proj"])
    for l in range(1, config.num_layers + 1):
        p = _layer(params, side, l, ("W1", "U", "b1", "W2", "b2"))
        msg = ad.concat([ad.spmm(batch.gather_src, h), xe], axis=1)
        agg = ad.spmm(batch.in_mean, msg)
        z = _act(ad.add(ad.add(ad.linear(h, p["W1"]), ad.linear(agg, p["U"])), p["b1"]), config)
        h = _act(ad.add(ad.linear(z, p["W2"]), p["b2"]), config)
    return h


def encode(batch: Batch, side: Side, params: Params, config: ModelConfig) -> Tensor:
    """Final-layer state table for one side: edge rows, or node rows for the node-centric ablation."""
    if config.encoder == "edge":
        return _encode_edges(batch, side, params, config)
    return _encode_nodes(batch, side, params, config)


def _readout_ops(batch: Batch, config: ModelConfig) -> tuple[SparseOp, SparseOp]:
    if config.encoder == "edge":
        return batch.edge_readout, batch.edge_broadcast
    return batch.node_readout, batch.node_broadcast


def _pooled(states: Tensor, readout: SparseOp, config: ModelConfig) -> Tensor:
    pooled = ad.spmm(readout, states)
    return pooled if config.readout_scale == 1.0 else ad.scale(pooled, config.readout_scale)


def query_readout(states: Tensor, readout: SparseOp, q_mat: Tensor, config: ModelConfig) -> Tensor:
    """``h_Q = act(Q . c * sum of edge states)``, one row per query; ``c`` is ``config.readout_scale``."""
    return _act(ad.linear(_pooled(states, readout, config), q_mat), config)


def film_factors(h: Tensor, hq: Tensor, params: Params, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Scaling and shifting factors from an edge state and the query vector.

    ``hq`` may be one row per edge or a single vector broadcast to all rows.
    """
    act = (lambda x: ad.sigmoid(x)) if config.film_activation == "sigmoid" else (lambda x: _act(x, config))
    gamma = act(
        ad.add(ad.add(ad.linear(h, params["film.W_gamma"]), ad.linear(hq, params["film.U_gamma"])), params["film.b_gamma"])
    )
    beta = act(
        ad.add(ad.add(ad.linear(h, params["film.W_beta"]), ad.linear(hq, params["film.U_beta"])), params["film.b_beta"])
    )
    return gamma, beta


def modulate(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``(gamma + 1) * h + beta``."""
    return ad.add(ad.hadamard(ad.add_const(gamma, 1.0), h), beta)


def graph_readout(states: Tensor, readout: SparseOp, g_mat: Tensor, config: ModelConfig) -> Tensor:
    return _act(ad.linear(_pooled(states, readout, config), g_mat), config)


def match(x: Tensor, y: Tensor, params: Params, config: ModelConfig) -> Tensor:
    """Fully connected layer on ``x || y || x - y || x * y``."""
    z = ad.concat([x, y, ad.sub(x, y), ad.hadamard(x, y)], axis=-1)
    return _act(ad.add(ad.linear(z, params["match.W"]), params["match.b"]), config)


@dataclass
class Forward:
    pred: Tensor
    logit: Tensor
    h_query: Tensor
    h_graph: Tensor
    gamma: Tensor | None
    beta: Tensor | None

    def film_penalty(self) -> Tensor:
        """Sum of ``||gamma||^2 + ||beta||^2`` over all graph edges in the batch."""
        if self.gamma is None:
            return Tensor(np.zeros(1))
        return ad.add(ad.sq_norm(self.gamma), ad.sq_norm(self.beta))


def forward(qbatch: Batch, gbatch: Batch, params: Params, config: ModelConfig) -> Forward:
    if qbatch.size != gbatch.size:
        raise ValueError("query and graph batches differ in size")
    if config.encoder == "edge" and np.any(qbatch.edges_per_graph == 0):
        raise ValueError("a query must have at least one edge")
    hq_states = encode(qbatch, "query", params, config)
    hg_states = encode(gbatch, "graph", params, config)
    q_read, _ = _readout_ops(qbatch, config)
    g_read, g_bcast = _readout_ops(gbatch, config)
    h_q = query_readout(hq_states, q_read, params["readout.Q"], config)
    gamma = beta = None
    if config.modulation:
        hq_rows = ad.spmm(g_bcast, h_q)
        gamma, beta = film_factors(hg_states, hq_rows, params, config)
        hg_states = modulate(hg_states, gamma, beta)
    h_g = graph_readout(hg_states, g_read, params["readout.G"], config)
    m = match(h_q, h_g, params, config)
    logit = ad.add(ad.matvec(m, params["head.w"]), params["head.b"])
    return Forward(ad.relu(logit), logit, h_q, h_g, gamma, beta)


def _batches(queries, graphs, config, batch_size):
    for i in range(0, len(queries), batch_size):
        qs = [GraphPieces.of(q, config) if isinstance(q, LabeledDigraph) else q for q in queries[i : i + batch_size]]
        gs = [GraphPieces.of(g, config) if isinstance(g, LabeledDigraph) else g for g in graphs[i : i + batch_size]]
        yield Batch.of(qs), Batch.of(gs)


def predict_many(
    queries: Sequence[LabeledDigraph | GraphPieces],
    graphs: Sequence[LabeledDigraph | GraphPieces],
    params: Params,
    config: ModelConfig,
    batch_size: int = 64,
) -> np.ndarray:
    if len(queries) != len(graphs):
        raise ValueError("queries and graphs differ in length")
    out = []
    with ad.no_grad():
        for qb, gb in _batches(queries, graphs, config, batch_size):
            out.append(forward(qb, gb, params, config).pred.data)
    return np.concatenate(out) if out else np.zeros(0)


def predict_count(q: LabeledDigraph, g: LabeledDigraph, params: Params, config: ModelConfig) -> float:
    """Predicted (non-negative, real) number of subgraphs of ``g`` isomorphic to ``q``."""
    return float(predict_many([q], [g], params, config)[0])


def graph_embedding(g: LabeledDigraph, params: Params, config: ModelConfig, side: Side = "graph") -> np.ndarray:
    """Unmodulated whole-graph vector ``act(M . sum of states)`` using one side's encoder."""
    batch = Batch.of([GraphPieces.of(g, config)])
    mat = params["readout.Q" if side == "query" else "readout.G"]
    with ad.no_grad():
        states = encode(batch, side, params, config)
        read, _ = _readout_ops(batch, config)
        return query_readout(states, read, mat, config).data[0]


# ---------------------------------------------------------------------------
# checkpoints


def params_to_dict(params: Params) -> dict:
    return {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for k, t in params.items()}


def params_from_dict(obj: dict) -> Params:
    out: Params = {}
    for name, rec in obj.items():
        data = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def dumps_checkpoint(params: Params, config: ModelConfig, extra: dict | None = None) -> str:
    obj = {"config": asdict(config), "params": params_to_dict(params)}
    if extra:
        obj.update(extra)
    return json.dumps(obj, sort_keys=True)


def save_checkpoint(path, params: Params, config: ModelConfig, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(params, config, extra))


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    with open(path) as fh:
        obj = json.load(fh)
    return params_from_dict(obj["params"]), ModelConfig.from_dict(obj["config"])
