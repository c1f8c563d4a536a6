"""Command line: ``countgnn {gen,truth,train,eval,predict}``.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 exact-count
timeout.  Settings resolve as command-line flag, then ``--config`` JSON, then
built-in default; the resolved settings are logged at startup.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from countgnn import datagen
from countgnn.datagen import GenSpec
from countgnn.exact import DEFAULT_BUDGET, CountTimeout, count_subgraphs
from countgnn.graph import GraphError, LabeledDigraph, from_json
from countgnn.model import ModelConfig, init_params, params_from_dict, params_to_dict, predict_count
from countgnn.training import (
    TrainConfig,
    baseline_mean,
    evaluate,
    evaluate_predictor,
    exact_predictor,
    fit,
    history_csv,
)

log = logging.getLogger("countgnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TIMEOUT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve for bad data
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# defaults live here, not in argparse, so that a config file can sit between them and the flags
_DEFAULTS: dict[str, dict[str, Any]] = {
    "gen": {
        "n_queries": GenSpec.n_queries,
        "n_graphs": GenSpec.n_graphs,
        "n_triples": GenSpec.n_triples,
        "query_nodes": list(GenSpec.query_nodes),
        "graph_nodes": list(GenSpec.graph_nodes),
        "query_edge_factor": GenSpec.query_edge_factor,
        "graph_edge_factor": list(GenSpec.graph_edge_factor),
        "num_node_labels": GenSpec.num_node_labels,
        "num_edge_labels": GenSpec.num_edge_labels,
        "budget": DEFAULT_BUDGET,
        "allow_self_loops": False,
        "allow_duplicate_edges": False,
        "seed": 0,
        "jobs": None,
    },
    "truth": {"budget": DEFAULT_BUDGET, "jobs": None},
    "train": {
        "split": [0.4, 0.1, 0.5],
        "variant": "full",
        "hidden": 64,
        "layers": 3,
        "match_dim": 64,
        "leaky_slope": 0.01,
        "residual": False,
        "exclude_backtrack": False,
        "film_activation": "leaky_relu",
        "input_projection": False,
        "readout_scale": 0.01,
        "lam": TrainConfig.lam,
        "mu": TrainConfig.mu,
        "lr": TrainConfig.lr,
        "epochs": TrainConfig.epochs,
        "batch_size": TrainConfig.batch_size,
        "patience": TrainConfig.patience,
        "max_steps": None,
        "head_leak": TrainConfig.head_leak,
        "seed": 0,
        "embeddings": False,
        "history": None,
    },
    "eval": {
        "part": "all",
        "split": None,
        "seed": None,
        "embeddings": None,
        "exact": False,
        "baseline": False,
        "model": None,
        "jobs": None,
    },
    "predict": {"model": None, "exact": False, "embeddings": False, "budget": DEFAULT_BUDGET},
}

# switches of the run itself; never part of the resolved settings
_NOT_CONFIGURABLE = {"command", "config", "verbose", "quiet"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of settings (flags override it)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")


def _flag(p, name, **kw):
    # every configurable flag defaults to None so "not given" is detectable
    kw.setdefault("default", None)
    p.add_argument(name, **kw)


def _switch(p, name, help=None):
    p.add_argument(name, action="store_const", const=True, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="countgnn", description="Exact and learned subgraph isomorphism counting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic labelled corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    _flag(p, "--n-queries", type=int)
    _flag(p, "--n-graphs", type=int)
    _flag(p, "--n-triples", type=int, help="pairs sampled from queries x graphs; 0 keeps all")
    _flag(p, "--query-nodes", type=int, nargs=2, metavar=("MIN", "MAX"))
    _flag(p, "--graph-nodes", type=int, nargs=2, metavar=("MIN", "MAX"))
    _flag(p, "--query-edge-factor", type=float)
    _flag(p, "--graph-edge-factor", type=float, nargs="+", metavar="F", help="one factor, or LOW HIGH drawn per graph")
    _flag(p, "--num-node-labels", type=int)
    _flag(p, "--num-edge-labels", type=int)
    _flag(p, "--budget", type=int, help="backtracking step cap per pair")
    _switch(p, "--allow-self-loops")
    _switch(p, "--allow-duplicate-edges")
    _flag(p, "--seed", type=int)
    _flag(p, "--jobs", type=int)

    p = sub.add_parser("truth", help="label query/graph pairs with exact counts")
    _add_common(p)
    p.add_argument("--pairs", help="JSON lines with 'query' and 'graph' (paths or inline graphs)")
    p.add_argument("--queries", help="directory of query JSON files (paired with every graph)")
    p.add_argument("--graphs", help="directory of graph JSON files")
    p.add_argument("--out", required=True, help="output triples file")
    _flag(p, "--budget", type=int)
    _flag(p, "--jobs", type=int)

    p = sub.add_parser("train", help="train a model on a triple file")
    _add_common(p)
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _flag(p, "--history", help="history CSV path (default: next to the checkpoint)")
    _flag(p, "--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    _flag(p, "--variant", choices=["full", "no-modulation", "node-centric"])
    _flag(p, "--hidden", type=int)
    _flag(p, "--layers", type=int)
    _flag(p, "--match-dim", type=int)
    _flag(p, "--leaky-slope", type=float)
    _switch(p, "--residual")
    _switch(p, "--exclude-backtrack")
    _flag(p, "--film-activation", choices=["leaky_relu", "sigmoid"])
    _switch(p, "--input-projection")
    _flag(p, "--readout-scale", type=float, help="constant factor on sum readouts")
    _flag(p, "--lam", type=float, help="FiLM regularizer weight")
    _flag(p, "--mu", type=float, help="L2 weight")
    _flag(p, "--lr", type=float)
    _flag(p, "--epochs", type=int)
    _flag(p, "--batch-size", type=int)
    _flag(p, "--patience", type=int)
    _flag(p, "--max-steps", type=int)
    _flag(p, "--head-leak", type=float)
    _flag(p, "--seed", type=int)
    _switch(p, "--embeddings", help="train on embedding counts instead of subgraph counts")

    p = sub.add_parser("eval", help="score a model (or a reference predictor) on triples")
    _add_common(p)
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    _flag(p, "--model")
    _switch(p, "--exact", help="score the exact counter instead of a model")
    _switch(p, "--baseline", help="score the constant training-mean predictor")
    _flag(p, "--part", choices=["all", "train", "val", "test"])
    _flag(p, "--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    _flag(p, "--seed", type=int)
    _switch(p, "--embeddings")
    _flag(p, "--jobs", type=int)

    p = sub.add_parser("predict", help="predict one count")
    _add_common(p)
    p.add_argument("--query", required=True)
    p.add_argument("--graph", required=True)
    _flag(p, "--model")
    _switch(p, "--exact")
    _switch(p, "--embeddings")
    _flag(p, "--budget", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, the optional config file and explicit flags."""
    settings = dict(_DEFAULTS[args.command])
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(cfg) - set(settings))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        settings.update(cfg)
    for k, v in vars(args).items():
        if k in _NOT_CONFIGURABLE or v is None:
            continue
        settings[k] = v
    return settings


# ---------------------------------------------------------------------------
# helpers


def _read_graph(path: str) -> LabeledDigraph:
    try:
        with open(path) as fh:
            return from_json(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _read_triples(path: str, semantics: str = "subgraphs", require_counts: bool = True):
    try:
        return datagen.read_triples(path, semantics, require_counts)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _semantics(embeddings: bool) -> str:
    return "embeddings" if embeddings else "subgraphs"


def _jobs(n: int | None) -> int:
    return max(1, n if n else (os.cpu_count() or 1))


def _load_model(path: str) -> tuple[dict, ModelConfig, dict]:
    try:
        with open(path) as fh:
            obj = json.load(fh)
        return params_from_dict(obj["params"]), ModelConfig.from_dict(obj["config"]), obj["config"].get("training", {})
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path} is not a checkpoint: {exc}") from exc


def _split(triples, fractions, seed):
    try:
        return datagen.split(triples, fractions, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def _factor(value):
    if isinstance(value, (int, float)):
        return float(value)
    if len(value) == 1:
        return float(value[0])
    if len(value) == 2:
        return (float(value[0]), float(value[1]))
    raise UsageError("--graph-edge-factor takes one or two numbers")


def cmd_gen(s: dict) -> int:
    n_triples = s["n_triples"] if s["n_triples"] else None
    try:
        spec = GenSpec(
            n_queries=s["n_queries"],
            n_graphs=s["n_graphs"],
            n_triples=n_triples,
            query_nodes=tuple(s["query_nodes"]),
            graph_nodes=tuple(s["graph_nodes"]),
            query_edge_factor=s["query_edge_factor"],
            graph_edge_factor=_factor(s["graph_edge_factor"]),
            num_node_labels=s["num_node_labels"],
            num_edge_labels=s["num_edge_labels"],
            seed=s["seed"],
            max_count_budget=s["budget"],
            allow_self_loops=bool(s["allow_self_loops"]),
            allow_duplicate_edges=bool(s["allow_duplicate_edges"]),
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    corpus = datagen.generate(spec, jobs=_jobs(s["jobs"]))
    datagen.write_corpus(s["out"], corpus)
    log.info("wrote %d queries, %d graphs, %d triples to %s", len(corpus.queries), len(corpus.graphs), len(corpus.triples), s["out"])
    return EXIT_OK


def _ref_for(value, base: Path, out_dir: Path):
    if isinstance(value, str):
        return os.path.relpath((base / value).resolve(), out_dir.resolve())
    return value


def cmd_truth(s: dict) -> int:
    out = Path(s["out"])
    out_dir = out.parent
    records: list[dict] = []
    if s.get("pairs"):
        if s.get("queries") or s.get("graphs"):
            raise UsageError("use either --pairs or --queries/--graphs")
        base = Path(s["pairs"]).parent
        try:
            with open(s["pairs"]) as fh:
                raw = [json.loads(line) for line in fh if line.strip()]
        except OSError as exc:
            raise DataError(f"cannot read {s['pairs']}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed pairs file: {exc}") from exc
        pairs = _read_triples(s["pairs"], require_counts=False)
        for rec, t in zip(raw, pairs):
            records.append({"query": _ref_for(rec["query"], base, out_dir), "graph": _ref_for(rec["graph"], base, out_dir)})
        queries = [t.query for t in pairs]
        graphs = [t.graph for t in pairs]
        index = [(i, i) for i in range(len(pairs))]
    elif s.get("queries") and s.get("graphs"):
        qpaths = sorted(Path(s["queries"]).glob("*.json"))
        gpaths = sorted(Path(s["graphs"]).glob("*.json"))
        if not qpaths or not gpaths:
            raise DataError("no *.json files in the query or graph directory")
        queries = [_read_graph(str(p)) for p in qpaths]
        graphs = [_read_graph(str(p)) for p in gpaths]
        index = [(i, j) for i in range(len(queries)) for j in range(len(graphs))]
        for i, j in index:
            records.append(
                {
                    "query": os.path.relpath(qpaths[i].resolve(), out_dir.resolve()),
                    "graph": os.path.relpath(gpaths[j].resolve(), out_dir.resolve()),
                }
            )
    else:
        raise UsageError("truth needs --pairs, or both --queries and --graphs")

    triples = datagen.make_triples(queries, graphs, s["budget"], index, jobs=_jobs(s["jobs"]))
    done = {(t.query_id, t.graph_id) for t in triples}
    by_pair = {(t.query_id, t.graph_id): t for t in triples}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for (i, j), rec in zip(index, records):
            key = (f"q{i}", f"g{j}")
            if key not in done:
                continue
            t = by_pair[key]
            rec.update(subgraphs=t.subgraphs, embeddings=t.embeddings, automorphisms=t.automorphisms)
            fh.write(json.dumps(rec) + "\n")
    log.info("labelled %d of %d pairs into %s", len(triples), len(index), out)
    return EXIT_OK


def _model_config(s: dict, triples) -> ModelConfig:
    d_node = triples[0].graph.node_features.shape[1]
    d_edge = triples[0].graph.edge_features.shape[1]
    base = ModelConfig(
        d_node=d_node,
        d_edge=d_edge,
        num_layers=s["layers"],
        hidden=s["hidden"],
        match_dim=s["match_dim"],
        leaky_slope=s["leaky_slope"],
        residual=bool(s["residual"]),
        exclude_backtrack=bool(s["exclude_backtrack"]),
        film_activation=s["film_activation"],
        input_projection=bool(s["input_projection"]),
        readout_scale=s["readout_scale"],
    )
    return base.ablation(s["variant"])


def cmd_train(s: dict) -> int:
    semantics = _semantics(s["embeddings"])
    triples = _read_triples(s["triples"], semantics)
    if not triples:
        raise UsageError(f"{s['triples']} holds no triples")
    train, val, _ = _split(triples, s["split"], s["seed"])
    try:
        config = _model_config(s, triples)
        tconfig = TrainConfig(
            lam=s["lam"],
            mu=s["mu"],
            lr=s["lr"],
            epochs=s["epochs"],
            batch_size=s["batch_size"],
            seed=s["seed"],
            patience=s["patience"],
            max_steps=s["max_steps"],
            head_leak=s["head_leak"],
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    head_bias = float(np.mean([t.count for t in train]))
    params = init_params(config, seed=s["seed"], head_bias=head_bias)
    best, history = fit(train, val, params, config, tconfig, on_epoch=lambda r: log.info("epoch %(epoch)d loss %(train_loss).4f val_mae %(val_mae).4f", r))
    training = {
        "split": list(s["split"]),
        "seed": s["seed"],
        "semantics": semantics,
        "variant": s["variant"],
        "train": {f.name: getattr(tconfig, f.name) for f in fields(tconfig)},
    }
    obj = {"config": {**asdict(config), "training": training}, "params": params_to_dict(best)}
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(obj, sort_keys=True))
    hist = Path(s["history"]) if s.get("history") else out.with_suffix(".history.csv")
    hist.write_text(history_csv(history))
    log.info("wrote %s and %s", out, hist)
    return EXIT_OK


def cmd_eval(s: dict) -> int:
    modes = sum(bool(x) for x in (s.get("model"), s["exact"], s["baseline"]))
    if modes != 1:
        raise UsageError("eval needs exactly one of --model, --exact, --baseline")
    training: dict = {}
    params = config = None
    if s.get("model"):
        params, config, training = _load_model(s["model"])
    embeddings = s["embeddings"] if s["embeddings"] is not None else training.get("semantics") == "embeddings"
    semantics = _semantics(embeddings)
    triples = _read_triples(s["triples"], semantics)
    if not triples:
        raise UsageError(f"{s['triples']} holds no triples")
    split_fr = s["split"] or training.get("split") or [0.4, 0.1, 0.5]
    seed = s["seed"] if s["seed"] is not None else training.get("seed", 0)
    parts = dict(zip(("train", "val", "test"), _split(triples, split_fr, seed)))
    chosen = triples if s["part"] == "all" else parts[s["part"]]
    if not chosen:
        raise UsageError(f"the {s['part']} part is empty")
    jobs = _jobs(s["jobs"])
    if s["exact"]:
        metrics = evaluate_predictor(exact_predictor(semantics), chosen, jobs=jobs)
    elif s["baseline"]:
        metrics = evaluate_predictor(baseline_mean(parts["train"]), chosen)
    else:
        metrics = evaluate(params, chosen, config, jobs=jobs)
    out = Path(s["out"])
    out.write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
    log.info("mae %.4f q_error_mean %.4f on %d triples", metrics.mae, metrics.q_error_mean, metrics.n_triples)
    return EXIT_OK


def cmd_predict(s: dict) -> int:
    q = _read_graph(s["query"])
    g = _read_graph(s["graph"])
    if s["exact"]:
        r = count_subgraphs(q, g, s["budget"])
        print(r.embeddings if s["embeddings"] else r.subgraphs)
        return EXIT_OK
    if not s.get("model"):
        raise UsageError("predict needs --model or --exact")
    params, config, _ = _load_model(s["model"])
    try:
        value = predict_count(q, g, params, config)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(repr(value))
    return EXIT_OK


_COMMANDS = {"gen": cmd_gen, "truth": cmd_truth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        settings = resolve(args)
        log.info("resolved config for %s: %s", args.command, json.dumps(settings, sort_keys=True))
        return _COMMANDS[args.command](settings)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except CountTimeout as exc:
        log.error("exact count timed out after %d steps", exc.steps)
        return EXIT_TIMEOUT
    except (DataError, GraphError, datagen.DegenerateCorpus) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
