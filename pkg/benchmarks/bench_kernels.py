"""Time the compiled kernels against the pure numpy/python fallback.

    python benchmarks/bench_kernels.py [--pairs 40] [--steps 20] [--repeat 3]

Each backend runs in its own interpreter because the choice is made at import
time from ``COUNTGNN_DISABLE_NUMBA``.  The first numba call compiles (or loads
the on-disk cache), so one warm-up round is excluded from the timings.  Both
backends must produce the same counts and the same losses; a mismatch is
reported and makes the script exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def worker(pairs: int, steps: int, repeat: int) -> dict:
    import numpy as np

    from countgnn import _kernels
    from countgnn.datagen import GenSpec, _stream, gen_graph, gen_query
    from countgnn.exact import count_subgraphs
    from countgnn.graph import Triple
    from countgnn.model import Batch, GraphPieces, ModelConfig, forward, init_params
    from countgnn.training import objective

    # a single label and dense graphs make the backtracking search do real work
    spec = GenSpec(graph_nodes=(10, 14), graph_edge_factor=(5.0, 8.0), num_node_labels=1, num_edge_labels=1)
    queries = [gen_query(spec, _stream(1, 0, i)) for i in range(pairs)]
    graphs = [gen_graph(spec, _stream(1, 1, i)) for i in range(pairs)]

    def count_all():
        return [count_subgraphs(q, g).embeddings for q, g in zip(queries, graphs)]

    counts = count_all()
    t_count = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        count_all()
        t_count.append(time.perf_counter() - t0)

    cfg = ModelConfig.for_vocab(spec.vocab)
    params = init_params(cfg, seed=0, head_bias=1.0)
    tri = [Triple(q, g, c) for q, g, c in zip(queries[:16], graphs[:16], counts[:16])]
    qb = Batch.of([GraphPieces.of(t.query, cfg) for t in tri])
    gb = Batch.of([GraphPieces.of(t.graph, cfg) for t in tri])
    targets = np.array([t.count for t in tri], dtype=np.float64)

    def step():
        for p in params.values():
            p.grad = None
        loss = objective(forward(qb, gb, params, cfg), targets, params, 1e-6, 1e-5)
        loss.backward()
        return loss.item()

    first_loss = step()
    t_step = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(steps):
            step()
        t_step.append((time.perf_counter() - t0) / steps)
    return {
        "backend": _kernels.BACKEND,
        "count_s": min(t_count),
        "step_s": min(t_step),
        "counts": counts,
        "loss": first_loss,
        "graph_edges": int(gb.num_edges),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=40)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.pairs, args.steps, args.repeat)))
        return 0

    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, COUNTGNN_DISABLE_NUMBA=flag)
        cmd = [sys.executable, __file__, "--worker", "--pairs", str(args.pairs), "--steps", str(args.steps), "--repeat", str(args.repeat)]
        out = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout)
        results[r["backend"]] = r

    nb, np_ = results.get("numba"), results["numpy"]
    print(f"{args.pairs} exact counts, minibatch of 16 pairs ({np_['graph_edges']} graph edges)")
    print(f"{'kernel':<28}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for key, label in (("count_s", "exact counting (total)"), ("step_s", "train step fwd+bwd")):
        if nb:
            print(f"{label:<28}{np_[key]:>11.4f}s{nb[key]:>11.4f}s{np_[key] / nb[key]:>9.1f}x")
        else:
            print(f"{label:<28}{np_[key]:>11.4f}s{'n/a':>12}")
    if nb and (nb["counts"] != np_["counts"] or abs(nb["loss"] - np_["loss"]) > 1e-9 * max(1.0, abs(nb["loss"]))):
        print("MISMATCH between backends", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
