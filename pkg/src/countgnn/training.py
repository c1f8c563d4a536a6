"""Objective, Adam training loop, metrics and reference predictors."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from countgnn import autodiff as ad
from countgnn.autodiff import Tensor
from countgnn.exact import count_subgraphs
from countgnn.graph import LabeledDigraph, Triple
from countgnn.model import Batch, GraphPieces, ModelConfig, Params, forward, predict_many

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "Metrics",
    "Adam",
    "loss",
    "objective",
    "fit",
    "mae",
    "q_error",
    "evaluate",
    "evaluate_predictor",
    "baseline_mean",
    "exact_predictor",
    "film_magnitude",
]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-6
    mu: float = 1e-5
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 20
    max_steps: int | None = None
    # slope used in place of the final ReLU while training only
    head_leak: float = 0.01

    def __post_init__(self) -> None:
        if self.lam < 0 or self.mu < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.head_leak < 0:
            raise ValueError("head_leak must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


# ---------------------------------------------------------------------------
# metrics


def mae(preds: Sequence[float], truths: Sequence[float]) -> float:
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("preds and truths differ in length")
    return float(np.mean(np.abs(p - t))) if p.size else 0.0


def q_error(preds: Sequence[float], truths: Sequence[float]) -> np.ndarray:
    """Per-item ``max(n / n_hat, n_hat / n)`` with both clamped to at least 1."""
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("preds and truths differ in length")
    p = np.maximum(p, 1.0)
    t = np.maximum(t, 1.0)
    return np.maximum(p / t, t / p)


@dataclass
class Metrics:
    mae: float
    q_error_mean: float
    q_error_median: float
    inference_time_s: float
    n_triples: int
    preds: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    truths: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "q_error_mean": self.q_error_mean,
            "q_error_median": self.q_error_median,
            "inference_time_s": self.inference_time_s,
            "n_triples": self.n_triples,
        }


Predictor = Callable[[Sequence[LabeledDigraph], Sequence[LabeledDigraph]], np.ndarray]


def evaluate_predictor(predict: Predictor, triples: Sequence[Triple], jobs: int = 1, chunk: int = 64) -> Metrics:
    """Run ``predict`` over all triples and time the whole pass."""
    qs = [t.query for t in triples]
    gs = [t.graph for t in triples]
    truths = np.array([t.count for t in triples], dtype=np.float64)
    t0 = time.perf_counter()
    if jobs > 1 and len(triples) > chunk:
        spans = [(i, min(i + chunk, len(qs))) for i in range(0, len(qs), chunk)]
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(lambda s: np.asarray(predict(qs[s[0] : s[1]], gs[s[0] : s[1]])), spans))
        preds = np.concatenate(parts)
    else:
        preds = np.asarray(predict(qs, gs), dtype=np.float64)
    elapsed = time.perf_counter() - t0
    qe = q_error(preds, truths) if len(triples) else np.ones(0)
    return Metrics(
        mae=mae(preds, truths),
        q_error_mean=float(qe.mean()) if qe.size else 1.0,
        q_error_median=float(np.median(qe)) if qe.size else 1.0,
        inference_time_s=elapsed,
        n_triples=len(triples),
        preds=preds,
        truths=truths,
    )


def evaluate(params: Params, triples: Sequence[Triple], config: ModelConfig, jobs: int = 1) -> Metrics:
    return evaluate_predictor(lambda q, g: predict_many(q, g, params, config), triples, jobs=jobs)


def baseline_mean(train: Sequence[Triple]) -> Predictor:
    """Predict the training-mean count for everything."""
    if not train:
        raise ValueError("baseline needs at least one training triple")
    value = float(np.mean([t.count for t in train]))

    def predict(queries, graphs):
        return np.full(len(queries), value)

    predict.value = value  # type: ignore[attr-defined]
    return predict


def exact_predictor(semantics: str = "subgraphs") -> Predictor:
    def predict(queries, graphs):
        out = []
        for q, g in zip(queries, graphs):
            r = count_subgraphs(q, g)
            out.append(r.subgraphs if semantics == "subgraphs" else r.embeddings)
        return np.array(out, dtype=np.float64)

    return predict


# ---------------------------------------------------------------------------
# objective


def objective(fw, targets: np.ndarray, params: Params, lam: float, mu: float, head_leak: float = 0.0) -> Tensor:
    """Mean absolute error plus ``lam`` * FiLM penalty plus ``mu`` * squared parameter norm.

    With ``head_leak > 0`` the error is measured on a leaky version of the
    final ReLU, which keeps a gradient flowing for inputs predicted below zero.
    """
    pred = ad.leaky_relu(fw.logit, head_leak) if head_leak else fw.pred
    err = ad.absolute(ad.sub(pred, Tensor(targets)))
    out = ad.scale(ad.total(err), 1.0 / len(targets))
    if lam and fw.gamma is not None:
        out = ad.add(out, ad.scale(fw.film_penalty(), lam))
    if mu:
        reg = None
        for p in params.values():
            term = ad.sq_norm(p)
            reg = term if reg is None else ad.add(reg, term)
        out = ad.add(out, ad.scale(reg, mu))
    return out


def loss(batch: Sequence[Triple], params: Params, config: ModelConfig, lam: float = 0.0, mu: float = 0.0) -> Tensor:
    if not batch:
        raise ValueError("empty batch")
    qb = Batch.of([GraphPieces.of(t.query, config) for t in batch])
    gb = Batch.of([GraphPieces.of(t.graph, config) for t in batch])
    targets = np.array([t.count for t in batch], dtype=np.float64)
    return objective(forward(qb, gb, params, config), targets, params, lam, mu)


class Adam:
    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _pieces_for(triples: Sequence[Triple], config: ModelConfig, cache: dict) -> tuple[list, list]:
    qs, gs = [], []
    for t in triples:
        for g, out in ((t.query, qs), (t.graph, gs)):
            key = id(g)
            if key not in cache:
                cache[key] = (g, GraphPieces.of(g, config))
            out.append(cache[key][1])
    return qs, gs


def fit(
    train: Sequence[Triple],
    val: Sequence[Triple],
    params: Params,
    config: ModelConfig,
    tconfig: TrainConfig = TrainConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Params, list[dict]]:
    """Train with Adam on shuffled minibatches; return the best-validation parameters and the history.

    ``params`` is updated in place; the returned dict is a copy taken at the
    epoch with the lowest validation MAE (training loss when ``val`` is empty).
    """
    if not train:
        raise ValueError("no training triples")
    cache: dict = {}
    tq, tg = _pieces_for(train, config, cache)
    vq, vg = _pieces_for(val, config, cache)
    targets = np.array([t.count for t in train], dtype=np.float64)
    vtruth = np.array([t.count for t in val], dtype=np.float64)
    rng = np.random.default_rng(tconfig.seed)
    opt = Adam(params, tconfig.lr, tconfig.beta1, tconfig.beta2, tconfig.eps)

    best = copy.deepcopy({k: p.data for k, p in params.items()})
    best_score = np.inf
    stale = 0
    steps = 0
    history: list[dict] = []
    full = None
    t_start = time.perf_counter()
    for epoch in range(1, tconfig.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), tconfig.batch_size):
            idx = order[i : i + tconfig.batch_size]
            if len(idx) == len(order):
                # full-batch training: one fixed stack serves every step
                idx = np.arange(len(order))
                if full is None:
                    full = (Batch.of(tq), Batch.of(tg))
                qb, gb = full
            else:
                qb = Batch.of([tq[j] for j in idx])
                gb = Batch.of([tg[j] for j in idx])
            opt.zero_grad()
            fw = forward(qb, gb, params, config)
            value = objective(fw, targets[idx], params, tconfig.lam, tconfig.mu, tconfig.head_leak)
            if not np.isfinite(value.item()):
                raise TrainingDiverged(f"loss became {value.item()} at epoch {epoch}, step {steps}")
            value.backward()
            opt.step()
            losses.append(value.item())
            steps += 1
            if tconfig.max_steps is not None and steps >= tconfig.max_steps:
                break
        if val:
            vpred = predict_many(vq, vg, params, config)
            score = mae(vpred, vtruth)
            vq_err = float(np.mean(q_error(vpred, vtruth)))
        else:
            score = float(np.mean(losses))
            vq_err = float("nan")
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_mae": score if val else float("nan"),
            "val_qerr": vq_err,
            "seconds": time.perf_counter() - t_start,
        }
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d loss %.4f val_mae %.4f", epoch, row["train_loss"], row["val_mae"])
        if score < best_score:
            best_score = score
            best = {k: p.data.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
        if stale >= tconfig.patience:
            break
        if tconfig.max_steps is not None and steps >= tconfig.max_steps:
            break
    out = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in best.items()}
    return out, history


def film_magnitude(params: Params, triples: Sequence[Triple], config: ModelConfig) -> float:
    """Mean over graph edges of ``||gamma||^2 + ||beta||^2``."""
    if not config.modulation:
        return 0.0
    total, edges = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(triples), 64):
            chunk = triples[i : i + 64]
            qb = Batch.of([GraphPieces.of(t.query, config) for t in chunk])
            gb = Batch.of([GraphPieces.of(t.graph, config) for t in chunk])
            fw = forward(qb, gb, params, config)
            total += fw.film_penalty().item()
            edges += gb.num_edges
    return total / max(edges, 1)


def history_csv(history: Sequence[dict]) -> str:
    lines = ["epoch,train_loss,val_mae,val_qerr,seconds"]
    for r in history:
        lines.append(f"{r['epoch']},{r['train_loss']!r},{r['val_mae']!r},{r['val_qerr']!r},{r['seconds']:.3f}")
    return "\n".join(lines) + "\n"


def config_dict(tconfig: TrainConfig) -> dict:
    return asdict(tconfig)
