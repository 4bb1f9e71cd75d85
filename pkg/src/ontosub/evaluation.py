"""Node-classification and link-prediction metrics and the repeated-run protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .graph import LINK_PREDICTION, NODE_CLASSIFICATION, HeteroGraph, LabeledSplit

log = logging.getLogger(__name__)

LP_SCORERS = ("dot", "logreg")


def f1_scores(pred, truth, num_classes: int | None = None) -> tuple[float, float]:
    """Return ``(micro_f1, macro_f1)`` for single-label multiclass predictions.

    Classes absent from both ``pred`` and ``truth`` count as F1 = 0 in the macro mean.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in length")
    if truth.size == 0:
        raise ValueError("empty evaluation set")
    c = num_classes or int(max(pred.max(), truth.max())) + 1
    tp = np.bincount(truth[pred == truth], minlength=c).astype(float)
    fp = np.bincount(pred, minlength=c) - tp
    fn = np.bincount(truth, minlength=c) - tp
    micro = 2 * tp.sum() / (2 * tp.sum() + fp.sum() + fn.sum())
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros(c), where=denom > 0)
    return float(micro), float(per_class.mean())


@dataclass
class EdgeScoreSet:
    positives: np.ndarray  # (P, 2)
    negatives: np.ndarray  # (P, 2)
    scores: np.ndarray  # (2P,) positives first

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.positives)), np.zeros(len(self.negatives))])


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision), ties grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("PR-AUC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # final index of each tie group
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    # fsum: correctly rounded, so the result does not depend on summation order
    return math.fsum((np.diff(np.r_[0.0, recall]) * precision).tolist())


def threshold_f1(scores, labels) -> float:
    """F1 of ``score >= median(scores)`` as the positive prediction."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= np.median(scores)
    tp = np.sum(pred & labels)
    denom = 2 * tp + np.sum(pred & ~labels) + np.sum(~pred & labels)
    return float(2 * tp / denom) if denom else 0.0


def link_metrics(scores, labels=None) -> tuple[float, float, float]:
    """``(roc_auc, pr_auc, f1)`` for an ``EdgeScoreSet`` or a score/label pair."""
    if isinstance(scores, EdgeScoreSet):
        scores, labels = scores.scores, scores.labels
    return roc_auc(scores, labels), pr_auc(scores, labels), threshold_f1(scores, labels)


def sample_non_edges(g: HeteroGraph, edge_type: int, count: int, rng: np.random.Generator,
                     exclude: set | None = None) -> np.ndarray:
    """Uniform distinct node pairs with the endpoint types of ``edge_type`` that share no edge of any type."""
    rows = g.edges[g.edges[:, 2] == edge_type]
    if len(rows):
        ta, tb = g.node_type[rows[0, 0]], g.node_type[rows[0, 1]]
    else:
        ta, tb = g.edge_endpoints[edge_type]
    pool_a, pool_b = g.nodes_of_type(ta), g.nodes_of_type(tb)
    existing = {(int(u), int(v)) for u, v in g.edges[:, :2]}
    taken = set(exclude or ())
    out = []
    capacity = len(pool_a) * len(pool_b)
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 100 * max(count, 1) + capacity:
            raise ValueError(f"cannot sample {count} non-edges for edge type {edge_type}")
        u = int(pool_a[rng.integers(len(pool_a))])
        v = int(pool_b[rng.integers(len(pool_b))])
        key = (min(u, v), max(u, v))
        if u == v or key in existing or key in taken:
            continue
        taken.add(key)
        out.append((u, v))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def split_edges(g: HeteroGraph, edge_type: int, ratios=(0.85, 0.05, 0.10), seed: int = 0) -> LabeledSplit:
    """Link-prediction split of ``edge_type`` edges with balanced negative val/test pairs."""
    rng = np.random.default_rng([seed, 0x51])
    rows = g.edges[g.edges[:, 2] == edge_type][:, :2]
    rows = rows[rng.permutation(len(rows))]
    n = len(rows)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    val, test, train = rows[:n_val], rows[n_val:n_val + n_test], rows[n_val + n_test:]
    val_neg = sample_non_edges(g, edge_type, len(val), rng)
    test_neg = sample_non_edges(g, edge_type, len(test), rng, exclude={(min(u, v), max(u, v)) for u, v in val_neg})
    return LabeledSplit(LINK_PREDICTION, train, val, test, edge_type=edge_type,
                        val_negative=val_neg, test_negative=test_neg)


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (mean, std)
    runs: int = 0
    per_run: list[dict[str, float]] = field(default_factory=list)

    @classmethod
    def from_runs(cls, task: str, runs: list[dict[str, float]]) -> "MetricReport":
        names = list(runs[0])
        metrics = {}
        for name in names:
            vals = np.array([r[name] for r in runs])
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            metrics[name] = (float(vals.mean()), std)
        return cls(task, metrics, len(runs), runs)

    def to_json(self, config_hash: str = "", extra: dict | None = None) -> dict:
        doc = {
            "task": self.task,
            "metrics": {k: {"mean": m, "std": s} for k, (m, s) in self.metrics.items()},
            "runs": self.runs,
            "config_hash": config_hash,
        }
        if extra:
            doc.update(extra)
        return doc


def fit_logreg(x: np.ndarray, y: np.ndarray, l2: float = 1e-3) -> tuple[np.ndarray, float]:
    """L2-regularized logistic regression by L-BFGS; returns ``(w, b)``."""
    x = np.asarray(x, dtype=np.float64)
    sign = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    n, d = x.shape

    def objective(theta):
        z = sign * (x @ theta[:d] + theta[d])
        loss = -log_expit(z).mean() + 0.5 * l2 * theta[:d] @ theta[:d]
        r = -sign * expit(-z) / n
        grad = np.r_[x.T @ r + l2 * theta[:d], r.sum()]
        return loss, grad

    res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B")
    return res.x[:d], float(res.x[d])


class HadamardScorer:
    """Logistic regression over ``h_u * h_v``, fit on training edges against sampled non-edges."""

    def __init__(self, run, seed: int = 0):
        split = run.split
        rng = np.random.default_rng([seed, 0x4C])
        held = {(min(u, v), max(u, v)) for u, v in np.concatenate([split.val_negative, split.test_negative]).tolist()}
        pos = np.asarray(split.train, dtype=np.int64).reshape(-1, 2)
        neg = sample_non_edges(run.full_graph, split.edge_type, len(pos), rng, exclude=held)
        self.run = run
        x = self.features(np.concatenate([pos, neg]))
        self.w, self.b = fit_logreg(x, np.r_[np.ones(len(pos)), np.zeros(len(neg))])

    def features(self, pairs: np.ndarray) -> np.ndarray:
        nodes, inv = np.unique(pairs, return_inverse=True)
        h = self.run.node_representations(nodes)
        inv = inv.reshape(-1, 2)
        return h[inv[:, 0]] * h[inv[:, 1]]

    def __call__(self, pairs: np.ndarray) -> np.ndarray:
        return expit(self.features(np.asarray(pairs, dtype=np.int64).reshape(-1, 2)) @ self.w + self.b)


def test_metrics(run, scorer: str = "dot") -> dict[str, float]:
    """Held-out metrics of a trained ``training.Run``; ``scorer`` picks the link-prediction edge scorer."""
    split = run.split
    if run.cfg.task == NODE_CLASSIFICATION:
        truth = np.array([split.labels[int(v)] for v in split.test])
        micro, macro = f1_scores(run.predict_classes(split.test), truth, split.num_classes)
        return {"micro_f1": micro, "macro_f1": macro}
    if scorer not in LP_SCORERS:
        raise ValueError(f"unknown link scorer {scorer!r}")
    score = run.score_pairs if scorer == "dot" else HadamardScorer(run, run.cfg.seed)
    scores = score(np.concatenate([split.test, split.test_negative]))
    auc, ap, f1 = link_metrics(EdgeScoreSet(split.test, split.test_negative, scores))
    return {"roc_auc": auc, "pr_auc": ap, "f1": f1}


# pytest would otherwise try to collect the helper above
test_metrics.__test__ = False


def evaluate(g: HeteroGraph, schema, split: LabeledSplit, cfg, seeds, first_run=None,
             scorer: str = "dot") -> MetricReport:
    """Train and score once per seed; ``first_run`` reuses an already-trained run for the first seed."""
    from .training import train

    results = []
    for i, seed in enumerate(seeds):
        if i == 0 and first_run is not None:
            run = first_run
        else:
            run, _ = train(g, schema, split, replace(cfg, seed=int(seed)))
        results.append(test_metrics(run, scorer))
        log.info("run %d (seed %d): %s", i, seed, results[-1])
    return MetricReport.from_runs(cfg.task, results)
