"""Independent reference implementations used as test oracles."""

import itertools
import math

import numpy as np

from ontosub.graph import HeteroGraph, TypeVocab
from ontosub.ontology import OntologySchema


# ---------------------------------------------------------------- random instances


def random_typed_graph(rng, max_nodes=12, n_node_types=3, n_edge_types=2, p=0.35) -> HeteroGraph:
    n = int(rng.integers(1, max_nodes + 1))
    types = rng.integers(0, n_node_types, size=n)
    edges = []
    for a in range(n):
        for b in range(a + 1, n):
            for t in range(n_edge_types):
                if rng.random() < p / n_edge_types:
                    edges.append((a, b, t))
    return HeteroGraph(TypeVocab(tuple(f"T{i}" for i in range(n_node_types))),
                       TypeVocab(tuple(f"r{i}" for i in range(n_edge_types))),
                       types, np.array(edges, dtype=np.int64).reshape(-1, 3),
                       np.zeros((n, 0)), np.zeros(n, dtype=bool))


def random_schema(rng, max_slots=4, n_node_types=3, n_edge_types=2) -> OntologySchema:
    s = int(rng.integers(1, max_slots + 1))
    types = tuple(int(t) for t in rng.integers(0, n_node_types, size=s))
    edges = set()
    for i in range(1, s):  # random spanning tree keeps the pattern connected
        edges.add((int(rng.integers(0, i)), i, int(rng.integers(0, n_edge_types))))
    for a in range(s):
        for b in range(a + 1, s):
            if rng.random() < 0.25:
                edges.add((a, b, int(rng.integers(0, n_edge_types))))
    return OntologySchema(types, tuple(sorted(edges)), target=int(rng.integers(0, s)))


def brute_force_instances(g: HeteroGraph, s: OntologySchema, anchor: int) -> set[tuple[int, ...]]:
    """Every injective slot assignment honouring types and typed pattern edges."""
    edge_set = {(int(u), int(v), int(t)) for u, v, t in g.edges}
    found = set()
    for assign in itertools.permutations(range(g.num_nodes), s.num_slots):
        if assign[s.target] != anchor:
            continue
        if any(g.node_type[v] != s.slot_types[i] for i, v in enumerate(assign)):
            continue
        if all((min(assign[a], assign[b]), max(assign[a], assign[b]), t) in edge_set for a, b, t in s.edges):
            found.add(assign)
    return found


# ---------------------------------------------------------------- metrics


def brute_f1(pred, truth, num_classes):
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    for p, t in zip(pred, truth):
        if p == t:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    micro_den = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = 2 * tp.sum() / micro_den if micro_den else 0.0
    per = []
    for c in range(num_classes):
        den = 2 * tp[c] + fp[c] + fn[c]
        per.append(2 * tp[c] / den if den else 0.0)
    return micro, float(np.mean(per))


def brute_roc_auc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def brute_pr_auc(scores, labels):
    """Average precision: sweep distinct thresholds from high to low."""
    n_pos = sum(labels)
    terms, prev_recall = [], 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        recall = tp / n_pos
        precision = tp / len(sel)
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)


def brute_threshold_f1(scores, labels):
    thr = float(np.median(scores))
    pred = [1 if s >= thr else 0 for s in scores]
    tp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(pred, labels) if p == 0 and y == 1)
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


# ---------------------------------------------------------------- finite differences


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# central differences at h=1e-6 carry ~1e-10 absolute roundoff, so the
# denominator is floored where the gradient entry itself is that small
REL_FLOOR = 1e-3


def numeric_vjp(f, x: np.ndarray, probe: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """``probe . d f / d x`` by central differences, differencing each output entry before the product."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = np.sum((fp - fm) / (2 * h) * probe)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max element-wise ``|a - b| / max(|a| + |b|, REL_FLOOR)``."""
    return float(np.max(np.abs(a - b) / np.maximum(REL_FLOOR, np.abs(a) + np.abs(b)))) if a.size else 0.0


def grad_check(build, arrays, rng, h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a tensor; it is reduced to a scalar with a
    fixed random probe so every output entry contributes.
    """
    from ontosub import autodiff as ad

    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    probe = rng.normal(size=out.shape)

    def outputs():
        return build(*leaves).data.copy()

    with ad.Tape():
        out = build(*leaves)
        loss = ad.sum_(out * ad.Tensor(probe))
        ad.backward(loss)
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_vjp(outputs, t.data, probe, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def op_cases():
    """``name -> (build, make_inputs(rng))`` for every differentiable core op."""
    from ontosub import autodiff as ad

    def away_from_zero(rng, shape):
        x = rng.normal(size=shape)
        return x + np.sign(x) * 0.1

    return {
        "add": (lambda a, b: ad.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        "sub": (lambda a, b: ad.sub(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
        "mul": (lambda a, b: ad.mul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))]),
        "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=(3, 2))]),
        "matmul": (lambda a, b: ad.matmul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
        "reshape": (lambda a: ad.reshape(a, (6, 2)), lambda r: [r.normal(size=(3, 4))]),
        "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
        "take": (lambda a: ad.take(a, (slice(1, 3), np.array([0, 2, 2]))), lambda r: [r.normal(size=(4, 3))]),
        "gather_rows": (lambda a: ad.gather_rows(a, np.array([[0, 2], [2, 1]])), lambda r: [r.normal(size=(3, 4))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "sum": (lambda a: ad.sum_(a, axis=1), lambda r: [r.normal(size=(3, 4, 2))]),
        "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), lambda r: [r.normal(size=(3, 4))]),
        "mean_pool": (lambda a: ad.mean_pool(a), lambda r: [r.normal(size=(2, 5, 3))]),
        "relu": (lambda a: ad.relu(a), lambda r: [away_from_zero(r, (4, 5))]),
        "sigmoid": (lambda a: ad.sigmoid(a), lambda r: [r.normal(size=(4, 3)) * 3]),
        "softmax_row": (lambda a: ad.softmax_row(a, clamp=None), lambda r: [r.normal(size=(3, 5)) * 2]),
        "softmax_row_clamped": (lambda a: ad.softmax_row(a, clamp=(-5.0, 5.0)),
                                lambda r: [np.where(np.abs(x := r.normal(size=(4, 6)) * 4) > 4.9,
                                                    x + np.sign(x) * 0.5, x)]),
        "softmax_row_masked": (lambda a: ad.softmax_row(a, mask=np.array([[1, 0, 1], [0, 1, 1]], bool)),
                               lambda r: [r.normal(size=(2, 3))]),
        "layer_norm": (lambda a: ad.layer_norm(a), lambda r: [r.normal(size=(3, 6)) * 2 + 1]),
        "l2_normalize_row": (lambda a: ad.l2_normalize_row(a), lambda r: [r.normal(size=(4, 3))]),
        "cross_entropy": (lambda a: ad.cross_entropy(a, np.eye(4)[[0, 3, 1]]), lambda r: [r.normal(size=(3, 4))]),
        "binary_cross_entropy": (lambda a: ad.binary_cross_entropy(a, np.array([[1.0], [0.0], [0.3]])),
                                 lambda r: [r.normal(size=(3, 1)) * 3]),
    }


def tiny_run(seed: int, task: str = "node-classification", gamma: float = 0.5, edge_bias: bool = True):
    """A small synthetic run plus one labeled batch, for gradient checks."""
    from ontosub.encoder import EncoderConfig
    from ontosub.ontology import build_batches
    from ontosub.synth import SynthSpec, synth_hin
    from ontosub.training import Run, TrainConfig

    spec = SynthSpec(users=12, posts=6, tags=4, classes=2, p_in=0.5, p_out=0.1, tag_p_in=0.6, tag_p_out=0.1,
                     feature_dim=3, task=task, seed=seed)
    g, schema, split = synth_hin(spec)
    cfg = TrainConfig(task=task, gamma=gamma, cap=3, seed=seed,
                      encoder=EncoderConfig(d=4, heads=2, layers=1, pe_dim=2, embed_dim=3, edge_bias=edge_bias))
    run = Run(g, schema, split, cfg)
    labeled = [a for a in run.anchors.tolist() if a in run.train_nodes] or run.anchors.tolist()
    chunk = [int(a) for a in labeled[:4]]
    positives = [o for a in chunk for o in run.extraction.instances[a]]
    negatives, _ = run.negatives_for(positives, 1)
    samples = build_batches(positives, negatives, 1.0, seed)
    pe_signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=run.layout.pe.shape[1])
    return run, samples, chunk, pe_signs


def composed_loss_check(seed: int, task: str = "node-classification", coords: int = 24, h: float = 1e-6) -> float:
    """Relative error of the joint loss gradient on random parameter coordinates."""
    from ontosub import autodiff as ad

    run, samples, chunk, pe_signs = tiny_run(seed, task)
    params = run.model.parameters()

    def loss_value():
        return float(run.batch_losses(samples, chunk, run.model, pe_signs, [seed])[0].data)

    for _, t in params:
        t.grad = None
    with ad.Tape():
        loss = run.batch_losses(samples, chunk, run.model, pe_signs, [seed])[0]
        ad.backward(loss)
    rng = np.random.default_rng(seed)
    sizes = np.array([t.data.size for _, t in params])
    picks = rng.choice(sizes.sum(), size=min(coords, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        t = params[k][1]
        i = np.unravel_index(flat - (bounds[k] - sizes[k]), t.shape)
        analytic = 0.0 if t.grad is None else float(t.grad[i])
        old = t.data[i]
        t.data[i] = old + h
        fp = loss_value()
        t.data[i] = old - h
        fm = loss_value()
        t.data[i] = old
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, rel_error(np.array([analytic]), np.array([numeric])))
    return worst


def random_encoder_case(rng, batch: int = 3):
    """Random schema layout, feature table, parameters and a ``(B, S)`` id block."""
    from ontosub.encoder import EncoderConfig, FeatureTable, PatternLayout, init_encoder

    schema = random_schema(rng, max_slots=5)
    heads = int(rng.choice([1, 2, 4]))
    cfg = EncoderConfig(d=4 * heads, heads=heads, layers=int(rng.integers(0, 3)), pe_dim=int(rng.integers(0, 4)))
    layout = PatternLayout.build(schema, 2, cfg.pe_dim)
    n = 12
    d_n = 3
    has = rng.random(n) < 0.7
    fixed = np.where(has[:, None], rng.normal(size=(n, d_n)), 0.0)
    learned = np.full(n, -1)
    learned[~has] = np.arange((~has).sum())
    table = FeatureTable(fixed, learned)
    params = init_encoder(cfg, d_n, 2, table.num_learned, rng)
    ids = np.stack([rng.choice(n, size=schema.num_slots, replace=False) for _ in range(batch)])
    return schema, cfg, layout, table, params, ids
