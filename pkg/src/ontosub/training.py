"""Bi-level perturbation training: subgraph discrimination plus node-level prediction."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tape, Tensor
from .encoder import (
    EncoderConfig,
    EncoderParams,
    FeatureTable,
    PatternLayout,
    aggregate_groups,
    glorot,
    init_encoder,
    intra_encode,
    named_parameters,
    readout,
    zeros,
)
from .graph import LINK_PREDICTION, NODE_CLASSIFICATION, HeteroGraph, LabeledSplit
from .ontology import (
    ExhaustedError,
    Extraction,
    LabeledSample,
    OntologySchema,
    OntoSubgraph,
    build_batches,
    extract_all,
    perturb,
)

log = logging.getLogger(__name__)

CONTEXT_SAMPLES = 4


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    task: str = NODE_CLASSIFICATION
    gamma: float = 0.5
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 32
    neg_ratio: float = 1.0
    n_swap: int = 1
    max_retries: int = 20
    cap: int = 64
    patience: int = 30
    seed: int = 0
    threads: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma={self.gamma} outside [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.task not in (NODE_CLASSIFICATION, LINK_PREDICTION):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_mlp(d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> MLPParams:
    return MLPParams(glorot(rng, d_in, d_hidden), zeros(d_hidden), glorot(rng, d_hidden, d_out), zeros(d_out))


def mlp(x: Tensor, m: MLPParams) -> Tensor:
    return ad.relu(x @ m.w1 + m.b1) @ m.w2 + m.b2


@dataclass
class Model:
    encoder: EncoderParams
    graph_head: MLPParams  # d -> d -> 1, logit of "unperturbed"
    node_head: MLPParams | None  # d -> d -> C class scores; None for link prediction

    def parameters(self) -> list[tuple[str, Tensor]]:
        return named_parameters(self)

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            if name not in state or state[name].shape != t.shape:
                raise KeyError(f"checkpoint lacks a matching tensor for {name} {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)


def init_model(cfg: TrainConfig, table: FeatureTable, num_edge_types: int, num_outputs: int | None,
               rng: np.random.Generator) -> Model:
    """``num_outputs=None`` builds no node head (link prediction scores node pairs directly)."""
    d = cfg.encoder.d
    enc = init_encoder(cfg.encoder, table.dim, num_edge_types, table.num_learned, rng)
    head = init_mlp(d, d, num_outputs, rng) if num_outputs else None
    return Model(enc, init_mlp(d, d, 1, rng), head)


# ---------------------------------------------------------------- losses


def graph_loss(h_graph: Tensor, labels: np.ndarray, head: MLPParams) -> Tensor:
    """Mean binary cross-entropy of the discriminator; label 1 = unperturbed subgraph."""
    if h_graph.shape[0] == 0:
        raise ValueError("graph_loss on an empty batch")
    logits = mlp(h_graph, head)
    return ad.binary_cross_entropy(logits, np.asarray(labels, dtype=np.float64).reshape(-1, 1))


def class_scores(h: Tensor, head: MLPParams) -> Tensor:
    """L2-normalized predictor output."""
    return ad.l2_normalize_row(mlp(h, head))


def node_loss(h_nodes: Tensor, targets: np.ndarray, head: MLPParams, multilabel: bool = False) -> Tensor:
    """Mean cross-entropy of the normalized class scores used as logits.

    With ``multilabel`` the targets are 0/1 rows and binary cross-entropy is used.
    """
    scores = class_scores(h_nodes, head)
    if multilabel:
        return ad.binary_cross_entropy(scores, targets)
    return ad.cross_entropy(scores, targets)


def combine(gamma: float, l_node: Tensor | None, l_graph: Tensor | None) -> Tensor:
    terms = []
    if gamma > 0.0:
        terms.append(ad.scale(l_node, gamma))
    if gamma < 1.0:
        terms.append(ad.scale(l_graph, 1.0 - gamma))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


# ---------------------------------------------------------------- run context


class Run:
    """Static state of one training run: graph, schema, enumerated instances and the model."""

    def __init__(self, g: HeteroGraph, schema: OntologySchema, split: LabeledSplit, cfg: TrainConfig):
        self.cfg = cfg
        self.split = split
        self.full_graph = g
        self.schema = schema
        if cfg.task == LINK_PREDICTION:
            held = np.concatenate([split.val, split.test]).reshape(-1, 2)
            removed = np.column_stack([held, np.full(len(held), split.edge_type)]) if len(held) else held.reshape(0, 3)
            g = g.without_edges(removed)
        self.g = g
        self.layout = PatternLayout.build(schema, len(g.edge_types), cfg.encoder.pe_dim)
        self.table = FeatureTable.from_graph(g, cfg.encoder.embed_dim)
        self.anchors = g.nodes_of_type(schema.target_type)
        self.extraction: Extraction = extract_all(g, schema, self.anchors, cfg.cap, cfg.seed, cfg.threads)
        empty = sum(1 for a in self.anchors if not self.extraction.instances[int(a)])
        if empty:
            log.info("%d of %d anchors have no ontology subgraph; they fall back to input embeddings",
                     empty, len(self.anchors))
        self.train_nodes: set[int] = set()
        if cfg.task == NODE_CLASSIFICATION and cfg.gamma > 0:
            self.train_nodes = set(split.train.tolist())
        rng = np.random.default_rng([cfg.seed, 0x1D])
        n_out = max(split.num_classes, 1) if cfg.task == NODE_CLASSIFICATION else None
        self.model = init_model(cfg, self.table, len(g.edge_types), n_out, rng)
        self._groups_cache: dict = {}

    # inference ------------------------------------------------------

    def _member_instances(self) -> dict[int, list[tuple[OntoSubgraph, int]]]:
        """Instances containing each node (any slot), capped with a per-node seeded sample."""
        if "member" not in self._groups_cache:
            by_node: dict[int, list[tuple[OntoSubgraph, int]]] = {}
            for o in self.extraction.all_instances():
                for slot, v in enumerate(o.assignment):
                    by_node.setdefault(v, []).append((o, slot))
            cap = self.cfg.cap
            for v, lst in by_node.items():
                if len(lst) > cap:
                    keep = np.sort(np.random.default_rng([self.cfg.seed, v, 0x3E]).choice(len(lst), cap, replace=False))
                    by_node[v] = [lst[i] for i in keep]
            self._groups_cache["member"] = by_node
        return self._groups_cache["member"]

    def node_representations(self, nodes: np.ndarray, model: Model | None = None, chunk: int = 4096) -> np.ndarray:
        """``h_v`` for the given nodes with inference-time (unflipped) positional encodings.

        Target-type nodes use the subgraphs anchored at them; other nodes (link
        prediction) use every sampled subgraph that contains them.
        """
        model = model or self.model
        nodes = np.asarray(nodes, dtype=np.int64)
        s = self.layout.num_slots
        target_type = self.schema.target_type
        use_members = self.cfg.task == LINK_PREDICTION
        members = self._member_instances() if use_members else None
        wanted: list[list[tuple[OntoSubgraph, int]]] = []
        for v in nodes.tolist():
            if use_members:
                wanted.append(members.get(v, []))
            elif self.g.node_type[v] == target_type:
                wanted.append([(o, self.layout.target) for o in self.extraction.instances.get(v, [])])
            else:
                wanted.append([])
        order: dict[tuple[int, ...], int] = {}
        for lst in wanted:
            for o, _ in lst:
                order.setdefault(o.assignment, len(order))
        ids = np.array(list(order), dtype=np.int64).reshape(-1, s)
        cfg = self.cfg.encoder
        blocks = [intra_encode(ids[i:i + chunk], self.table, model.encoder, self.layout, cfg).data
                  for i in range(0, len(ids), chunk)]
        rows = np.concatenate(blocks).reshape(-1, cfg.d) if blocks else np.zeros((0, cfg.d))
        groups = [np.array([order[o.assignment] * s + slot for o, slot in lst], dtype=np.int64) for lst in wanted]
        out = []
        for i in range(0, len(nodes), chunk):
            out.append(aggregate_groups(Tensor(rows if len(rows) else np.zeros((1, cfg.d))), groups[i:i + chunk],
                                        nodes[i:i + chunk], self.table, model.encoder, cfg).data)
        return np.concatenate(out) if out else np.zeros((0, cfg.d))

    def predict_classes(self, nodes: np.ndarray, model: Model | None = None) -> np.ndarray:
        model = model or self.model
        h = self.node_representations(nodes, model)
        return np.argmax(class_scores(Tensor(h), model.node_head).data, axis=1)

    def score_pairs(self, pairs: np.ndarray, model: Model | None = None) -> np.ndarray:
        """Edge scores ``sigmoid(<h_u, h_v>)``."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        nodes, inv = np.unique(pairs, return_inverse=True)
        h = self.node_representations(nodes, model)
        inv = inv.reshape(-1, 2)
        dots = np.einsum("ij,ij->i", h[inv[:, 0]], h[inv[:, 1]])
        return 1.0 / (1.0 + np.exp(-dots))

    def validation_metric(self, model: Model | None = None) -> float | None:
        from .evaluation import f1_scores, link_metrics

        split = self.split
        if self.cfg.task == NODE_CLASSIFICATION:
            if self.cfg.gamma == 0.0 or len(split.val) == 0:
                return None
            truth = np.array([split.labels[int(v)] for v in split.val])
            return f1_scores(self.predict_classes(split.val, model), truth, split.num_classes)[0]
        if len(split.val) == 0 or len(split.val_negative) == 0:
            return None
        pos = self.score_pairs(split.val, model)
        neg = self.score_pairs(split.val_negative, model)
        scores = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        return link_metrics(scores, labels)[0]

    # training -------------------------------------------------------

    def consistency_loss(self, samples: list[LabeledSample], model: Model, pe_signs: np.ndarray | None,
                         step_seed=0) -> Tensor:
        """Per-node substitution loss on aggregated node representations.

        Every node of a sample gets ``h_v`` from up to ``CONTEXT_SAMPLES`` of the
        subgraphs containing it. A slot's logit of "substituted" is minus its mean
        dot product with its pattern neighbours, so the same ``<h_u, h_v>`` that
        scores edges at test time is what gets trained.
        """
        cfg = self.cfg
        s = self.layout.num_slots
        ids = np.array([smp.assignment for smp in samples], dtype=np.int64)
        nodes, inv = np.unique(ids, return_inverse=True)
        inv = inv.reshape(ids.shape)
        members = self._member_instances()
        rng = np.random.default_rng(step_seed)
        order: dict[tuple[int, ...], int] = {}
        groups = []
        for v in nodes.tolist():
            lst = members.get(v, [])
            if len(lst) > CONTEXT_SAMPLES:
                lst = [lst[i] for i in np.sort(rng.choice(len(lst), CONTEXT_SAMPLES, replace=False))]
            groups.append(np.array([order.setdefault(o.assignment, len(order)) * s + slot for o, slot in lst],
                                   dtype=np.int64))
        ctx_ids = np.array(list(order), dtype=np.int64).reshape(-1, s)
        rows = intra_encode(ctx_ids, self.table, model.encoder, self.layout, cfg.encoder, pe_signs)
        h = aggregate_groups(rows.reshape(-1, cfg.encoder.d), groups, nodes, self.table, model.encoder, cfg.encoder)
        sub = np.zeros(ids.shape)
        for i, smp in enumerate(samples):
            sub[i, list(smp.substituted)] = 1.0
        if not self.schema.edges:
            raise ValueError("link prediction needs a schema with at least one edge")
        # slot i's logit of "substituted" is minus its mean dot with pattern neighbours
        ea = np.array([a for a, _, _ in self.schema.edges] + [b_ for _, b_, _ in self.schema.edges])
        eb = np.array([b_ for _, b_, _ in self.schema.edges] + [a for a, _, _ in self.schema.edges])
        dots = ad.sum_(ad.gather_rows(h, inv[:, ea]) * ad.gather_rows(h, inv[:, eb]), axis=2)  # (B, 2P)
        deg = np.bincount(ea, minlength=s)
        avg = np.zeros((len(ea), s))
        avg[np.arange(len(ea)), ea] = -1.0 / deg[ea]
        logits = dots @ Tensor(avg)  # (B, S)
        return ad.binary_cross_entropy(ad.reshape(logits, (-1, 1)), sub.reshape(-1, 1))

    def negatives_for(self, positives: list[OntoSubgraph], epoch: int) -> tuple[list, int]:
        cfg = self.cfg
        reps = max(1, math.ceil(cfg.neg_ratio))
        jobs = [(o, [cfg.seed, epoch, o.anchor, i, j]) for i, o in enumerate(positives) for j in range(reps)]
        index = self.extraction.positive_index

        def one(job):
            o, seed = job
            try:
                return perturb(o, self.g, index, cfg.n_swap, cfg.max_retries, seed, target=self.layout.target)
            except ExhaustedError:
                return None

        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                made = list(pool.map(one, jobs))
        else:
            made = [one(j) for j in jobs]
        return [m for m in made if m is not None], sum(m is None for m in made)

    def batch_losses(self, samples: list[LabeledSample], anchors: list[int], model: Model,
                     pe_signs: np.ndarray | None, step_seed=0) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """Forward pass for one shuffled batch; returns ``(L, L_N, L_G)`` tensors."""
        cfg = self.cfg
        ids = np.array([smp.assignment for smp in samples], dtype=np.int64)
        b, s = ids.shape
        reps = intra_encode(ids, self.table, model.encoder, self.layout, cfg.encoder, pe_signs)
        l_graph = None
        if cfg.gamma < 1.0:
            l_graph = graph_loss(readout(reps), np.array([smp.label for smp in samples]), model.graph_head)
        l_node = None
        if cfg.gamma > 0.0:
            if cfg.task == NODE_CLASSIFICATION:
                labeled = [a for a in anchors if a in self.train_nodes]
                if labeled:
                    pos_rows: dict[int, list[int]] = {a: [] for a in labeled}
                    for i, smp in enumerate(samples):
                        if smp.label == 1 and smp.anchor in pos_rows:
                            pos_rows[smp.anchor].append(i * s + self.layout.target)
                    groups = [np.array(pos_rows[a], dtype=np.int64) for a in labeled]
                    h = aggregate_groups(reps.reshape(b * s, -1), groups, np.array(labeled), self.table,
                                         model.encoder, cfg.encoder)
                    l_node = node_loss(h, self.split.onehot(np.array(labeled)), model.node_head)
                else:
                    l_node = Tensor(0.0)
            else:
                l_node = self.consistency_loss(samples, model, pe_signs, step_seed)
        return combine(cfg.gamma, l_node, l_graph), l_node, l_graph


def joint_step(run: Run, samples: list[LabeledSample], anchors: list[int], opt: Adam,
               pe_signs: np.ndarray | None = None, step_seed=0) -> tuple[float, float, float]:
    """One optimizer step on ``gamma * L_N + (1 - gamma) * L_G``."""
    opt.zero_grad()
    with Tape():
        loss, l_node, l_graph = run.batch_losses(samples, anchors, run.model, pe_signs, step_seed)
        ad.backward(loss)
    opt.step()
    val = lambda t: float(t.data) if t is not None else 0.0  # noqa: E731
    return val(loss), val(l_node), val(l_graph)


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    exhausted: int = 0

    def to_csv(self, include_time: bool = False) -> str:
        lines = ["epoch,L,L_N,L_G,val_metric,seconds"]
        for r in self.rows:
            val = "" if r["val_metric"] is None else repr(float(r["val_metric"]))
            secs = f"{r['seconds']:.3f}" if include_time else ""
            lines.append(f"{r['epoch']},{r['L']!r},{r['L_N']!r},{r['L_G']!r},{val},{secs}")
        return "\n".join(lines) + "\n"


def train(g: HeteroGraph, schema: OntologySchema, split: LabeledSplit, cfg: TrainConfig,
          run: Run | None = None) -> tuple[Run, TrainReport]:
    """Train with early stopping on the validation metric; the returned run holds the best parameters."""
    run = run or Run(g, schema, split, cfg)
    model = run.model
    opt = Adam([t for _, t in model.parameters()], lr=cfg.lr)
    report = TrainReport()
    best_metric, best_state, since_best = -np.inf, None, 0
    k = run.layout.pe.shape[1]
    anchors = run.anchors
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        pe_signs = rng.choice([-1.0, 1.0], size=k) if k else None
        order = anchors[rng.permutation(len(anchors))]
        sums = np.zeros(3)
        batches = 0
        for bi in range(0, len(order), cfg.batch_size):
            chunk = [int(a) for a in order[bi:bi + cfg.batch_size]]
            positives = [o for a in chunk for o in run.extraction.instances[a]]
            if not positives:
                continue
            negatives, exhausted = run.negatives_for(positives, epoch)
            report.exhausted += exhausted
            samples = build_batches(positives, negatives, cfg.neg_ratio, [cfg.seed, epoch, bi])
            try:
                sums += joint_step(run, samples, chunk, opt, pe_signs, [cfg.seed, epoch, bi, 0xC7])
            except NonFiniteError as exc:
                raise NonFiniteLossError(epoch, batches, str(exc)) from None
            if not np.all(np.isfinite(sums)):
                raise NonFiniteLossError(epoch, batches, "loss overflow")
            batches += 1
        means = sums / max(batches, 1)
        metric = run.validation_metric()
        report.rows.append({"epoch": epoch, "L": float(means[0]), "L_N": float(means[1]), "L_G": float(means[2]),
                            "val_metric": metric, "seconds": time.perf_counter() - t0})
        log.debug("epoch %d L=%.5f L_N=%.5f L_G=%.5f val=%s", epoch, *means, metric)
        if metric is None:
            continue
        if metric > best_metric:
            best_metric, best_state, since_best = metric, model.state(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if report.exhausted:
        log.warning("%d negatives exhausted their retry budget and were skipped", report.exhausted)
    if best_state is not None:
        model.load_state(best_state)
    else:
        report.best_epoch = len(report.rows)
    return run, report
