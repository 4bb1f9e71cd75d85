"""Graph-transformer encoder over ontology subgraphs.

All instances of one schema share the pattern topology, so a batch of ``B``
subgraphs is a dense ``(B, S, d)`` block with a fixed ``(S, S)`` attention
mask (pattern adjacency plus self-loops).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import HeteroGraph
from .ontology import OntologySchema


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    pe_dim: int = 4
    clamp: tuple[float, float] = (-5.0, 5.0)
    edge_bias: bool = True
    embed_dim: int = 16  # learned input dim when the graph carries no features at all

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.clamp[0] >= self.clamp[1]:
            raise ValueError(f"empty clamp interval {self.clamp}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def laplacian_pe(num_nodes: int, edges, k: int) -> np.ndarray:
    """``k`` eigenvectors of the graph Laplacian after the trivial one, zero-padded to ``k`` columns.

    Each column's sign is fixed so its largest-magnitude entry is positive.
    """
    pe = np.zeros((num_nodes, k))
    if k == 0 or num_nodes < 2:
        return pe
    adj = np.zeros((num_nodes, num_nodes))
    for a, b in edges:
        adj[a, b] = adj[b, a] = 1.0
    lap = np.diag(adj.sum(axis=1)) - adj
    _, vecs = np.linalg.eigh(lap)
    take = min(k, num_nodes - 1)
    vecs = vecs[:, 1:1 + take]
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(take)])
    pe[:, :take] = vecs * np.where(flip == 0, 1.0, flip)
    return pe


@dataclass
class PatternLayout:
    """Schema-level constants shared by every instance."""

    num_slots: int
    target: int
    attn_mask: np.ndarray  # (S, S) bool, self included
    edge_onehot: np.ndarray  # (P, d_e) edge-type one-hot per pattern edge
    scatter: np.ndarray  # (P, S*S) places a per-edge scalar on both (a,b) and (b,a)
    pe: np.ndarray  # (S, pe_dim)

    @classmethod
    def build(cls, schema: OntologySchema, num_edge_types: int, pe_dim: int) -> "PatternLayout":
        s = schema.num_slots
        mask = np.eye(s, dtype=bool)
        onehot = np.zeros((len(schema.edges), num_edge_types))
        scatter = np.zeros((len(schema.edges), s * s))
        for i, (a, b, t) in enumerate(schema.edges):
            mask[a, b] = mask[b, a] = True
            onehot[i, t] = 1.0
            scatter[i, a * s + b] = scatter[i, b * s + a] = 1.0
        pe = laplacian_pe(s, [(a, b) for a, b, _ in schema.edges], pe_dim)
        return cls(s, schema.target, mask, onehot, scatter, pe)

    def permuted(self, perm: np.ndarray) -> "PatternLayout":
        """Layout with slots reordered so new slot ``i`` is old slot ``perm[i]``."""
        s = self.num_slots
        inv = np.argsort(perm)
        scatter = self.scatter.reshape(-1, s, s)[:, perm][:, :, perm].reshape(-1, s * s)
        return PatternLayout(s, int(inv[self.target]), self.attn_mask[np.ix_(perm, perm)], self.edge_onehot,
                             scatter, self.pe[perm])


@dataclass
class FeatureTable:
    """Input features per node: fixed rows, or a row of the learned embedding table."""

    fixed: np.ndarray  # (N, d_n)
    learned_row: np.ndarray  # (N,) index into the embedding, -1 for featured nodes

    @classmethod
    def from_graph(cls, g: HeteroGraph, embed_dim: int) -> "FeatureTable":
        fixed = g.features if g.feature_dim else np.zeros((g.num_nodes, embed_dim))
        learned = np.full(g.num_nodes, -1, dtype=np.int64)
        missing = np.flatnonzero(~g.has_features)
        learned[missing] = np.arange(len(missing))
        return cls(np.array(fixed, dtype=np.float64), learned)

    @property
    def dim(self) -> int:
        return self.fixed.shape[1]

    @property
    def num_learned(self) -> int:
        return int((self.learned_row >= 0).sum())


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_scale: Tensor
    ln1_shift: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    edge_head: Tensor  # (d, H): per-head scalar bias from the edge embedding


@dataclass
class InterParams:
    query: Tensor  # (H, d_k)
    wk: Tensor  # (d, H*d_k)
    wv: Tensor  # (H, d, d)


@dataclass
class EncoderParams:
    feat_proj: Tensor  # A0, stored (d_n, d)
    feat_bias: Tensor  # a0
    edge_proj: Tensor  # B0, (d_e, d)
    edge_bias: Tensor  # b0
    pe_proj: Tensor  # C0, (k, d)
    pe_bias: Tensor  # c0
    layers: list[LayerParams]
    inter: InterParams
    embedding: Tensor | None = None  # learned inputs of featureless nodes


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_encoder(cfg: EncoderConfig, d_n: int, d_e: int, num_learned: int, rng: np.random.Generator) -> EncoderParams:
    d, h, dk = cfg.d, cfg.heads, cfg.head_dim
    layers = [
        LayerParams(
            wq=glorot(rng, d, d), wk=glorot(rng, d, d), wv=glorot(rng, d, d), wo=glorot(rng, d, d), bo=zeros(d),
            w1=glorot(rng, d, 2 * d), b1=zeros(2 * d), w2=glorot(rng, 2 * d, d), b2=zeros(d),
            ln1_scale=ones(d), ln1_shift=zeros(d), ln2_scale=ones(d), ln2_shift=zeros(d),
            edge_head=glorot(rng, d, h),
        )
        for _ in range(cfg.layers)
    ]
    inter = InterParams(
        query=glorot(rng, dk, 1, shape=(h, dk)),
        wk=glorot(rng, d, h * dk),
        wv=glorot(rng, d, d, shape=(h, d, d)),
    )
    emb = Tensor(rng.normal(size=(num_learned, d_n)), requires_grad=True) if num_learned else None
    return EncoderParams(
        feat_proj=glorot(rng, d_n, d), feat_bias=zeros(d),
        edge_proj=glorot(rng, max(d_e, 1), d), edge_bias=zeros(d),
        pe_proj=glorot(rng, max(cfg.pe_dim, 1), d), pe_bias=zeros(d),
        layers=layers, inter=inter, embedding=emb,
    )


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Walk dataclasses and lists collecting ``(dotted.name, Tensor)`` pairs in field order."""
    out: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    if is_dataclass(obj):
        for f in fields(obj):
            val = getattr(obj, f.name)
            if val is not None and not f.metadata.get("static"):
                out += named_parameters(val, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            out += named_parameters(val, f"{prefix}.{i}")
    return out


# ---------------------------------------------------------------- forward


@dataclass
class SubgraphEncoding:
    h: Tensor  # (B, S, d)
    edge_emb: Tensor  # (P, d)
    pe: np.ndarray  # (S, k)


def input_features(ids: np.ndarray, table: FeatureTable, p: EncoderParams) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    alpha = Tensor(table.fixed[ids])
    rows = table.learned_row[ids]
    learned = rows >= 0
    if p.embedding is not None and learned.any():
        emb = ad.gather_rows(p.embedding, np.where(learned, rows, 0))
        alpha = alpha + emb * learned[..., None].astype(np.float64)
    return alpha


def embed_inputs(ids: np.ndarray, table: FeatureTable, p: EncoderParams, layout: PatternLayout,
                 pe_signs: np.ndarray | None = None) -> SubgraphEncoding:
    """Linear input projection plus projected Laplacian positional encoding, for a ``(B, S)`` id block."""
    alpha = input_features(ids, table, p)
    h_hat = alpha @ p.feat_proj + p.feat_bias
    pe = layout.pe if pe_signs is None else layout.pe * pe_signs
    k = p.pe_proj.shape[0]
    pe_in = pe if pe.shape[1] == k else np.zeros((layout.num_slots, k))
    lam = Tensor(pe_in) @ p.pe_proj + p.pe_bias
    onehot = layout.edge_onehot
    if onehot.shape[1] != p.edge_proj.shape[0]:
        onehot = np.zeros((len(onehot), p.edge_proj.shape[0]))
    edge_emb = Tensor(onehot) @ p.edge_proj + p.edge_bias
    return SubgraphEncoding(h_hat + lam, edge_emb, pe)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def transformer_layer(h: Tensor, edge_emb: Tensor, lp: LayerParams, layout: PatternLayout, cfg: EncoderConfig,
                      trace: list | None = None) -> Tensor:
    """One attention + feed-forward block with post-residual LayerNorms."""
    b, s, d = h.shape
    heads, dk = cfg.heads, cfg.head_dim
    q = _split_heads(h @ lp.wq, heads)
    k = _split_heads(h @ lp.wk, heads)
    v = _split_heads(h @ lp.wv, heads)
    scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dk))  # (B, H, S, S)
    if cfg.edge_bias and len(layout.scatter):
        per_edge = (edge_emb @ lp.edge_head).transpose(1, 0)  # (H, P)
        scores = scores + (per_edge @ Tensor(layout.scatter)).reshape(heads, s, s)
    w = ad.softmax_row(scores, clamp=cfg.clamp, mask=layout.attn_mask, trace=trace)
    att = (w @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    h_att = att @ lp.wo + lp.bo
    h1 = ad.layer_norm(h + h_att) * lp.ln1_scale + lp.ln1_shift
    ff = ad.relu(h1 @ lp.w1 + lp.b1) @ lp.w2 + lp.b2
    return ad.layer_norm(h1 + ff) * lp.ln2_scale + lp.ln2_shift


def intra_encode(ids: np.ndarray, table: FeatureTable, p: EncoderParams, layout: PatternLayout, cfg: EncoderConfig,
                 pe_signs: np.ndarray | None = None, trace: list | None = None) -> Tensor:
    """Per-node states ``(B, S, d)`` after all transformer layers."""
    enc = embed_inputs(ids, table, p, layout, pe_signs)
    h = enc.h
    for lp in p.layers:
        h = transformer_layer(h, enc.edge_emb, lp, layout, cfg, trace)
    return h


def inter_aggregate(reps: Tensor, mask: np.ndarray | None, ip: InterParams, cfg: EncoderConfig,
                    trace: list | None = None) -> Tensor:
    """Fuse ``(U, M, d)`` per-subgraph node states into ``(U, d)``.

    A learned per-head query attends over the ``M`` subgraph states (masked
    padding allowed); each head's output goes through ReLU and the heads are
    averaged.
    """
    u, m, d = reps.shape
    heads, dk = ip.query.shape
    keys = (reps @ ip.wk).reshape(u, m, heads, dk)
    scores = ad.scale((keys * ip.query).sum(axis=-1), 1.0 / math.sqrt(dk)).transpose(0, 2, 1)  # (U, H, M)
    amask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
    w = ad.softmax_row(scores, clamp=cfg.clamp, mask=amask, trace=trace)
    vals = reps.reshape(u, 1, m, d) @ ip.wv  # (U, H, M, d)
    out = (w.reshape(u, heads, 1, m) @ vals).reshape(u, heads, d)
    return ad.relu(out).mean(axis=1)


def readout(node_reps: Tensor) -> Tensor:
    """Mean over the slot axis: ``(B, S, d) -> (B, d)``."""
    return ad.mean_pool(node_reps, axis=-2)


def input_embedding(nodes: np.ndarray, table: FeatureTable, p: EncoderParams) -> Tensor:
    """Projected input features without positional terms; fallback for nodes with no subgraph."""
    return input_features(nodes, table, p) @ p.feat_proj + p.feat_bias


def aggregate_groups(rows: Tensor, groups: list[np.ndarray], nodes: np.ndarray, table: FeatureTable,
                     p: EncoderParams, cfg: EncoderConfig) -> Tensor:
    """``h_u`` for each node given indices of its per-subgraph rows in ``rows`` (``(R, d)``).

    Nodes with an empty group fall back to their input embedding.
    """
    u = len(groups)
    m = max([len(gr) for gr in groups] + [1])
    idx = np.zeros((u, m), dtype=np.int64)
    mask = np.zeros((u, m), dtype=bool)
    for i, gr in enumerate(groups):
        idx[i, :len(gr)] = gr
        mask[i, :len(gr)] = True
    empty = ~mask.any(axis=1)
    mask[empty, 0] = True  # keep softmax defined; result replaced below
    reps = ad.gather_rows(rows, idx)
    h = inter_aggregate(reps, mask, p.inter, cfg)
    if empty.any():
        keep = (~empty).astype(np.float64)[:, None]
        h = h * keep + input_embedding(nodes, table, p) * (1.0 - keep)
    return h
