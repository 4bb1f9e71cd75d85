"""Planted-partition heterogeneous graphs (User - Post - Tag) for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import split_edges
from .graph import LINK_PREDICTION, NODE_CLASSIFICATION, HeteroGraph, LabeledSplit, TypeVocab
from .ontology import OntologySchema


@dataclass(frozen=True)
class SynthSpec:
    users: int = 300
    posts: int = 150
    tags: int = 50
    classes: int = 4
    p_in: float = 0.12  # user-post edge probability within a class
    p_out: float = 0.004  # ... across classes
    tag_p_in: float = 0.3
    tag_p_out: float = 0.01
    sigma: float = 1.0  # feature noise around the class mean
    separation: float = 1.0  # distance of class means from the origin
    feature_dim: int = 16
    train_frac: float = 0.6
    val_frac: float = 0.2
    task: str = NODE_CLASSIFICATION
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if min(self.users, self.posts, self.tags) < 1:
            raise ValueError("every node type needs at least one node")
        for name in ("p_in", "p_out", "tag_p_in", "tag_p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.p_in + self.p_out == 0 or self.tag_p_in + self.tag_p_out == 0:
            raise ValueError("wiring probabilities leave the schema unsatisfiable")
        if self.feature_dim < self.classes:
            raise ValueError("feature_dim must be at least the class count")


def _wire(rng, cls_a, cls_b, p_in, p_out) -> list[tuple[int, int]]:
    same = cls_a[:, None] == cls_b[None, :]
    prob = np.where(same, p_in, p_out)
    hit = rng.random(prob.shape) < prob
    # every left node gets at least one partner, drawn with the same class bias
    for i in np.flatnonzero(~hit.any(axis=1)):
        w = prob[i] / prob[i].sum()
        hit[i, rng.choice(len(w), p=w)] = True
    a, b = np.nonzero(hit)
    return list(zip(a.tolist(), b.tolist()))


def synth_hin(spec: SynthSpec = SynthSpec()) -> tuple[HeteroGraph, OntologySchema, LabeledSplit]:
    """Users carry class-blob features; posts and tags are featureless; wiring is class-assortative."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5E])
    c = spec.classes
    cls_u = rng.permutation(np.arange(spec.users) % c)
    cls_p = rng.permutation(np.arange(spec.posts) % c)
    cls_t = rng.permutation(np.arange(spec.tags) % c)

    nu, np_, nt = spec.users, spec.posts, spec.tags
    off_p, off_t = nu, nu + np_
    n = nu + np_ + nt
    node_type = np.concatenate([np.zeros(nu, int), np.ones(np_, int), np.full(nt, 2)])
    edges = [(u, off_p + p, 0) for u, p in _wire(rng, cls_u, cls_p, spec.p_in, spec.p_out)]
    edges += [(off_p + p, off_t + t, 1) for p, t in _wire(rng, cls_p, cls_t, spec.tag_p_in, spec.tag_p_out)]

    means = np.zeros((c, spec.feature_dim))
    means[np.arange(c), np.arange(c)] = spec.separation
    feats = np.full((n, spec.feature_dim), np.nan)
    feats[:nu] = means[cls_u] + spec.sigma * rng.normal(size=(nu, spec.feature_dim))
    has = np.zeros(n, dtype=bool)
    has[:nu] = True

    ids = [f"u{i}" for i in range(nu)] + [f"p{i}" for i in range(np_)] + [f"t{i}" for i in range(nt)]
    node_vocab = TypeVocab(("User", "Post", "Tag"))
    edge_vocab = TypeVocab(("interact", "mark"))
    g = HeteroGraph(node_vocab, edge_vocab, node_type, np.array(edges, dtype=np.int64),
                    np.where(has[:, None], feats, 0.0), has, ids, {0: (0, 1), 1: (1, 2)})
    schema = OntologySchema((0, 1, 2), ((0, 1, 0), (1, 2, 1)), target=0, slot_names=("User", "Post", "Tag"))

    if spec.task == LINK_PREDICTION:
        split = split_edges(g, 0, seed=spec.seed)
    else:
        order = rng.permutation(nu)
        n_tr = int(round(spec.train_frac * nu))
        n_va = int(round(spec.val_frac * nu))
        labels = {int(u): int(cls_u[u]) for u in range(nu)}
        split = LabeledSplit(NODE_CLASSIFICATION, order[:n_tr], order[n_tr:n_tr + n_va], order[n_tr + n_va:],
                             labels=labels, num_classes=c)
    return g, schema, split
