"""Typed heterogeneous graph, dataset ingestion and splits."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np

NODE_CLASSIFICATION = "node-classification"
LINK_PREDICTION = "link-prediction"
TASK_KINDS = (NODE_CLASSIFICATION, LINK_PREDICTION)


class DatasetError(ValueError):
    """Malformed dataset input; message carries file and line when known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class TypeVocab:
    """Dense id <-> name mapping for node or edge types."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate type names in {self.names}")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def id(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)


@dataclass(eq=False)
class HeteroGraph:
    """Immutable undirected typed graph.

    ``edges`` holds one row ``(src, dst, edge_type)`` per undirected edge with
    ``src < dst``, sorted lexicographically. Nodes flagged in
    ``has_features == False`` carry zero rows in ``features`` and are given a
    learned embedding by the encoder.
    """

    node_types: TypeVocab
    edge_types: TypeVocab
    node_type: np.ndarray  # (N,) int64
    edges: np.ndarray  # (E, 3) int64
    features: np.ndarray  # (N, d_n) float64
    has_features: np.ndarray  # (N,) bool
    original_ids: list[str] = field(default_factory=list)
    edge_endpoints: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.node_type)
        self.node_type = np.asarray(self.node_type, dtype=np.int64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        if len(edges):
            if (edges[:, 0] == edges[:, 1]).any():
                raise DatasetError("self-loops are not allowed")
            if edges[:, :2].min() < 0 or edges[:, :2].max() >= n:
                raise DatasetError("edge endpoint out of range")
            if edges[:, 2].min() < 0 or edges[:, 2].max() >= len(self.edge_types):
                raise DatasetError("unregistered edge type id")
            lo = np.minimum(edges[:, 0], edges[:, 1])
            hi = np.maximum(edges[:, 0], edges[:, 1])
            edges = np.unique(np.stack([lo, hi, edges[:, 2]], axis=1), axis=0)
        self.edges = edges
        if n and (self.node_type.min() < 0 or self.node_type.max() >= len(self.node_types)):
            raise DatasetError("unregistered node type id")
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        self.features = feats.reshape(n, feats.shape[-1] if feats.ndim == 2 else -1) if n else feats.reshape(0, 0)
        self.has_features = np.asarray(self.has_features, dtype=bool)
        if not self.original_ids:
            self.original_ids = [str(i) for i in range(n)]
        self._build_adjacency()
        for t, ends in self.edge_endpoints.items():
            sel = self.edges[self.edges[:, 2] == t]
            if not len(sel):
                continue
            pair = np.sort(self.node_type[sel[:, :2]], axis=1)
            bad = np.flatnonzero((pair != sorted(ends)).any(axis=1))
            if len(bad):
                u, v = sel[bad[0], :2]
                raise DatasetError(
                    f"edge ({self.original_ids[u]}, {self.original_ids[v]}) of type "
                    f"{self.edge_types.names[t]} violates declared endpoint types"
                )

    def _build_adjacency(self) -> None:
        n = self.num_nodes
        e = self.edges
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        et = np.concatenate([e[:, 2], e[:, 2]])
        order = np.lexsort((dst, et, src))
        self._adj_nbr = dst[order]
        self._adj_type = et[order]
        counts = np.bincount(src, minlength=n)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def num_nodes(self) -> int:
        return len(self.node_type)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, node: int, edge_type: int | None = None) -> Iterator[tuple[int, int]]:
        """Yield ``(neighbor, edge_type)`` in ascending neighbor order."""
        if not 0 <= node < self.num_nodes:
            raise IndexError(f"node {node} out of range [0, {self.num_nodes})")
        lo, hi = self._indptr[node], self._indptr[node + 1]
        nbr, typ = self._adj_nbr[lo:hi], self._adj_type[lo:hi]
        if edge_type is not None:
            keep = typ == edge_type
            nbr, typ = nbr[keep], typ[keep]
        order = np.lexsort((typ, nbr))
        for i in order:
            yield int(nbr[i]), int(typ[i])

    def neighbor_set(self, node: int, edge_type: int) -> frozenset[int]:
        cache = self.__dict__.setdefault("_nbr_cache", {})
        key = (node, edge_type)
        if key not in cache:
            lo, hi = self._indptr[node], self._indptr[node + 1]
            sel = self._adj_type[lo:hi] == edge_type
            cache[key] = frozenset(self._adj_nbr[lo:hi][sel].tolist())
        return cache[key]

    def has_edge(self, u: int, v: int, edge_type: int) -> bool:
        return v in self.neighbor_set(u, edge_type)

    def nodes_of_type(self, type_id: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_type_cache", {})
        if type_id not in cache:
            cache[type_id] = np.flatnonzero(self.node_type == type_id)
        return cache[type_id]

    def without_edges(self, removed: np.ndarray) -> "HeteroGraph":
        """Copy of the graph with the given undirected ``(u, v, t)`` rows removed."""
        removed = np.asarray(removed, dtype=np.int64).reshape(-1, 3)
        drop = {(min(u, v), max(u, v), t) for u, v, t in removed.tolist()}
        keep = [row for row in self.edges.tolist() if tuple(row) not in drop]
        return HeteroGraph(
            self.node_types,
            self.edge_types,
            self.node_type.copy(),
            np.array(keep, dtype=np.int64).reshape(-1, 3),
            self.features,
            self.has_features,
            list(self.original_ids),
            dict(self.edge_endpoints),
        )


def neighbors(g: HeteroGraph, node: int, edge_type: int | None = None) -> Iterator[tuple[int, int]]:
    return g.neighbors(node, edge_type)


def degree_stats(g: HeteroGraph) -> dict[str, dict[str, int]]:
    """Per-type node and edge counts keyed by type name."""
    nodes = np.bincount(g.node_type, minlength=len(g.node_types))
    edges = np.bincount(g.edges[:, 2], minlength=len(g.edge_types)) if g.num_edges else np.zeros(len(g.edge_types), int)
    return {
        "nodes": {name: int(nodes[i]) for i, name in enumerate(g.node_types.names)},
        "edges": {name: int(edges[i]) for i, name in enumerate(g.edge_types.names)},
    }


@dataclass
class LabeledSplit:
    """Train/val/test partition.

    For node classification the sets hold node ids and ``labels`` maps node id
    to class index. For link prediction the sets hold ``(u, v)`` rows of
    ``edge_type`` edges and ``val_negative``/``test_negative`` sampled non-edges.
    """

    task: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    labels: dict[int, int] | None = None
    num_classes: int = 0
    edge_type: int | None = None
    val_negative: np.ndarray | None = None
    test_negative: np.ndarray | None = None

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task!r}")
        shape = (-1,) if self.task == NODE_CLASSIFICATION else (-1, 2)
        self.train = np.asarray(self.train, dtype=np.int64).reshape(shape)
        self.val = np.asarray(self.val, dtype=np.int64).reshape(shape)
        self.test = np.asarray(self.test, dtype=np.int64).reshape(shape)
        if self.task == LINK_PREDICTION:
            self.val_negative = np.asarray(
                self.val_negative if self.val_negative is not None else [], dtype=np.int64
            ).reshape(-1, 2)
            self.test_negative = np.asarray(
                self.test_negative if self.test_negative is not None else [], dtype=np.int64
            ).reshape(-1, 2)

    def _key_sets(self):
        if self.task == NODE_CLASSIFICATION:
            return [set(s.tolist()) for s in (self.train, self.val, self.test)]
        return [{(min(a, b), max(a, b)) for a, b in s.tolist()} for s in (self.train, self.val, self.test)]

    def validate(self, g: HeteroGraph) -> None:
        tr, va, te = self._key_sets()
        if tr & va or tr & te or va & te:
            raise DatasetError("train/val/test splits overlap")
        for ids in (self.train, self.val, self.test):
            if ids.size and (ids.min() < 0 or ids.max() >= g.num_nodes):
                raise DatasetError("split references a node outside the graph")
        if self.task == NODE_CLASSIFICATION and self.labels is not None:
            for v in self.train.tolist():
                if v not in self.labels:
                    raise DatasetError(f"training node {g.original_ids[v]} has no label")

    def onehot(self, nodes: np.ndarray) -> np.ndarray:
        y = np.zeros((len(nodes), self.num_classes))
        y[np.arange(len(nodes)), [self.labels[int(v)] for v in nodes]] = 1.0
        return y


# ---------------------------------------------------------------- file io


def _read_tsv(path: Path, ncols: int) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise DatasetError(f"expected {ncols} tab-separated columns, got {len(parts)}", path, lineno)
            yield lineno, parts


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DatasetError("truncated header", path)
    n, d = struct.unpack("<QQ", raw[:16])
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    if body.size != n * d:
        raise DatasetError(f"expected {n * d} floats, found {body.size}", path)
    return body.astype(np.float64).reshape(n, d)


def write_features(path: Path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", *features.shape))
        fh.write(features.tobytes())


def load_dataset(dir_path: str | Path):
    """Load ``(HeteroGraph, OntologySchema, LabeledSplit | None)`` from a dataset directory.

    Feature rows that are entirely NaN mark featureless nodes. When
    ``features.bin`` is absent every node is featureless.
    """
    from .ontology import load_schema_json

    root = Path(dir_path)
    for name in ("nodes.tsv", "edges.tsv", "schema.json"):
        if not (root / name).is_file():
            raise DatasetError("missing required file", root / name)

    schema_doc = json.loads((root / "schema.json").read_text())
    declared_nt = schema_doc.get("node_types")
    declared_et = schema_doc.get("edge_types")

    ids: dict[str, int] = {}
    type_names: list[str] = []
    node_type_names: list[str] = []
    for lineno, (nid, tname) in _read_tsv(root / "nodes.tsv", 2):
        if nid in ids:
            raise DatasetError(f"duplicate node id {nid!r}", root / "nodes.tsv", lineno)
        if declared_nt is not None and tname not in declared_nt:
            raise DatasetError(f"node type {tname!r} not declared in schema.json", root / "nodes.tsv", lineno)
        ids[nid] = len(ids)
        node_type_names.append(tname)
        if tname not in type_names:
            type_names.append(tname)
    node_vocab = TypeVocab(tuple(declared_nt) if declared_nt is not None else tuple(type_names))

    edge_rows: list[tuple[int, int, str]] = []
    etype_names: list[str] = []
    for lineno, (s, d, tname) in _read_tsv(root / "edges.tsv", 3):
        if s not in ids or d not in ids:
            missing = s if s not in ids else d
            raise DatasetError(f"edge endpoint {missing!r} is not a declared node", root / "edges.tsv", lineno)
        if declared_et is not None and tname not in declared_et:
            raise DatasetError(f"edge type {tname!r} not declared in schema.json", root / "edges.tsv", lineno)
        if ids[s] == ids[d]:
            raise DatasetError(f"self-loop on node {s!r}", root / "edges.tsv", lineno)
        edge_rows.append((ids[s], ids[d], tname))
        if tname not in etype_names:
            etype_names.append(tname)
    # pattern edge types may be absent from edges.tsv
    for e in schema_doc.get("edges", []):
        if declared_et is None and e["type"] not in etype_names:
            etype_names.append(e["type"])
    for s in schema_doc.get("slots", []):
        if s["type"] not in node_vocab:
            raise DatasetError(f"schema slot type {s['type']!r} has no declared nodes", root / "schema.json")
    edge_vocab = TypeVocab(tuple(declared_et) if declared_et is not None else tuple(etype_names))

    n = len(ids)
    node_type = np.array([node_vocab.id(t) for t in node_type_names], dtype=np.int64)
    edges = np.array([(a, b, edge_vocab.id(t)) for a, b, t in edge_rows], dtype=np.int64).reshape(-1, 3)

    if (root / "features.bin").is_file():
        feats = read_features(root / "features.bin")
        if feats.shape[0] != n:
            raise DatasetError(f"feature rows {feats.shape[0]} != node count {n}", root / "features.bin")
        has = ~np.isnan(feats).all(axis=1)
        if np.isnan(feats[has]).any():
            raise DatasetError("partially-NaN feature row", root / "features.bin")
        feats = np.where(has[:, None], feats, 0.0)
    else:
        feats = np.zeros((n, 0))
        has = np.zeros(n, dtype=bool)

    schema = load_schema_json(schema_doc, node_vocab, edge_vocab)
    endpoints = dict(schema.edge_endpoints())
    for tname, pair in schema_doc.get("edge_endpoints", {}).items():
        endpoints[edge_vocab.id(tname)] = (node_vocab.id(pair[0]), node_vocab.id(pair[1]))

    g = HeteroGraph(node_vocab, edge_vocab, node_type, edges, feats, has, list(ids), endpoints)

    labels = None
    if (root / "labels.tsv").is_file():
        labels = {}
        for lineno, (nid, cls) in _read_tsv(root / "labels.tsv", 2):
            if nid not in ids:
                raise DatasetError(f"label for unknown node {nid!r}", root / "labels.tsv", lineno)
            labels[ids[nid]] = int(cls)

    split = None
    if (root / "split.json").is_file():
        split = _load_split(root / "split.json", ids, edge_vocab, labels)
        split.validate(g)
    return g, schema, split


def _load_split(path: Path, ids: dict[str, int], edge_vocab: TypeVocab, labels) -> LabeledSplit:
    doc = json.loads(path.read_text())
    task = doc.get("task", NODE_CLASSIFICATION)

    def node(x):
        key = str(x)
        if key not in ids:
            raise DatasetError(f"split references unknown node {key!r}", path)
        return ids[key]

    if task == LINK_PREDICTION:
        pairs = {k: [(node(a), node(b)) for a, b in doc.get(k, [])] for k in ("train", "val", "test", "val_negative", "test_negative")}
        return LabeledSplit(task, pairs["train"], pairs["val"], pairs["test"], edge_type=edge_vocab.id(doc["edge_type"]),
                            val_negative=pairs["val_negative"], test_negative=pairs["test_negative"])
    sets = {k: [node(x) for x in doc.get(k, [])] for k in ("train", "val", "test")}
    num_classes = int(doc.get("num_classes", 0)) or (max(labels.values()) + 1 if labels else 0)
    return LabeledSplit(task, sets["train"], sets["val"], sets["test"], labels=labels, num_classes=num_classes)


def write_dataset(dir_path: str | Path, g: HeteroGraph, schema, split: LabeledSplit | None = None) -> None:
    from .ontology import schema_to_json

    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    oid = g.original_ids
    with open(root / "nodes.tsv", "w", encoding="utf-8") as fh:
        for i in range(g.num_nodes):
            fh.write(f"{oid[i]}\t{g.node_types.names[g.node_type[i]]}\n")
    with open(root / "edges.tsv", "w", encoding="utf-8") as fh:
        for u, v, t in g.edges.tolist():
            fh.write(f"{oid[u]}\t{oid[v]}\t{g.edge_types.names[t]}\n")
    doc = schema_to_json(schema, g.node_types, g.edge_types)
    doc["node_types"] = list(g.node_types.names)
    doc["edge_types"] = list(g.edge_types.names)
    if g.edge_endpoints:
        doc["edge_endpoints"] = {g.edge_types.names[t]: [g.node_types.names[a], g.node_types.names[b]]
                                 for t, (a, b) in sorted(g.edge_endpoints.items())}
    (root / "schema.json").write_text(json.dumps(doc, indent=2) + "\n")
    if g.feature_dim:
        feats = np.where(g.has_features[:, None], g.features, np.nan)
        write_features(root / "features.bin", feats)
    if split is None:
        return
    if split.task == NODE_CLASSIFICATION:
        if split.labels:
            with open(root / "labels.tsv", "w", encoding="utf-8") as fh:
                for v in sorted(split.labels):
                    fh.write(f"{oid[v]}\t{split.labels[v]}\n")
        doc = {"task": split.task, "num_classes": split.num_classes}
        for k in ("train", "val", "test"):
            doc[k] = [oid[v] for v in getattr(split, k).tolist()]
    else:
        doc = {"task": split.task, "edge_type": g.edge_types.names[split.edge_type]}
        for k in ("train", "val", "test", "val_negative", "test_negative"):
            doc[k] = [[oid[a], oid[b]] for a, b in getattr(split, k).tolist()]
    (root / "split.json").write_text(json.dumps(doc) + "\n")
