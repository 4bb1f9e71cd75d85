"""Ontology schemas, subgraph enumeration and same-type perturbation."""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import HeteroGraph, TypeVocab


class SchemaError(ValueError):
    pass


class ExhaustedError(RuntimeError):
    """No valid negative could be produced within the retry budget."""


@dataclass(frozen=True)
class OntologySchema:
    """Pattern graph over typed slots.

    ``slot_types[i]`` is the node type id of slot ``i``; ``edges`` holds
    ``(slot_a, slot_b, edge_type_id)`` rows; ``target`` is the anchor slot.
    """

    slot_types: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...]
    target: int = 0
    slot_names: tuple[str, ...] = ()

    def __post_init__(self):
        s = len(self.slot_types)
        if s == 0:
            raise SchemaError("schema needs at least one slot")
        if not 0 <= self.target < s:
            raise SchemaError(f"target slot {self.target} does not exist")
        for a, b, _ in self.edges:
            if not (0 <= a < s and 0 <= b < s) or a == b:
                raise SchemaError(f"bad pattern edge ({a}, {b})")
        seen = {0}
        frontier = deque([0])
        while frontier:
            a = frontier.popleft()
            for b in self.slot_neighbors(a):
                if b not in seen:
                    seen.add(b)
                    frontier.append(b)
        if len(seen) != s:
            raise SchemaError("schema pattern is not connected")

    @property
    def num_slots(self) -> int:
        return len(self.slot_types)

    @property
    def target_type(self) -> int:
        return self.slot_types[self.target]

    def slot_neighbors(self, slot: int) -> list[int]:
        out = []
        for a, b, _ in self.edges:
            if a == slot:
                out.append(b)
            elif b == slot:
                out.append(a)
        return out

    def edge_endpoints(self) -> dict[int, tuple[int, int]]:
        return {t: (self.slot_types[a], self.slot_types[b]) for a, b, t in self.edges}


def load_schema_json(doc: dict, node_vocab: TypeVocab, edge_vocab: TypeVocab) -> OntologySchema:
    try:
        slots = sorted(doc["slots"], key=lambda s: s["id"])
        if [s["id"] for s in slots] != list(range(len(slots))):
            raise SchemaError("slot ids must be dense 0..S-1")
        slot_types = tuple(node_vocab.id(s["type"]) for s in slots)
        edges = tuple((int(e["a"]), int(e["b"]), edge_vocab.id(e["type"])) for e in doc.get("edges", []))
        names = tuple(s.get("name", s["type"]) for s in slots)
        return OntologySchema(slot_types, edges, int(doc.get("target", 0)), names)
    except KeyError as exc:
        raise SchemaError(f"schema references unknown name or field {exc}") from None


def load_schema(path: str | Path, node_vocab: TypeVocab, edge_vocab: TypeVocab) -> OntologySchema:
    return load_schema_json(json.loads(Path(path).read_text()), node_vocab, edge_vocab)


def schema_to_json(schema: OntologySchema, node_vocab: TypeVocab | None = None, edge_vocab: TypeVocab | None = None) -> dict:
    """Inverse of ``load_schema_json``; falls back to slot names / raw ids without vocabularies."""
    doc = {"slots": [], "edges": [], "target": schema.target}
    for i, t in enumerate(schema.slot_types):
        name = node_vocab.names[t] if node_vocab else (schema.slot_names[i] if schema.slot_names else str(t))
        doc["slots"].append({"id": i, "type": name})
    for a, b, t in schema.edges:
        doc["edges"].append({"a": a, "b": b, "type": edge_vocab.names[t] if edge_vocab else str(t)})
    return doc


@dataclass(frozen=True)
class OntoSubgraph:
    anchor: int
    assignment: tuple[int, ...]  # slot -> graph node id
    edges: tuple[tuple[int, int, int], ...] = ()

    @property
    def key(self) -> bytes:
        return canonical_key(self)


@dataclass(frozen=True)
class PerturbedSubgraph:
    base: OntoSubgraph
    assignment: tuple[int, ...]
    substitutions: tuple[tuple[int, int, int], ...]  # (slot, original, replacement)
    label: int = 0

    @property
    def anchor(self) -> int:
        return self.base.anchor

    @property
    def key(self) -> bytes:
        return canonical_key(self)


def canonical_key(o: OntoSubgraph | PerturbedSubgraph | Sequence[int]) -> bytes:
    """Slot-ordered node ids packed as little-endian u64."""
    ids = o.assignment if hasattr(o, "assignment") else o
    return np.asarray(ids, dtype="<u8").tobytes()


def _match(g: HeteroGraph, s: OntologySchema, anchor: int) -> list[tuple[int, ...]]:
    n_slots = s.num_slots
    # slot -> list of (other slot, edge type)
    pattern_adj: list[list[tuple[int, int]]] = [[] for _ in range(n_slots)]
    for a, b, t in s.edges:
        pattern_adj[a].append((b, t))
        pattern_adj[b].append((a, t))
    assign = [-1] * n_slots
    assign[s.target] = anchor
    used = {anchor}
    results: list[tuple[int, ...]] = []

    def candidates(slot: int) -> set[int] | None:
        cand = None
        for other, t in pattern_adj[slot]:
            if assign[other] < 0:
                continue
            nb = g.neighbor_set(assign[other], t)
            cand = set(nb) if cand is None else cand & nb
            if not cand:
                return cand
        if cand is None:
            return None
        want = s.slot_types[slot]
        return {v for v in cand if g.node_type[v] == want and v not in used}

    def extend(depth: int) -> None:
        if depth == n_slots:
            results.append(tuple(assign))
            return
        best_slot, best = -1, None
        for slot in range(n_slots):
            if assign[slot] >= 0:
                continue
            cand = candidates(slot)
            if cand is None:
                continue  # not adjacent to the assigned part yet
            if best is None or len(cand) < len(best):
                best_slot, best = slot, cand
                if not cand:
                    return
        for v in sorted(best):
            assign[best_slot] = v
            used.add(v)
            extend(depth + 1)
            used.discard(v)
        assign[best_slot] = -1

    extend(1)
    return results


def enumerate_subgraphs(
    g: HeteroGraph,
    s: OntologySchema,
    anchor: int,
    cap: int | None = 64,
    seed: int | Sequence[int] = 0,
) -> list[OntoSubgraph]:
    """All pattern instances with the target slot bound to ``anchor``.

    When more than ``cap`` instances exist, a seeded uniform sample of size
    ``cap`` is returned. Results are sorted by canonical key.
    """
    if g.node_type[anchor] != s.target_type:
        raise SchemaError(
            f"anchor {anchor} has type {g.node_types.names[g.node_type[anchor]]}, "
            f"target slot expects {g.node_types.names[s.target_type]}"
        )
    found = _match(g, s, anchor)
    found.sort(key=canonical_key)
    return [_instance(s, anchor, a) for a in _sample(found, cap, seed)]


def _instance(s: OntologySchema, anchor: int, a: tuple[int, ...]) -> OntoSubgraph:
    return OntoSubgraph(anchor, a, tuple((a[x], a[y], t) for x, y, t in s.edges))


def _sample(found: list, cap: int | None, seed) -> list:
    if cap is None or len(found) <= cap:
        return found
    keep = np.sort(np.random.default_rng(seed).choice(len(found), size=cap, replace=False))
    return [found[i] for i in keep]


@dataclass
class Extraction:
    """Per-anchor instance lists plus the full positive key index."""

    instances: dict[int, list[OntoSubgraph]]
    positive_index: set[bytes]
    capped: int = 0
    totals: dict[int, int] = field(default_factory=dict)

    def all_instances(self) -> list[OntoSubgraph]:
        return [o for a in sorted(self.instances) for o in self.instances[a]]


def extract_all(
    g: HeteroGraph,
    s: OntologySchema,
    anchors: Iterable[int] | None = None,
    cap: int | None = 64,
    seed: int = 0,
    threads: int = 1,
) -> Extraction:
    """Enumerate every anchor; per-anchor random stream is ``(seed, anchor)``."""
    if anchors is None:
        anchors = g.nodes_of_type(s.target_type).tolist()
    anchors = [int(a) for a in anchors]

    def work(a: int):
        full = enumerate_subgraphs(g, s, a, cap=None)
        return a, _sample(full, cap, [seed, a]), [o.key for o in full], len(full)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, anchors))
    else:
        results = [work(a) for a in anchors]
    out = Extraction({}, set())
    for a, inst, keys, total in results:
        out.instances[a] = inst
        out.positive_index.update(keys)
        out.totals[a] = total
        out.capped += total > len(inst)
    return out


def perturb(
    o: OntoSubgraph,
    g: HeteroGraph,
    positive_index: set[bytes],
    n_swap: int = 1,
    max_retries: int = 20,
    seed: int | Sequence[int] = 0,
    *,
    target: int | None = None,
    slots: Sequence[int] | None = None,
    exclude: set[bytes] | None = None,
) -> PerturbedSubgraph:
    """Replace ``n_swap`` non-anchor slots with random nodes of the same type.

    The anchor slot is found as the slot holding ``o.anchor`` unless
    ``target`` is given. ``slots`` pins which slots are swapped. A candidate is
    rejected if it is a known positive, repeats a node already in the
    assignment, or is in ``exclude``. Raises ``ExhaustedError`` after
    ``max_retries`` rejected attempts.
    """
    n_slots = len(o.assignment)
    if target is None:
        target = o.assignment.index(o.anchor)
    free = [i for i in range(n_slots) if i != target]
    if slots is None and n_swap > len(free):
        raise ValueError(f"n_swap={n_swap} exceeds the {len(free)} non-anchor slots")
    rng = np.random.default_rng(seed)
    for _ in range(max(1, max_retries)):
        chosen = list(slots) if slots is not None else sorted(rng.choice(free, size=n_swap, replace=False).tolist())
        assign = list(o.assignment)
        subs = []
        ok = True
        for slot in chosen:
            orig = o.assignment[slot]
            pool = g.nodes_of_type(int(g.node_type[orig]))
            if len(pool) < 2:
                ok = False
                break
            i = int(rng.integers(len(pool) - 1))
            if i >= np.searchsorted(pool, orig):
                i += 1
            repl = int(pool[i])
            assign[slot] = repl
            subs.append((slot, orig, repl))
        if not ok or len(set(assign)) != n_slots:
            continue
        key = canonical_key(assign)
        if key in positive_index or (exclude is not None and key in exclude):
            continue
        return PerturbedSubgraph(o, tuple(assign), tuple(subs))
    raise ExhaustedError(f"no negative for anchor {o.anchor} within {max_retries} retries")


@dataclass(frozen=True)
class LabeledSample:
    assignment: tuple[int, ...]
    anchor: int
    label: int  # 1 = original instance, 0 = perturbed
    substituted: tuple[int, ...] = ()  # slots replaced


def build_batches(
    positives: Sequence[OntoSubgraph],
    negatives: Sequence[PerturbedSubgraph],
    ratio: float = 1.0,
    seed: int | Sequence[int] = 0,
) -> list[LabeledSample]:
    """Shuffle positives with up to ``round(ratio * len(positives))`` negatives."""
    if not positives:
        raise ValueError("build_batches needs at least one positive")
    n_neg = min(len(negatives), int(round(ratio * len(positives))))
    samples = [LabeledSample(p.assignment, p.anchor, 1) for p in positives]
    samples += [LabeledSample(q.assignment, q.anchor, 0, tuple(s for s, _, _ in q.substitutions)) for q in negatives[:n_neg]]
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order]
