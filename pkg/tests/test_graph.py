import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DBLP_EDGES, DBLP_NODES, write_dblp_fixture
from ontosub.graph import (
    DatasetError,
    HeteroGraph,
    TypeVocab,
    degree_stats,
    load_dataset,
    neighbors,
    read_features,
    write_dataset,
    write_features,
)


def _ids(g, names):
    idx = {oid: i for i, oid in enumerate(g.original_ids)}
    return [idx[n] for n in names]


def test_upt_counts(upt_dir):
    g, schema, split = load_dataset(upt_dir)
    assert g.num_nodes == 4 and g.num_edges == 3
    assert len(g.node_types) == 3
    assert split is None
    assert schema.num_slots == 3
    # independent line count of the fixture files
    assert g.num_nodes == len((upt_dir / "nodes.tsv").read_text().splitlines())
    assert g.num_edges == len((upt_dir / "edges.tsv").read_text().splitlines())


def test_upt_neighbors(upt_dir):
    g, _, _ = load_dataset(upt_dir)
    u1, u2, p1, t1 = _ids(g, ["u1", "u2", "p1", "t1"])
    interact, mark = g.edge_types.id("interact"), g.edge_types.id("mark")
    assert list(neighbors(g, u1)) == [(p1, interact)]
    assert list(neighbors(g, p1)) == [(u1, interact), (u2, interact), (t1, mark)]
    assert list(neighbors(g, p1, mark)) == [(t1, mark)]
    with pytest.raises(IndexError):
        list(neighbors(g, 99))


def test_upt_degree_stats(upt_dir):
    g, _, _ = load_dataset(upt_dir)
    stats = degree_stats(g)
    assert stats["nodes"] == {"User": 2, "Post": 1, "Tag": 1}
    assert sum(stats["nodes"].values()) == g.num_nodes
    assert sum(stats["edges"].values()) == g.num_edges


def test_isolated_node_has_no_neighbors(tmp_path, upt_dir):
    for name in ("edges.tsv", "schema.json"):
        (tmp_path / name).write_text((upt_dir / name).read_text())
    (tmp_path / "nodes.tsv").write_text((upt_dir / "nodes.tsv").read_text() + "u3\tUser\n")
    g, _, _ = load_dataset(tmp_path)
    assert list(neighbors(g, _ids(g, ["u3"])[0])) == []


def test_empty_edges(tmp_path):
    (tmp_path / "nodes.tsv").write_text("a\tUser\nb\tUser\nc\tPost\n")
    (tmp_path / "edges.tsv").write_text("")
    (tmp_path / "schema.json").write_text(json.dumps({"slots": [{"id": 0, "type": "User"}], "edges": [], "target": 0}))
    g, schema, _ = load_dataset(tmp_path)
    assert g.num_nodes == 3 and g.num_edges == 0
    stats = degree_stats(g)
    assert all(v == 0 for v in stats["edges"].values())


def test_empty_graph_stats():
    g = HeteroGraph(TypeVocab(("A",)), TypeVocab(("r",)), np.zeros(0, int), np.zeros((0, 3), int), np.zeros((0, 0)),
                    np.zeros(0, bool))
    assert degree_stats(g) == {"nodes": {"A": 0}, "edges": {"r": 0}}


def test_dblp_shaped_fixture(tmp_path):
    g, schema, split = load_dataset(write_dblp_fixture(tmp_path / "dblp"))
    assert g.num_nodes == 26128 == sum(DBLP_NODES.values())
    assert g.num_edges == 119783 == sum(DBLP_EDGES.values())
    assert len(g.node_types) == 4 and len(g.edge_types) == 3
    assert g.node_types.names[schema.target_type] == "author"
    assert split.num_classes == 4
    stats = degree_stats(g)
    assert stats["nodes"] == DBLP_NODES and stats["edges"] == DBLP_EDGES


@pytest.mark.parametrize("files, message", [
    ({"nodes.tsv": "a\tUser\na\tUser\n"}, "duplicate node id"),
    ({"edges.tsv": "u1\tzz\tinteract\n"}, "not a declared node"),
    ({"edges.tsv": "u1\tu1\tinteract\n"}, "self-loop"),
    ({"nodes.tsv": "u1\tUser\n"}, "not a declared node"),
])
def test_load_errors_carry_file_and_line(tmp_path, upt_dir, files, message):
    for name in ("nodes.tsv", "edges.tsv", "schema.json"):
        (tmp_path / name).write_text(files.get(name, (upt_dir / name).read_text()))
    with pytest.raises(DatasetError, match=message) as info:
        load_dataset(tmp_path)
    assert info.value.line is not None


def test_undeclared_type(tmp_path, upt_dir):
    for name in ("nodes.tsv", "edges.tsv"):
        (tmp_path / name).write_text((upt_dir / name).read_text())
    doc = json.loads((upt_dir / "schema.json").read_text())
    doc["node_types"] = ["User", "Post"]
    (tmp_path / "schema.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="not declared") as info:
        load_dataset(tmp_path)
    assert info.value.line == 4


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(tmp_path)


def test_adjacency_completeness(tmp_path):
    g, _, _ = load_dataset(write_dblp_fixture(tmp_path / "dblp"))
    sample = g.edges[np.random.default_rng(0).choice(g.num_edges, 500, replace=False)]
    for u, v, t in sample.tolist():
        assert [n for n, et in neighbors(g, u) if (n, et) == (v, t)] == [v]
        assert [n for n, et in neighbors(g, v) if (n, et) == (u, t)] == [u]
    total = sum(len(list(neighbors(g, i))) for i in range(0, g.num_nodes))
    assert total == 2 * g.num_edges


def test_type_consistency(tmp_path):
    g, _, _ = load_dataset(write_dblp_fixture(tmp_path / "dblp"))
    for t, (a, b) in g.edge_endpoints.items():
        sel = g.edges[g.edges[:, 2] == t]
        pair = np.sort(g.node_type[sel[:, :2]], axis=1)
        assert (pair == sorted((a, b))).all()


def test_features_roundtrip(tmp_path):
    x = np.random.default_rng(1).normal(size=(5, 3)).astype(np.float32)
    x[2] = np.nan
    write_features(tmp_path / "f.bin", x)
    back = read_features(tmp_path / "f.bin")
    assert back.dtype == np.float64
    np.testing.assert_array_equal(np.isnan(back), np.isnan(x))
    np.testing.assert_array_equal(back[~np.isnan(back)], x[~np.isnan(x)].astype(np.float64))


@st.composite
def random_graphs(draw):
    n = draw(st.integers(1, 12))
    types = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=30))
    pair_type = {(0, 0): 0, (0, 1): 1, (0, 2): 2, (1, 1): 3, (1, 2): 4, (2, 2): 5}
    edges = []
    for a, b in pairs:
        if a != b:
            edges.append((a, b, pair_type[tuple(sorted((types[a], types[b])))]))
    return np.array(types), np.array(edges, dtype=np.int64).reshape(-1, 3)


@settings(max_examples=40, deadline=None)
@given(random_graphs())
def test_write_load_roundtrip(tmp_path_factory, data):
    types, edges = data
    node_vocab = TypeVocab(("A", "B", "C"))
    edge_vocab = TypeVocab(tuple(f"r{i}" for i in range(6)))
    feats = np.random.default_rng(len(types)).normal(size=(len(types), 2)).astype(np.float32).astype(np.float64)
    has = types != 2
    g = HeteroGraph(node_vocab, edge_vocab, types, edges, np.where(has[:, None], feats, 0.0), has,
                    [f"n{i}" for i in range(len(types))])
    from ontosub.ontology import OntologySchema
    schema = OntologySchema((int(types[0]),), ())
    root = tmp_path_factory.mktemp("rt")
    write_dataset(root, g, schema)
    g2, schema2, _ = load_dataset(root)
    assert g2.num_nodes == g.num_nodes and g2.num_edges == g.num_edges
    remap = np.array([g2.original_ids.index(o) for o in g.original_ids])
    renamed = np.column_stack([np.sort(remap[g.edges[:, :2]], axis=1), g.edges[:, 2]]) if g.num_edges else g.edges
    for t in range(6):
        sel = renamed[renamed[:, 2] == t]
        got = g2.edges[g2.edges[:, 2] == g2.edge_types.id(f"r{t}")] if f"r{t}" in g2.edge_types else g2.edges[:0]
        assert sorted(map(tuple, sel[:, :2].tolist())) == sorted(map(tuple, got[:, :2].tolist()))
    np.testing.assert_array_equal(g2.has_features[remap], g.has_features)
    np.testing.assert_allclose(g2.features[remap][has], g.features[has])
    # a second write of the reloaded graph is byte-identical
    root2 = tmp_path_factory.mktemp("rt2")
    write_dataset(root2, g2, schema2)
    for name in ("nodes.tsv", "edges.tsv", "schema.json"):
        assert (root / name).read_bytes() == (root2 / name).read_bytes()
