import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# DBLP-style dataset sizes
DBLP_NODES = {"author": 4057, "paper": 14328, "term": 7723, "venue": 20}
DBLP_EDGES = {"author-paper": 19645, "paper-term": 85810, "paper-venue": 14328}


@pytest.fixture
def upt_dir() -> Path:
    return FIXTURES / "upt"


def write_dblp_fixture(root: Path) -> Path:
    """Write a DBLP-shaped dataset with exactly the published node and edge counts."""
    root.mkdir(parents=True, exist_ok=True)
    na, npap, nt, nv = (DBLP_NODES[k] for k in ("author", "paper", "term", "venue"))
    with open(root / "nodes.tsv", "w") as fh:
        for kind, n in DBLP_NODES.items():
            for i in range(n):
                fh.write(f"{kind[0]}{i}\t{kind}\n")
    lines = []
    # every paper has a first author; the first extra papers get a second one
    extra = DBLP_EDGES["author-paper"] - npap
    for i in range(npap):
        lines.append(f"a{i % na}\tp{i}\tauthor-paper")
        if i < extra:
            lines.append(f"a{(i + 1) % na}\tp{i}\tauthor-paper")
    six = DBLP_EDGES["paper-term"] - 5 * npap
    for i in range(npap):
        for j in range(6 if i < six else 5):
            lines.append(f"p{i}\tt{(i + j * 1291) % nt}\tpaper-term")
    for i in range(npap):
        lines.append(f"p{i}\tv{i % nv}\tpaper-venue")
    (root / "edges.tsv").write_text("\n".join(lines) + "\n")
    schema = {
        "slots": [{"id": 0, "type": "author"}, {"id": 1, "type": "paper"}, {"id": 2, "type": "venue"}],
        "edges": [{"a": 0, "b": 1, "type": "author-paper"}, {"a": 1, "b": 2, "type": "paper-venue"}],
        "target": 0,
        "edge_endpoints": {"paper-term": ["paper", "term"]},
    }
    (root / "schema.json").write_text(json.dumps(schema))
    with open(root / "labels.tsv", "w") as fh:
        for i in range(na):
            fh.write(f"a{i}\t{i % 4}\n")
    order = np.random.default_rng(0).permutation(na)
    split = {"train": [f"a{i}" for i in order[:800]], "val": [f"a{i}" for i in order[800:1200]],
             "test": [f"a{i}" for i in order[1200:]]}
    (root / "split.json").write_text(json.dumps(split))
    return root
