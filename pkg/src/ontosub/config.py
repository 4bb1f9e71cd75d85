"""Run configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .encoder import EncoderConfig
from .graph import LINK_PREDICTION, NODE_CLASSIFICATION
from .synth import SynthSpec
from .training import TrainConfig

# keys that do not change any computed number
NON_SEMANTIC_KEYS = {"out", "threads", "runs", "record_time"}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    data: Optional[str] = Field(None, description="dataset directory (nodes.tsv, edges.tsv, schema.json, ...)")
    synth: Optional[dict] = Field(None, description="synthetic dataset spec used when no data directory is given")
    schema_path: Optional[str] = Field(None, alias="schema", description="schema.json overriding the dataset's own")
    out: str = Field("run", description="output directory for checkpoint and reports")
    task: Literal["node-classification", "link-prediction"] = Field(NODE_CLASSIFICATION, description="downstream task")
    gamma: float = Field(0.5, ge=0.0, le=1.0, description="weight of the node-level loss against the graph-level loss")
    lr: float = Field(1e-3, gt=0.0, description="Adam learning rate")
    epochs: int = Field(300, ge=1, description="maximum training epochs")
    batch_size: int = Field(32, ge=1, description="anchor nodes per optimizer step")
    neg_ratio: float = Field(1.0, gt=0.0, description="perturbed negatives per positive subgraph")
    n_swap: int = Field(1, ge=1, description="slots substituted per negative")
    max_retries: int = Field(20, ge=1, description="attempts before a negative is skipped")
    cap: int = Field(64, ge=1, description="maximum ontology subgraphs kept per node")
    patience: int = Field(30, ge=1, description="early-stopping patience in epochs")
    seed: int = Field(0, ge=0, description="random seed")
    threads: int = Field(1, ge=1, description="worker threads for enumeration and perturbation")
    d: int = Field(64, ge=1, description="hidden width")
    heads: int = Field(4, ge=1, description="attention heads")
    layers: int = Field(2, ge=0, description="transformer layers")
    pe_dim: int = Field(4, ge=0, description="Laplacian positional-encoding dimension")
    clamp: tuple[float, float] = Field((-5.0, 5.0), description="attention logit clamp interval")
    edge_bias: bool = Field(True, description="add a learned edge-embedding bias to attention logits")
    embed_dim: int = Field(16, ge=1, description="learned input width when the dataset has no features")
    lp_edge_type: Optional[str] = Field(None, description="edge type held out for link prediction without split.json")
    lp_scorer: Literal["dot", "logreg"] = Field("dot", description="edge scorer: sigmoid of the dot product, or "
                                                "logistic regression on h_u * h_v fit on training edges")
    lp_split: tuple[float, float, float] = Field((0.85, 0.05, 0.10), description="train/val/test fractions of held-out edges")
    runs: int = Field(1, ge=1, description="repeated seeds in eval")
    record_time: bool = Field(False, description="write wall-clock seconds into report.csv")

    @field_validator("synth")
    @classmethod
    def _check_synth(cls, v):
        if v is not None:
            unknown = set(v) - set(SynthSpec.__dataclass_fields__)
            if unknown:
                raise ValueError(f"unknown synth keys {sorted(unknown)}")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.clamp[0] >= self.clamp[1]:
            raise ValueError("clamp interval is empty")
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.d, self.heads, self.layers, self.pe_dim, tuple(self.clamp), self.edge_bias,
                             self.embed_dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.task, self.gamma, self.lr, self.epochs, self.batch_size, self.neg_ratio, self.n_swap,
                           self.max_retries, self.cap, self.patience, self.seed, self.threads, self.encoder_config())

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**{"task": self.task, "seed": self.seed, **(self.synth or {})})

    def hash(self) -> str:
        doc = self.model_dump(by_alias=True, exclude=NON_SEMANTIC_KEYS)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), indent=2, sort_keys=True) + "\n"


def load_config(path: str | Path | None, overrides: dict) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(doc)


def config_keys() -> list[tuple[str, object]]:
    """``(key, FieldInfo)`` for every config key, using the JSON key names."""
    return [(f.alias or name, f) for name, f in RunConfig.model_fields.items()]
