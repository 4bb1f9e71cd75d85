"""Heterogeneous-graph representation learning over ontology subgraphs."""

from .encoder import EncoderConfig
from .graph import HeteroGraph, LabeledSplit, load_dataset, write_dataset
from .ontology import OntologySchema, enumerate_subgraphs, extract_all, perturb
from .synth import SynthSpec, synth_hin
from .training import TrainConfig, train

__version__ = "0.1.0"
