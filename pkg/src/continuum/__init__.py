"""
continuum

Provenance-graph intrusion detection: temporal snapshots with edge compression,
a spatial-temporal graph autoencoder, k-NN anomaly scoring, and federated
training with secret-shared aggregation.
"""

from .config import RunConfig, load_config
from .exceptions import ContinuumError
from .provgraph import ProvenanceGraph, TypeVocabulary
from .snapshot import Snapshot

__version__ = "0.1.0"
__all__ = [
    "ContinuumError",
    "ProvenanceGraph",
    "RunConfig",
    "Snapshot",
    "TypeVocabulary",
    "load_config",
]
