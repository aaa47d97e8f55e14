"""
Pytest fixtures for continuum tests.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from continuum.config import ModelConfig
from continuum.ingest import DatasetManifest, ingest, parse_streamspot
from continuum.provgraph import ProvenanceGraph, RawEvent, TypeVocabulary
from continuum.snapshot import Snapshot, compress, make_snapshots

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    """Fixture providing the test data directory."""
    return DATA_DIR


@pytest.fixture
def streamspot_file():
    """Two interleaved StreamSpot graphs: 0 (benign) and 300 (attack)."""
    return DATA_DIR / "streamspot_sample.tsv"


@pytest.fixture
def canonical_file():
    """A canonical-format graph with explicit timestamps and a comment line."""
    return DATA_DIR / "canonical_sample.tsv"


@pytest.fixture
def streamspot_graphs(streamspot_file):
    """Parsed StreamSpot sample graphs keyed by graph id."""
    return {g.graph_id: g for g in parse_streamspot(streamspot_file)}


@pytest.fixture
def streamspot_result(streamspot_file):
    """IngestResult for the StreamSpot sample with derived labels."""
    return ingest(DatasetManifest("streamspot", [streamspot_file]))


def make_graph(events, node_types, d_node=None, d_edge=None, graph_id="g"):
    """Build a graph from (src, dst, edge_type, ts) tuples and per-node type indices."""
    node_vocab = TypeVocabulary("node", [f"n{i}" for i in range(d_node or max(node_types) + 1)])
    edge_count = d_edge or (max(e[2] for e in events) + 1 if events else 1)
    edge_vocab = TypeVocabulary("edge", [f"e{i}" for i in range(edge_count)])
    return ProvenanceGraph(
        graph_id=graph_id,
        node_vocab=node_vocab,
        edge_vocab=edge_vocab,
        nodes=list(enumerate(node_types)),
        edges=[RawEvent(*e) for e in events],
        node_names=[str(i) for i in range(len(node_types))],
    )


def random_snapshots(rng, n_nodes=4, n_snapshots=2, d_node=3, d_edge=2, n_events=6):
    """Random compressed snapshots sharing one node set."""
    node_types = rng.integers(0, d_node, size=n_nodes).tolist()
    events = [
        (
            int(rng.integers(n_nodes)),
            int(rng.integers(n_nodes)),
            int(rng.integers(d_edge)),
            int(rng.integers(0, 10 * n_snapshots)),
        )
        for _ in range(n_events)
    ]
    graph = make_graph(events, node_types, d_node=d_node, d_edge=d_edge)
    return [compress(s) for s in make_snapshots(graph, n_snapshots)]


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_snapshots(rng) -> list[Snapshot]:
    """Four nodes, two snapshots, three node types, two edge types."""
    return random_snapshots(rng)


@pytest.fixture
def tiny_config():
    """Small model config without dropout, sized for ``tiny_snapshots``."""
    return ModelConfig(
        d_node=3, d_edge=2, d_hidden=4, n_gnn_layers=1, n_heads=2, dropout_p=0.0, epochs=2
    )


def dataset_path(env_var):
    """Path from an environment variable, or skip the test."""
    value = os.environ.get(env_var)
    if not value or not Path(value).exists():
        pytest.skip(f"set {env_var} to run full-dataset tests")
    return Path(value)
