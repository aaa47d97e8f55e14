"""
Tests for the provenance graph model and type vocabularies.
"""

import threading

import pytest
from conftest import make_graph
from hypothesis import given
from hypothesis import strategies as st

from continuum.exceptions import ManifestError
from continuum.provgraph import (
    RawEvent,
    TypeVocabulary,
    intern_type,
    load_graph,
    save_graph,
    validate_graph,
)


def test_intern_assigns_first_seen_order():
    """Test that types get dense indices in first-seen order."""
    vocab = TypeVocabulary("node")
    assert intern_type(vocab, "process") == 0
    assert intern_type(vocab, "file") == 1
    assert intern_type(vocab, "process") == 0
    assert vocab.names == ["process", "file"]
    assert len(vocab) == 2


def test_intern_rejects_empty_name():
    """Test that empty type names are refused."""
    with pytest.raises(ValueError):
        TypeVocabulary("edge").intern("")


def test_frozen_vocabulary_rejects_new_types():
    """Test that a frozen vocabulary still resolves known names but not new ones."""
    vocab = TypeVocabulary("edge")
    vocab.intern("read")
    vocab.freeze()
    assert vocab.intern("read") == 0
    with pytest.raises(ValueError, match="frozen"):
        vocab.intern("write")


@given(st.lists(st.text(min_size=1, max_size=8), max_size=40))
def test_vocabulary_is_a_bijection(names):
    """Test that interning any name sequence yields a bijection onto 0..len-1."""
    vocab = TypeVocabulary("node")
    indices = [vocab.intern(n) for n in names]
    assert sorted(set(indices)) == list(range(len(vocab)))
    for name, index in zip(names, indices, strict=True):
        assert vocab.names[index] == name


def test_concurrent_interning_keeps_indices_dense():
    """Test that many threads interning overlapping names agree on one mapping."""
    vocab = TypeVocabulary("node")
    names = [f"t{i % 17}" for i in range(200)]
    results: list[list[int]] = []

    def worker():
        results.append([vocab.intern(n) for n in names])

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert len(vocab) == 17
    assert all(r == results[0] for r in results)
    assert sorted(vocab.index.values()) == list(range(17))


def test_vocabulary_save_load(tmp_path):
    """Test that a saved vocabulary loads back frozen with the same order."""
    vocab = TypeVocabulary("edge")
    for name in ["read", "write", "send"]:
        vocab.intern(name)
    vocab.save(tmp_path / "edges.txt")
    loaded = TypeVocabulary.load(tmp_path / "edges.txt", "edge")
    assert loaded.names == ["read", "write", "send"]
    assert loaded.frozen


def test_vocabulary_load_rejects_binary(tmp_path):
    """Test that a non-UTF-8 vocabulary file raises ManifestError."""
    path = tmp_path / "edges.txt"
    path.write_bytes(b"read\n\xff\n")
    with pytest.raises(ManifestError, match="UTF-8"):
        TypeVocabulary.load(path, "edge")


def test_validate_graph_accepts_well_formed_graph():
    """Test that a consistent graph has no violations."""
    g = make_graph([(0, 1, 0, 0), (1, 2, 1, 5)], [0, 1, 0])
    assert validate_graph(g) == []


def test_validate_graph_reports_violations():
    """Test that duplicates, dangling endpoints and bad timestamps are reported."""
    g = make_graph([(0, 1, 0, 0)], [0, 1])
    g.nodes.append((1, 0))
    g.edges.append(RawEvent(0, 7, 0, 3))
    g.edges.append(RawEvent(9, 0, 0, -1))
    violations = validate_graph(g)
    assert "duplicate node 1" in violations
    assert "dangling dst 7" in violations
    assert "dangling src 9" in violations
    assert any("negative timestamp" in v for v in violations)


def test_graph_properties():
    """Test node, edge and timestamp accessors."""
    g = make_graph([(0, 1, 0, 4), (1, 0, 1, 9)], [1, 0])
    assert g.num_nodes == 2
    assert g.num_edges == 2
    assert g.node_types == [1, 0]
    assert g.max_timestamp == 9


def test_graph_save_load(tmp_path):
    """Test that graphs survive a JSON write and read."""
    g = make_graph([(0, 1, 0, 4), (1, 2, 1, 9)], [0, 1, 0])
    g.malicious_nodes.add(2)
    save_graph(g, tmp_path / "g.json")
    loaded = load_graph(tmp_path / "g.json", g.node_vocab, g.edge_vocab)
    assert loaded.nodes == g.nodes
    assert loaded.edges == g.edges
    assert loaded.node_names == g.node_names
    assert loaded.malicious_nodes == {2}


@pytest.mark.parametrize("content", [b"{", b"[]", b'{"graph_id": "g"}', b"\xff"])
def test_load_graph_rejects_non_graphs(tmp_path, content):
    """Test that unreadable graph files raise ManifestError naming the file."""
    g = make_graph([(0, 1, 0, 4)], [0, 1])
    path = tmp_path / "g.json"
    path.write_bytes(content)
    with pytest.raises(ManifestError, match="g.json"):
        load_graph(path, g.node_vocab, g.edge_vocab)
