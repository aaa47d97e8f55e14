"""
Tests for snapshot splitting, edge compression and snapshot persistence.
"""

from collections import Counter

import numpy as np
import pytest
from conftest import make_graph
from hypothesis import given, settings
from hypothesis import strategies as st

from continuum.exceptions import EmptyGraphError, ManifestError
from continuum.ingest import DatasetManifest, ingest, parse_canonical
from continuum.snapshot import (
    CompressedEdge,
    CompressionReport,
    compress,
    compression_report,
    decompress,
    load_snapshot,
    load_snapshot_dataset,
    make_snapshots,
    save_snapshot,
    save_snapshot_dataset,
    snapshot_dataset,
    snapshot_graph,
)
from continuum.snapshot_pb import decode_snapshot, encode_snapshot


def test_streamspot_graph_compression(streamspot_graphs):
    """Test per-snapshot edge counts for the sample graph with two snapshots."""
    raw = make_snapshots(streamspot_graphs["0"], 2)
    assert [s.num_edges for s in raw] == [3, 3]
    assert [(s.t_lo, s.t_hi) for s in raw] == [(0, 3), (3, 6)]

    compressed = [compress(s) for s in raw]
    assert [s.num_edges for s in compressed] == [2, 3]
    assert compressed[0].edges == [
        CompressedEdge(0, 1, (2, 0, 0)),
        CompressedEdge(0, 2, (0, 1, 0)),
    ]
    assert sum(s.num_events for s in compressed) == 6


def test_every_snapshot_carries_all_nodes(streamspot_graphs):
    """Test that nodes are replicated into every snapshot with one-hot features."""
    for s in snapshot_graph(streamspot_graphs["300"], 2):
        assert s.num_nodes == 3
        np.testing.assert_array_equal(s.node_features, np.eye(3))


def test_canonical_graph_with_empty_leading_snapshot(canonical_file):
    """Test that an interval with no events yields an empty snapshot."""
    g = parse_canonical(canonical_file)
    snapshots = snapshot_graph(g, 3)
    assert len(snapshots) == 3
    assert snapshots[0].num_edges == 0
    assert snapshots[0].num_nodes == 5
    assert [s.num_edges for s in snapshots] == [0, 2, 2]
    assert snapshots[2].edges == [
        CompressedEdge(2, 3, (0, 0, 2, 0)),
        CompressedEdge(2, 4, (0, 0, 0, 2)),
    ]


def test_single_snapshot_covers_all_events(canonical_file):
    """Test that n=1 places every event in one interval."""
    g = parse_canonical(canonical_file)
    (only,) = make_snapshots(g, 1)
    assert only.num_edges == 7
    assert only.t_lo == 0
    assert only.t_hi > g.max_timestamp


def test_make_snapshots_rejects_bad_input(streamspot_graphs):
    """Test that n < 1 and edgeless graphs are refused."""
    with pytest.raises(ValueError):
        make_snapshots(streamspot_graphs["0"], 0)
    with pytest.raises(EmptyGraphError):
        make_snapshots(make_graph([], [0, 1]), 2)


events_strategy = st.lists(
    st.tuples(
        st.integers(0, 5), st.integers(0, 5), st.integers(0, 3), st.integers(0, 500)
    ),
    min_size=1,
    max_size=60,
)


@settings(max_examples=50, deadline=None)
@given(events=events_strategy, n=st.integers(1, 7))
def test_compression_conserves_events(events, n):
    """Test that snapshots partition events and compression keeps every count."""
    g = make_graph(events, [0] * 6, d_node=1, d_edge=4)
    raw = make_snapshots(g, n)
    assert len(raw) == n
    assert sum(s.num_edges for s in raw) == len(events)

    compressed = [compress(s) for s in raw]
    merged: Counter = Counter()
    for s in compressed:
        pairs = list(zip(s.src.tolist(), s.dst.tolist(), strict=True))
        assert len(pairs) == len(set(pairs))
        assert (s.counts.sum(axis=1) >= 1).all()
        merged.update(decompress(s))
    assert merged == Counter((src, dst, etype) for src, dst, etype, _ in events)


def test_compression_report(streamspot_result):
    """Test before/after totals and the reduction percentage."""
    ds = snapshot_dataset(streamspot_result, 2, serial=True)
    report = compression_report(ds.graphs)
    by_id = {r.graph_id: r for r in report.rows}
    assert (by_id["0"].before_edges, by_id["0"].after_edges) == (6, 5)
    assert (by_id["300"].before_edges, by_id["300"].after_edges) == (4, 3)
    assert report.total.before_edges == 10
    assert report.total.after_edges == 8
    assert report.total.reduction_pct == pytest.approx(20.0)


def test_compression_report_csv(tmp_path, streamspot_result):
    """Test that the CSV keeps per-graph rows and the stored TOTAL row."""
    ds = snapshot_dataset(streamspot_result, 2, serial=True)
    path = tmp_path / "compression.csv"
    compression_report(ds.graphs).write_csv(path)

    lines = path.read_text().splitlines()
    assert lines[0] == "graph_id,before_edges,after_edges,reduction_pct"
    assert lines[-1] == "TOTAL,10,8,20.00"

    loaded = CompressionReport.read_csv(path)
    assert [r.graph_id for r in loaded.rows] == ["0", "300"]
    assert loaded.stored_total is not None
    assert loaded.stored_total.after_edges == loaded.total_after


def test_snapshot_dataset_parallel_matches_serial(streamspot_result):
    """Test that parallel snapshotting gives the same snapshots as serial."""
    serial = snapshot_dataset(streamspot_result, 2, serial=True)
    parallel = snapshot_dataset(streamspot_result, 2, jobs=4)
    assert list(parallel.graphs) == list(serial.graphs)
    for gid in serial.graphs:
        assert [s.edges for s in parallel.graphs[gid]] == [s.edges for s in serial.graphs[gid]]
    assert parallel.labels == {"0": "benign", "300": "attack"}


@pytest.mark.parametrize("suffix", [".json", ".pb"])
def test_snapshot_file_roundtrip(tmp_path, canonical_file, suffix):
    """Test that snapshots, including empty ones, survive both encodings."""
    g = parse_canonical(canonical_file)
    for s in snapshot_graph(g, 3):
        path = tmp_path / f"snapshot_{s.index}{suffix}"
        save_snapshot(s, path)
        loaded = load_snapshot(path, s.d_node, s.d_edge)
        assert loaded.index == s.index
        assert (loaded.t_lo, loaded.t_hi) == (s.t_lo, s.t_hi)
        assert loaded.edges == s.edges
        assert loaded.counts.shape == (s.num_edges, s.d_edge)
        np.testing.assert_array_equal(loaded.node_types, s.node_types)


def test_protobuf_is_smaller_than_json(tmp_path, canonical_file):
    """Test that the binary encoding is more compact than JSON."""
    s = snapshot_graph(parse_canonical(canonical_file), 2)[1]
    save_snapshot(s, tmp_path / "s.json")
    assert len(encode_snapshot(s)) < (tmp_path / "s.json").stat().st_size


def test_decode_snapshot_rejects_garbage():
    """Test that invalid protobuf bytes raise ManifestError."""
    with pytest.raises(ManifestError):
        decode_snapshot(b"\xff\xff\xff", 3, 3)


@pytest.mark.parametrize("binary", [False, True])
def test_snapshot_dataset_roundtrip(tmp_path, canonical_file, binary):
    """Test that a snapshot dataset loads back with labels and malicious nodes."""
    result = ingest(
        DatasetManifest(
            "canonical", [canonical_file], node_labels={"canonical_sample": ["nginx"]}
        )
    )
    ds = snapshot_dataset(result, 3)
    out = save_snapshot_dataset(ds, tmp_path / "snaps", binary=binary)
    loaded = load_snapshot_dataset(out)
    assert list(loaded.graphs) == ["canonical_sample"]
    assert loaded.labels == {"canonical_sample": "attack"}
    assert loaded.malicious_nodes == {"canonical_sample": {2}}
    assert loaded.node_level
    assert [s.edges for s in loaded.graphs["canonical_sample"]] == [
        s.edges for s in ds.graphs["canonical_sample"]
    ]
    graph_dir = out / "canonical_sample"
    assert (graph_dir / "snapshot_0.json").exists()
    assert (graph_dir / "snapshot_0.pb").exists() == binary


def test_load_snapshot_dataset_requires_vocabularies(tmp_path):
    """Test that a directory without vocabularies is rejected."""
    with pytest.raises(ManifestError):
        load_snapshot_dataset(tmp_path)


def test_timestamps_near_u64_max():
    """Test interval bounds and slots when the last event sits at 2**64 - 1."""
    g = make_graph([(0, 1, 0, 5), (1, 0, 0, 2**64 - 1)], [0, 0], d_node=1, d_edge=1)
    raw = make_snapshots(g, 2)
    assert [(s.t_lo, s.t_hi) for s in raw] == [(0, 2**63), (2**63, 2**64)]
    assert [s.edges for s in raw] == [
        [CompressedEdge(0, 1, (1,))],
        [CompressedEdge(1, 0, (1,))],
    ]


@pytest.mark.parametrize("suffix", [".json", ".pb"])
def test_snapshot_file_keeps_u64_bounds(tmp_path, suffix):
    """Test that an interval ending at 2**64 survives both encodings."""
    g = make_graph([(0, 1, 0, 2**64 - 1)], [0, 0], d_node=1, d_edge=1)
    last = compress(make_snapshots(g, 2)[1])
    path = tmp_path / f"snapshot_1{suffix}"
    save_snapshot(last, path)
    loaded = load_snapshot(path, 1, 1)
    assert (loaded.t_lo, loaded.t_hi) == (2**63, 2**64)


@pytest.mark.parametrize(
    "content",
    [b"{not json", b"\xff\xfe", b"[1, 2]", b'{"index": 0}'],
)
def test_load_snapshot_rejects_non_snapshots(tmp_path, content):
    """Test that unreadable snapshot JSON raises ManifestError naming the file."""
    path = tmp_path / "snapshot_0.json"
    path.write_bytes(content)
    with pytest.raises(ManifestError, match="snapshot_0.json"):
        load_snapshot(path, 3, 3)


def test_load_snapshot_dataset_reads_protobuf_only(tmp_path, canonical_file):
    """Test that a directory holding only .pb snapshots still loads."""
    ds = snapshot_dataset(ingest(DatasetManifest("canonical", [canonical_file])), 3)
    out = save_snapshot_dataset(ds, tmp_path / "snaps", binary=True)
    for p in (out / "canonical_sample").glob("*.json"):
        p.unlink()
    loaded = load_snapshot_dataset(out)
    assert [s.edges for s in loaded.graphs["canonical_sample"]] == [
        s.edges for s in ds.graphs["canonical_sample"]
    ]


def test_compression_table_rejects_bad_counts(tmp_path):
    """Test that a non-integer count in the compression CSV raises ManifestError."""
    path = tmp_path / "compression.csv"
    path.write_text("graph_id,before_edges,after_edges,reduction_pct\n0,ten,5,50.00\n")
    with pytest.raises(ManifestError, match="compression.csv"):
        CompressionReport.read_csv(path)
