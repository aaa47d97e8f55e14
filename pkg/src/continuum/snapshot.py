"""Split graphs into time-interval snapshots, one-hot encode and compress edges."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from collections.abc import Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from numpy.typing import NDArray

from .exceptions import EmptyGraphError, ManifestError
from .ingest import (
    EDGE_TYPES_FILE,
    LABELS_FILE,
    NODE_TYPES_FILE,
    IngestResult,
    Label,
    load_labels,
    write_labels,
)
from .provgraph import ProvenanceGraph, TypeVocabulary

logger = logging.getLogger(__name__)

SNAPSHOT_GLOB = "snapshot_*"
MALICIOUS_FILE = "malicious_nodes.json"

IntArray = NDArray[np.int64]


class CompressedEdge(NamedTuple):
    """All same-interval events from ``src`` to ``dst``, summed per edge type."""

    src: int
    dst: int
    counts: tuple[int, ...]


@dataclass
class Snapshot:
    """One time interval ``[t_lo, t_hi)`` of a graph.

    Every node of the parent graph is present. Edges are stored column-wise:
    ``src[k] -> dst[k]`` with type-count vector ``counts[k]``. Before
    ``compress`` each row is one event's one-hot vector; afterwards
    ``(src, dst)`` pairs are unique and rows are summed.
    """

    index: int
    t_lo: int
    t_hi: int
    node_types: IntArray
    d_node: int
    d_edge: int
    src: IntArray
    dst: IntArray
    counts: IntArray
    compressed: bool = False

    @property
    def num_nodes(self) -> int:
        return int(self.node_types.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def num_events(self) -> int:
        return int(self.counts.sum())

    @property
    def node_features(self) -> NDArray[np.float64]:
        """|V| x d_node one-hot matrix, row i set at node i's type."""
        features = np.zeros((self.num_nodes, self.d_node), dtype=np.float64)
        features[np.arange(self.num_nodes), self.node_types] = 1.0
        return features

    @property
    def edges(self) -> list[CompressedEdge]:
        return list(self.iter_edges())

    def iter_edges(self) -> Iterator[CompressedEdge]:
        for s, d, row in zip(self.src, self.dst, self.counts, strict=True):
            yield CompressedEdge(int(s), int(d), tuple(int(c) for c in row))

    def __str__(self) -> str:
        return (
            f"Snapshot(index={self.index}, [{self.t_lo}, {self.t_hi}), "
            f"nodes={self.num_nodes}, edges={self.num_edges})"
        )


def make_snapshots(g: ProvenanceGraph, n: int) -> list[Snapshot]:
    """Split a graph into ``n`` consecutive half-open time intervals.

    The interval length is ``ceil((max_ts + 1) / n)`` so the last event always
    falls inside the last snapshot. All nodes are replicated into every snapshot;
    edges stay raw, one one-hot row per event.

    Args:
        g: Graph with at least one edge.
        n: Number of snapshots, at least 1.

    Returns:
        list[Snapshot]: Exactly ``n`` snapshots in time order.

    Raises:
        EmptyGraphError: If the graph has no edges.
        ValueError: If ``n < 1``.
    """
    if n < 1:
        raise ValueError(f"number of snapshots must be >= 1, got {n}")
    if not g.edges:
        raise EmptyGraphError(f"Graph {g.graph_id!r} has no edges to snapshot")

    events = np.asarray([e[:3] for e in g.edges], dtype=np.int64)
    src, dst, etype = events[:, 0], events[:, 1], events[:, 2]
    # timestamps are u64 and may not fit int64, so bounds stay Python ints
    width = (g.max_timestamp + n) // n
    slot = np.fromiter(
        (e.timestamp // width for e in g.edges), dtype=np.int64, count=g.num_edges
    )
    node_types = np.asarray(g.node_types, dtype=np.int64)
    d_node, d_edge = len(g.node_vocab), len(g.edge_vocab)

    snapshots = []
    for i in range(n):
        mask = slot == i
        onehot = np.zeros((int(mask.sum()), d_edge), dtype=np.int64)
        onehot[np.arange(onehot.shape[0]), etype[mask]] = 1
        snapshots.append(
            Snapshot(
                index=i,
                t_lo=i * width,
                t_hi=(i + 1) * width,
                node_types=node_types,
                d_node=d_node,
                d_edge=d_edge,
                src=src[mask].copy(),
                dst=dst[mask].copy(),
                counts=onehot,
            )
        )
    return snapshots


def compress(s: Snapshot) -> Snapshot:
    """Merge parallel edges of a snapshot.

    Each distinct ``(src, dst)`` pair becomes one edge whose counts are the
    element-wise sum of its events' vectors. Output edges are ordered by
    ``(src, dst)``.
    """
    if s.num_edges == 0:
        return Snapshot(**{**s.__dict__, "compressed": True})
    keys = s.src * max(s.num_nodes, 1) + s.dst
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    counts = np.zeros((unique_keys.shape[0], s.d_edge), dtype=np.int64)
    np.add.at(counts, inverse.reshape(-1), s.counts)
    return Snapshot(
        index=s.index,
        t_lo=s.t_lo,
        t_hi=s.t_hi,
        node_types=s.node_types,
        d_node=s.d_node,
        d_edge=s.d_edge,
        src=unique_keys // max(s.num_nodes, 1),
        dst=unique_keys % max(s.num_nodes, 1),
        counts=counts,
        compressed=True,
    )


def decompress(s: Snapshot) -> Counter[tuple[int, int, int]]:
    """Count events per ``(src, dst, edge_type)`` triple."""
    triples: Counter[tuple[int, int, int]] = Counter()
    for edge in s.iter_edges():
        for edge_type, count in enumerate(edge.counts):
            if count:
                triples[(edge.src, edge.dst, edge_type)] += count
    return triples


def snapshot_graph(g: ProvenanceGraph, n: int) -> list[Snapshot]:
    """Snapshot and compress one graph."""
    return [compress(s) for s in make_snapshots(g, n)]


@dataclass
class CompressionRow:
    graph_id: str
    before_edges: int
    after_edges: int

    @property
    def reduction_pct(self) -> float:
        if self.before_edges == 0:
            return 0.0
        return 100.0 * (self.before_edges - self.after_edges) / self.before_edges


@dataclass
class CompressionReport:
    """Edges per graph before and after compression, with dataset totals."""

    rows: list[CompressionRow]
    # TOTAL row as read back from a CSV, for cross-checking
    stored_total: CompressionRow | None = None

    @property
    def total_before(self) -> int:
        return sum(r.before_edges for r in self.rows)

    @property
    def total_after(self) -> int:
        return sum(r.after_edges for r in self.rows)

    @property
    def total(self) -> CompressionRow:
        return CompressionRow("TOTAL", self.total_before, self.total_after)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["graph_id", "before_edges", "after_edges", "reduction_pct"])
            for row in [*self.rows, self.total]:
                writer.writerow(
                    [row.graph_id, row.before_edges, row.after_edges, f"{row.reduction_pct:.2f}"]
                )

    @classmethod
    def read_csv(cls, path: str | Path) -> CompressionReport:
        """Read a table written by ``write_csv``.

        Raises:
            ManifestError: If a row lacks a column or holds a non-integer count.
        """
        try:
            with open(path, encoding="utf-8", newline="") as f:
                rows = [
                    CompressionRow(
                        r["graph_id"], int(r["before_edges"]), int(r["after_edges"])
                    )
                    for r in csv.DictReader(f)
                ]
        except (ValueError, KeyError, TypeError) as e:
            raise ManifestError(f"{path}: not a compression table ({e!r})")
        totals = [r for r in rows if r.graph_id == "TOTAL"]
        return cls(
            [r for r in rows if r.graph_id != "TOTAL"], totals[-1] if totals else None
        )


def compression_report(dataset: Mapping[str, list[Snapshot]]) -> CompressionReport:
    """Count edges before (events) and after (distinct pairs) per graph.

    Args:
        dataset: Compressed snapshots keyed by graph id.
    """
    rows = []
    for graph_id, snapshots in dataset.items():
        before = sum(s.num_events for s in snapshots)
        after = sum(
            s.num_edges if s.compressed else compress(s).num_edges for s in snapshots
        )
        rows.append(CompressionRow(graph_id, before, after))
    return CompressionReport(rows)


@dataclass
class SnapshotDataset:
    """Compressed snapshots of every graph of a dataset."""

    graphs: dict[str, list[Snapshot]]
    node_vocab: TypeVocabulary
    edge_vocab: TypeVocabulary
    labels: dict[str, Label] = field(default_factory=dict)
    malicious_nodes: dict[str, set[int]] = field(default_factory=dict)

    @property
    def d_node(self) -> int:
        return len(self.node_vocab)

    @property
    def d_edge(self) -> int:
        return len(self.edge_vocab)

    @property
    def node_level(self) -> bool:
        return any(self.malicious_nodes.values())

    def subset(self, graph_ids: list[str]) -> SnapshotDataset:
        return SnapshotDataset(
            graphs={gid: self.graphs[gid] for gid in graph_ids},
            node_vocab=self.node_vocab,
            edge_vocab=self.edge_vocab,
            labels={gid: self.labels[gid] for gid in graph_ids if gid in self.labels},
            malicious_nodes={
                gid: self.malicious_nodes[gid]
                for gid in graph_ids
                if gid in self.malicious_nodes
            },
        )


def snapshot_dataset(
    result: IngestResult, n: int, jobs: int = 1, serial: bool = False
) -> SnapshotDataset:
    """Snapshot and compress every graph; graphs are independent so may run in parallel."""
    graphs = [g for g in result.graphs if g.edges]
    skipped = len(result.graphs) - len(graphs)
    if skipped:
        logger.warning("Skipping %d graph(s) with no edges", skipped)

    if serial or jobs <= 1:
        per_graph = [snapshot_graph(g, n) for g in graphs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_graph = list(pool.map(lambda g: snapshot_graph(g, n), graphs))

    logger.info("Built %d snapshot(s) for %d graph(s)", n * len(graphs), len(graphs))
    return SnapshotDataset(
        graphs={g.graph_id: snaps for g, snaps in zip(graphs, per_graph, strict=True)},
        node_vocab=result.node_vocab,
        edge_vocab=result.edge_vocab,
        labels={g.graph_id: result.labels[g.graph_id] for g in graphs if g.graph_id in result.labels},
        malicious_nodes={g.graph_id: set(g.malicious_nodes) for g in graphs if g.malicious_nodes},
    )


def snapshot_to_dict(s: Snapshot) -> dict[str, Any]:
    return {
        "index": s.index,
        "t_lo": s.t_lo,
        "t_hi": s.t_hi,
        "num_nodes": s.num_nodes,
        "node_type": s.node_types.tolist(),
        "edges": [[e.src, e.dst, list(e.counts)] for e in s.iter_edges()],
    }


def snapshot_from_dict(data: dict[str, Any], d_node: int, d_edge: int) -> Snapshot:
    edges = data["edges"]
    counts = np.asarray([e[2] for e in edges], dtype=np.int64).reshape(len(edges), d_edge)
    src = np.asarray([e[0] for e in edges], dtype=np.int64)
    dst = np.asarray([e[1] for e in edges], dtype=np.int64)
    return Snapshot(
        index=int(data["index"]),
        t_lo=int(data["t_lo"]),
        t_hi=int(data["t_hi"]),
        node_types=np.asarray(data["node_type"], dtype=np.int64),
        d_node=d_node,
        d_edge=d_edge,
        src=src,
        dst=dst,
        counts=counts,
        compressed=len(set(zip(src.tolist(), dst.tolist(), strict=True))) == len(edges),
    )


def save_snapshot(s: Snapshot, path: str | Path) -> None:
    """Write a snapshot; ``.pb`` paths use the protobuf encoding, others JSON."""
    path = Path(path)
    if path.suffix == ".pb":
        from .snapshot_pb import encode_snapshot

        path.write_bytes(encode_snapshot(s))
        return
    with open(path, "w", encoding="utf-8") as f:
        json.dump(snapshot_to_dict(s), f, separators=(",", ":"))


def load_snapshot(path: str | Path, d_node: int, d_edge: int) -> Snapshot:
    """Read a snapshot written by ``save_snapshot`` (JSON or ``.pb``).

    Raises:
        ManifestError: If the file is not a snapshot document.
    """
    path = Path(path)
    if path.suffix == ".pb":
        from .snapshot_pb import decode_snapshot

        return decode_snapshot(path.read_bytes(), d_node, d_edge)
    try:
        with open(path, encoding="utf-8") as f:
            return snapshot_from_dict(json.load(f), d_node, d_edge)
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise ManifestError(f"{path}: not a snapshot document ({e!r})")


def save_snapshot_dataset(
    ds: SnapshotDataset, out_dir: str | Path, binary: bool = False
) -> Path:
    """Write one JSON file per snapshot under ``out_dir/<graph_id>/``.

    With ``binary`` a protobuf copy is written next to each JSON file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffixes = (".json", ".pb") if binary else (".json",)
    for graph_id, snapshots in ds.graphs.items():
        graph_dir = out / graph_id
        graph_dir.mkdir(exist_ok=True)
        for s in snapshots:
            for suffix in suffixes:
                save_snapshot(s, graph_dir / f"snapshot_{s.index}{suffix}")
        if ds.malicious_nodes.get(graph_id):
            with open(graph_dir / MALICIOUS_FILE, "w", encoding="utf-8") as f:
                json.dump(sorted(ds.malicious_nodes[graph_id]), f)
    ds.node_vocab.save(out / NODE_TYPES_FILE)
    ds.edge_vocab.save(out / EDGE_TYPES_FILE)
    write_labels(ds.labels, out / LABELS_FILE)
    return out


def load_snapshot_dataset(in_dir: str | Path) -> SnapshotDataset:
    """Read a directory written by ``save_snapshot_dataset``.

    JSON snapshots are read when present; a directory holding only ``.pb``
    files is read from those.
    """
    base = Path(in_dir)
    if not (base / NODE_TYPES_FILE).exists():
        raise ManifestError(f"{base} does not contain snapshot vocabularies")
    node_vocab = TypeVocabulary.load(base / NODE_TYPES_FILE, "node")
    edge_vocab = TypeVocabulary.load(base / EDGE_TYPES_FILE, "edge")
    d_node, d_edge = len(node_vocab), len(edge_vocab)

    graphs: dict[str, list[Snapshot]] = {}
    malicious: dict[str, set[int]] = {}
    graph_dirs = sorted(
        (p for p in base.iterdir() if p.is_dir()),
        key=lambda p: (0, int(p.name), "") if p.name.isdigit() else (1, 0, p.name),
    )
    for graph_dir in graph_dirs:
        files = _snapshot_files(graph_dir)
        if not files:
            continue
        graphs[graph_dir.name] = [load_snapshot(p, d_node, d_edge) for p in files]
        if (graph_dir / MALICIOUS_FILE).exists():
            malicious[graph_dir.name] = _load_malicious(graph_dir / MALICIOUS_FILE)

    labels = load_labels(base / LABELS_FILE) if (base / LABELS_FILE).exists() else {}
    return SnapshotDataset(graphs, node_vocab, edge_vocab, labels, malicious)


def _snapshot_files(graph_dir: Path) -> list[Path]:
    by_suffix: dict[str, list[Path]] = {}
    for p in graph_dir.glob(SNAPSHOT_GLOB):
        by_suffix.setdefault(p.suffix, []).append(p)
    files = by_suffix.get(".json") or by_suffix.get(".pb") or []
    try:
        return sorted(files, key=lambda p: int(p.stem.split("_")[1]))
    except (IndexError, ValueError):
        raise ManifestError(f"{graph_dir}: snapshot file names must be snapshot_<index>")


def _load_malicious(path: Path) -> set[int]:
    try:
        with open(path, encoding="utf-8") as f:
            return {int(n) for n in json.load(f)}
    except (ValueError, TypeError) as e:
        raise ManifestError(f"{path}: expected a JSON list of node ids ({e})")
