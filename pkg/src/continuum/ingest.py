"""Parse provenance log files into ProvenanceGraph values.

Two formats are supported, both TAB-delimited:

* StreamSpot edge lists: ``src_id src_type dst_id dst_type edge_type graph_id``,
  many graphs per file, no timestamps (line ordinals stand in).
* Canonical TSV: a ``#continuum-v1`` header followed by
  ``src_id src_type dst_id dst_type edge_type timestamp`` lines, one graph per file.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from .exceptions import (
    BadTimestampError,
    MalformedLineError,
    ManifestError,
    TypeConflictError,
)
from .provgraph import (
    ProvenanceGraph,
    RawEvent,
    TypeVocabulary,
    load_graph,
    save_graph,
)

logger = logging.getLogger(__name__)

Label = Literal["benign", "attack"]
DatasetFormat = Literal["streamspot", "canonical"]

CANONICAL_HEADER = "#continuum-v1"
DELIMITER = "\t"
STREAMSPOT_FIELDS = 6
CANONICAL_FIELDS = 6

# StreamSpot graph ids come in blocks of 100 per scenario
STREAMSPOT_SCENARIOS = ("youtube", "gmail", "vgame", "attack", "download", "cnn")

_DECIMAL = re.compile(r"[0-9]+")
U64_MAX = 2**64 - 1

NODE_TYPES_FILE = "node_types.txt"
EDGE_TYPES_FILE = "edge_types.txt"
LABELS_FILE = "labels.json"
GRAPHS_DIR = "graphs"


class _GraphBuilder:
    """Accumulates nodes and events for one graph."""

    def __init__(
        self,
        graph_id: str,
        node_vocab: TypeVocabulary,
        edge_vocab: TypeVocabulary,
        path: str | None = None,
    ):
        self.graph = ProvenanceGraph(
            graph_id=graph_id, node_vocab=node_vocab, edge_vocab=edge_vocab
        )
        self.path = path
        self._ids: dict[str, int] = {}
        self._type_names: dict[str, str] = {}

    def _node(self, name: str, type_name: str) -> int:
        known = self._ids.get(name)
        if known is not None:
            if self._type_names[name] != type_name:
                raise TypeConflictError(name, self._type_names[name], type_name)
            return known
        node_id = len(self.graph.nodes)
        self._ids[name] = node_id
        self._type_names[name] = type_name
        self.graph.nodes.append((node_id, self.graph.node_vocab.intern(type_name)))
        self.graph.node_names.append(name)
        return node_id

    def add(
        self,
        src: str,
        src_type: str,
        dst: str,
        dst_type: str,
        edge_type: str,
        timestamp: int,
    ) -> None:
        src_id = self._node(src, src_type)
        dst_id = self._node(dst, dst_type)
        self.graph.edges.append(
            RawEvent(src_id, dst_id, self.graph.edge_vocab.intern(edge_type), timestamp)
        )

    def mark_malicious(self, names: Iterable[str]) -> None:
        for name in names:
            node_id = self._ids.get(name)
            if node_id is None:
                logger.warning(
                    "Graph %s: labeled node %r never appears in the log",
                    self.graph.graph_id,
                    name,
                )
                continue
            self.graph.malicious_nodes.add(node_id)


def _data_lines(path: str | Path) -> Iterator[tuple[int, list[str]]]:
    """Yield (1-based line number, fields) for non-blank lines.

    Raises:
        MalformedLineError: If a line is not valid UTF-8.
    """
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, 1):
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError:
                raise MalformedLineError(line_no, str(path), "not valid UTF-8")
            if not line.strip():
                continue
            yield line_no, line.split(DELIMITER)


def parse_streamspot(
    path: str | Path,
    node_vocab: TypeVocabulary | None = None,
    edge_vocab: TypeVocabulary | None = None,
) -> list[ProvenanceGraph]:
    """Parse a StreamSpot edge-list file.

    One graph is produced per distinct graph id, in first-seen order. StreamSpot
    carries no timestamps, so each event gets its 0-based ordinal within its graph.

    Args:
        path: File to parse.
        node_vocab: Shared node-type vocabulary (a fresh one if None).
        edge_vocab: Shared edge-type vocabulary (a fresh one if None).

    Returns:
        list[ProvenanceGraph]: Parsed graphs.

    Raises:
        MalformedLineError: If a line does not have 6 fields.
        TypeConflictError: If a node reappears with a different type.
    """
    node_vocab = node_vocab if node_vocab is not None else TypeVocabulary("node")
    edge_vocab = edge_vocab if edge_vocab is not None else TypeVocabulary("edge")
    builders: dict[str, _GraphBuilder] = {}

    for line_no, fields in _data_lines(path):
        if len(fields) != STREAMSPOT_FIELDS:
            raise MalformedLineError(
                line_no, str(path), f"expected {STREAMSPOT_FIELDS} fields, got {len(fields)}"
            )
        src, src_type, dst, dst_type, edge_type, graph_id = fields
        builder = builders.get(graph_id)
        if builder is None:
            builder = builders[graph_id] = _GraphBuilder(
                graph_id, node_vocab, edge_vocab, str(path)
            )
        builder.add(src, src_type, dst, dst_type, edge_type, builder.graph.num_edges)

    graphs = [b.graph for b in builders.values()]
    logger.info("Parsed %d StreamSpot graph(s) from %s", len(graphs), path)
    return graphs


def parse_canonical(
    path: str | Path,
    node_vocab: TypeVocabulary | None = None,
    edge_vocab: TypeVocabulary | None = None,
    graph_id: str | None = None,
    malicious_nodes: Iterable[str] = (),
) -> ProvenanceGraph:
    """Parse a canonical ``#continuum-v1`` TSV file into one graph.

    After the header, a line starting with ``#`` is a comment unless it has
    all six fields, in which case it is an event whose source id begins with
    ``#``.

    Args:
        path: File to parse.
        node_vocab: Shared node-type vocabulary (a fresh one if None).
        edge_vocab: Shared edge-type vocabulary (a fresh one if None).
        graph_id: Graph id; defaults to the file stem.
        malicious_nodes: Original node ids labeled malicious (node-level datasets).

    Returns:
        ProvenanceGraph: The parsed graph with explicit timestamps.

    Raises:
        MalformedLineError: On a missing header or wrong field count.
        TypeConflictError: If a node reappears with a different type.
        BadTimestampError: If a timestamp is not a non-negative decimal integer.
    """
    node_vocab = node_vocab if node_vocab is not None else TypeVocabulary("node")
    edge_vocab = edge_vocab if edge_vocab is not None else TypeVocabulary("edge")
    path = Path(path)
    builder = _GraphBuilder(graph_id or path.stem, node_vocab, edge_vocab, str(path))

    lines = _data_lines(path)
    first = next(lines, None)
    if first is None or DELIMITER.join(first[1]).strip() != CANONICAL_HEADER:
        raise MalformedLineError(
            first[0] if first else 1, str(path), f"missing {CANONICAL_HEADER} header"
        )

    for line_no, fields in lines:
        # a node id may itself start with "#", so only short lines are comments
        if fields[0].startswith("#") and len(fields) != CANONICAL_FIELDS:
            continue
        if len(fields) != CANONICAL_FIELDS:
            raise MalformedLineError(
                line_no, str(path), f"expected {CANONICAL_FIELDS} fields, got {len(fields)}"
            )
        src, src_type, dst, dst_type, edge_type, raw_ts = fields
        if not _DECIMAL.fullmatch(raw_ts) or int(raw_ts) > U64_MAX:
            raise BadTimestampError(line_no, raw_ts, str(path))
        builder.add(src, src_type, dst, dst_type, edge_type, int(raw_ts))

    builder.mark_malicious(malicious_nodes)
    logger.debug("Parsed %s", builder.graph)
    return builder.graph


def scenario_name(graph_id: str | int) -> str:
    """Return the StreamSpot scenario a graph id belongs to."""
    block = int(graph_id) // 100
    if not 0 <= block < len(STREAMSPOT_SCENARIOS):
        raise ManifestError(f"Graph id {graph_id} is outside the StreamSpot id range")
    return STREAMSPOT_SCENARIOS[block]


def streamspot_labels(graph_ids: Iterable[str]) -> dict[str, Label]:
    """Derive benign/attack labels from StreamSpot graph ids."""
    return {
        gid: ("attack" if scenario_name(gid) == "attack" else "benign")
        for gid in graph_ids
    }


def load_labels(path: str | Path) -> dict[str, Label]:
    """Load a ``{"graph_id": "benign"|"attack"}`` labels file.

    Raises:
        ManifestError: If the file is not a JSON object of valid labels.
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except ValueError as e:
        raise ManifestError(f"Labels file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ManifestError(f"Labels file {path} must contain a JSON object")
    labels: dict[str, Label] = {}
    for gid, value in raw.items():
        if value not in ("benign", "attack"):
            raise ManifestError(f"Labels file {path}: graph {gid!r} has label {value!r}")
        labels[str(gid)] = value
    return labels


def load_node_labels(path: str | Path) -> dict[str, list[str]]:
    """Load a ``{"graph_id": ["node", ...]}`` malicious-node file.

    Raises:
        ManifestError: If the file is not a JSON object of node-name lists.
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except ValueError as e:
        raise ManifestError(f"Node labels file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ManifestError(f"Node labels file {path} must contain a JSON object")
    for gid, names in raw.items():
        if not isinstance(names, list):
            raise ManifestError(f"Node labels file {path}: graph {gid!r} needs a list of node ids")
    return {str(gid): [str(n) for n in names] for gid, names in raw.items()}


@dataclass
class DatasetManifest:
    """Files to ingest and their ground truth."""

    format: DatasetFormat
    paths: list[Path]
    labels: dict[str, Label] = field(default_factory=dict)
    node_labels: dict[str, list[str]] = field(default_factory=dict)

    @property
    def node_level(self) -> bool:
        return bool(self.node_labels)

    def validate(self) -> None:
        """Check that every referenced path exists.

        Raises:
            ManifestError: If a path is missing or the format is unknown.
        """
        if self.format not in ("streamspot", "canonical"):
            raise ManifestError(f"Unknown dataset format {self.format!r}")
        if not self.paths:
            raise ManifestError("Manifest lists no input files")
        missing = [str(p) for p in self.paths if not Path(p).exists()]
        if missing:
            raise ManifestError(f"Input file(s) not found: {', '.join(missing)}")


@dataclass
class IngestResult:
    """Parsed graphs plus the dataset-wide vocabularies and labels."""

    graphs: list[ProvenanceGraph]
    node_vocab: TypeVocabulary
    edge_vocab: TypeVocabulary
    labels: dict[str, Label]

    @property
    def total_events(self) -> int:
        return sum(g.num_edges for g in self.graphs)


def ingest(
    manifest: DatasetManifest, jobs: int = 1, serial: bool = False
) -> IngestResult:
    """Parse every file of a manifest against shared vocabularies.

    Files are parsed one worker per file; ``serial`` (or ``jobs == 1``) parses
    in manifest order so vocabulary indices are reproducible.

    Args:
        manifest: Dataset description.
        jobs: Maximum parallel workers.
        serial: Force in-order, single-threaded parsing.

    Returns:
        IngestResult: Graphs in manifest order with frozen vocabularies.

    Raises:
        ManifestError: If files are missing or a graph has no label.
    """
    manifest.validate()
    node_vocab = TypeVocabulary("node")
    edge_vocab = TypeVocabulary("edge")

    def parse_one(path: Path) -> list[ProvenanceGraph]:
        if manifest.format == "streamspot":
            return parse_streamspot(path, node_vocab, edge_vocab)
        return [
            parse_canonical(
                path,
                node_vocab,
                edge_vocab,
                malicious_nodes=manifest.node_labels.get(path.stem, ()),
            )
        ]

    paths = [Path(p) for p in manifest.paths]
    if serial or jobs <= 1 or len(paths) == 1:
        per_file = [parse_one(p) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=min(jobs, len(paths))) as pool:
            per_file = list(pool.map(parse_one, paths))
    graphs = [g for batch in per_file for g in batch]

    labels = dict(manifest.labels)
    if not labels and manifest.format == "streamspot":
        labels = streamspot_labels(g.graph_id for g in graphs)
    if not manifest.node_level:
        unlabeled = [g.graph_id for g in graphs if g.graph_id not in labels]
        if unlabeled:
            raise ManifestError(f"Graph(s) without a label: {', '.join(unlabeled[:10])}")
    else:
        for g in graphs:
            labels.setdefault(g.graph_id, "attack" if g.malicious_nodes else "benign")

    node_vocab.freeze()
    edge_vocab.freeze()
    logger.info(
        "Ingested %d graph(s), %d event(s), %d node type(s), %d edge type(s)",
        len(graphs),
        sum(g.num_edges for g in graphs),
        len(node_vocab),
        len(edge_vocab),
    )
    return IngestResult(graphs, node_vocab, edge_vocab, labels)


def write_dataset(result: IngestResult, out_dir: str | Path) -> Path:
    """Write graphs, vocabularies and labels under ``out_dir``."""
    out = Path(out_dir)
    (out / GRAPHS_DIR).mkdir(parents=True, exist_ok=True)
    for g in result.graphs:
        save_graph(g, out / GRAPHS_DIR / f"{g.graph_id}.json")
    result.node_vocab.save(out / NODE_TYPES_FILE)
    result.edge_vocab.save(out / EDGE_TYPES_FILE)
    write_labels(result.labels, out / LABELS_FILE)
    return out


def write_labels(labels: dict[str, Label], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dict(sorted(labels.items())), f, indent=2)


def read_dataset(in_dir: str | Path) -> IngestResult:
    """Read a directory written by ``write_dataset``."""
    base = Path(in_dir)
    if not (base / NODE_TYPES_FILE).exists():
        raise ManifestError(f"{base} does not look like an ingested dataset")
    node_vocab = TypeVocabulary.load(base / NODE_TYPES_FILE, "node")
    edge_vocab = TypeVocabulary.load(base / EDGE_TYPES_FILE, "edge")
    graphs = [
        load_graph(p, node_vocab, edge_vocab)
        for p in sorted((base / GRAPHS_DIR).glob("*.json"), key=_graph_sort_key)
    ]
    labels = load_labels(base / LABELS_FILE) if (base / LABELS_FILE).exists() else {}
    return IngestResult(graphs, node_vocab, edge_vocab, labels)


def _graph_sort_key(path: Path) -> tuple[int, int | str]:
    # numeric ids sort numerically, others lexically after them
    stem = path.stem
    return (0, int(stem)) if stem.isdigit() else (1, stem)
