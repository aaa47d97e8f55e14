"""In-memory provenance graph model and type vocabularies."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, NamedTuple

from .exceptions import ManifestError

VocabularyKind = Literal["node", "edge"]


@dataclass
class TypeVocabulary:
    """Ordered, dense mapping from type names to one-hot positions.

    Names are interned in first-seen order. Interning is guarded by a lock so
    several ingestion workers can share one vocabulary; after ``freeze()`` the
    vocabulary is read-only and safe to share without locking.
    """

    kind: VocabularyKind
    names: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)
    frozen: bool = field(default=False, compare=False)
    _lock: threading.Lock = field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.names and not self.index:
            self.index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self.index

    def intern(self, name: str) -> int:
        """Return the index of ``name``, appending it if unseen.

        Args:
            name: Non-empty type name.

        Returns:
            int: Dense 0-based index of the type.

        Raises:
            ValueError: If ``name`` is empty, or unseen while the vocabulary is frozen.
        """
        if not name:
            raise ValueError("type name must be non-empty")
        found = self.index.get(name)
        if found is not None:
            return found
        with self._lock:
            found = self.index.get(name)
            if found is not None:
                return found
            if self.frozen:
                raise ValueError(f"{self.kind} vocabulary is frozen; unknown type {name!r}")
            self.names.append(name)
            self.index[name] = len(self.names) - 1
            return self.index[name]

    def freeze(self) -> TypeVocabulary:
        """Mark the vocabulary read-only and return it."""
        self.frozen = True
        return self

    def save(self, path: str | Path) -> None:
        """Write one type name per line; the 0-based line number is the index."""
        Path(path).write_text(
            "".join(f"{name}\n" for name in self.names), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path, kind: VocabularyKind) -> TypeVocabulary:
        """Load a vocabulary file written by ``save``.

        Raises:
            ManifestError: If the file is not UTF-8 text.
        """
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except UnicodeDecodeError:
            raise ManifestError(f"Vocabulary file {path} is not UTF-8 text")
        vocab = cls(kind=kind)
        for line in lines:
            if line:
                vocab.intern(line)
        return vocab.freeze()


def intern_type(vocab: TypeVocabulary, name: str) -> int:
    """Intern ``name`` in ``vocab`` and return its index."""
    return vocab.intern(name)


class RawEvent(NamedTuple):
    """One timestamped, typed interaction between two nodes."""

    src: int
    dst: int
    edge_type_index: int
    timestamp: int


@dataclass
class ProvenanceGraph:
    """A provenance graph with dense node ids.

    ``nodes`` holds ``(node_id, type_index)`` pairs; ids are dense per graph so
    they index feature matrices directly. ``node_names`` keeps the original
    identifiers from the log, position ``i`` naming node ``i``.
    """

    graph_id: str
    node_vocab: TypeVocabulary
    edge_vocab: TypeVocabulary
    nodes: list[tuple[int, int]] = field(default_factory=list)
    edges: list[RawEvent] = field(default_factory=list)
    node_names: list[str] = field(default_factory=list)
    malicious_nodes: set[int] = field(default_factory=set)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def node_types(self) -> list[int]:
        """Type index per dense node id, in id order."""
        return [type_index for _, type_index in sorted(self.nodes)]

    @property
    def max_timestamp(self) -> int:
        return max((e.timestamp for e in self.edges), default=0)

    def __str__(self) -> str:
        return (
            f"ProvenanceGraph(id={self.graph_id!r}, nodes={self.num_nodes}, "
            f"edges={self.num_edges})"
        )


def validate_graph(g: ProvenanceGraph) -> list[str]:
    """Check the graph invariants.

    Violations are returned as data; an empty list means the graph is well formed.

    Args:
        g: Graph to check.

    Returns:
        list[str]: One message per violation, naming the offending node or edge.
    """
    violations: list[str] = []
    seen: set[int] = set()
    for node_id, type_index in g.nodes:
        if node_id in seen:
            violations.append(f"duplicate node {node_id}")
        seen.add(node_id)
        if not 0 <= type_index < len(g.node_vocab):
            violations.append(f"node {node_id} has type index {type_index} out of range")

    for position, event in enumerate(g.edges):
        if event.src not in seen:
            violations.append(f"dangling src {event.src}")
        if event.dst not in seen:
            violations.append(f"dangling dst {event.dst}")
        if not 0 <= event.edge_type_index < len(g.edge_vocab):
            violations.append(
                f"edge {position} has type index {event.edge_type_index} out of range"
            )
        if event.timestamp < 0:
            violations.append(f"edge {position} has negative timestamp {event.timestamp}")
    return violations


def graph_to_dict(g: ProvenanceGraph) -> dict[str, Any]:
    """Serialize a graph (without its vocabularies) to a JSON-ready dict."""
    return {
        "graph_id": g.graph_id,
        "nodes": [[node_id, type_index] for node_id, type_index in g.nodes],
        "node_names": list(g.node_names),
        "edges": [list(event) for event in g.edges],
        "malicious_nodes": sorted(g.malicious_nodes),
    }


def graph_from_dict(
    data: dict[str, Any], node_vocab: TypeVocabulary, edge_vocab: TypeVocabulary
) -> ProvenanceGraph:
    """Rebuild a graph serialized by ``graph_to_dict``."""
    return ProvenanceGraph(
        graph_id=str(data["graph_id"]),
        node_vocab=node_vocab,
        edge_vocab=edge_vocab,
        nodes=[(int(n), int(t)) for n, t in data["nodes"]],
        edges=[RawEvent(int(s), int(d), int(t), int(ts)) for s, d, t, ts in data["edges"]],
        node_names=[str(name) for name in data.get("node_names", [])],
        malicious_nodes={int(n) for n in data.get("malicious_nodes", [])},
    )


def save_graph(g: ProvenanceGraph, path: str | Path) -> None:
    """Write a graph as a JSON document."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph_to_dict(g), f, separators=(",", ":"))


def load_graph(
    path: str | Path, node_vocab: TypeVocabulary, edge_vocab: TypeVocabulary
) -> ProvenanceGraph:
    """Read a graph written by ``save_graph``.

    Raises:
        ManifestError: If the file is not a graph document.
    """
    try:
        with open(path, encoding="utf-8") as f:
            return graph_from_dict(json.load(f), node_vocab, edge_vocab)
    except (ValueError, KeyError, TypeError) as e:
        raise ManifestError(f"{path}: not a graph document ({e!r})")
