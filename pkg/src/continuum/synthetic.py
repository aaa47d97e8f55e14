"""Seeded toy provenance datasets in the canonical TSV format.

Benign graphs replay a fixed workload: a shell forks workers that, phase after
phase, read configuration and data files, write a log and talk to a service
socket. Attack graphs run the same workload and then an intruder process that
uses node and edge types the workload never produces, wired at random.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import CANONICAL_HEADER, DELIMITER, LABELS_FILE, Label

logger = logging.getLogger(__name__)

NODE_LABELS_FILE = "node_labels.json"

Event = tuple[str, str, str, str, str, int]


@dataclass
class SyntheticGraph:
    graph_id: str
    label: Label
    events: list[Event] = field(default_factory=list)
    malicious: list[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = [CANONICAL_HEADER]
        for src, src_type, dst, dst_type, edge_type, ts in self.events:
            lines.append(DELIMITER.join((src, src_type, dst, dst_type, edge_type, str(ts))))
        return "\n".join(lines) + "\n"


class _Recorder:
    def __init__(self, graph: SyntheticGraph):
        self.graph = graph
        self.clock = 0

    def emit(self, src: tuple[str, str], dst: tuple[str, str], edge_type: str) -> None:
        self.graph.events.append((src[0], src[1], dst[0], dst[1], edge_type, self.clock))
        self.clock += 1


def _workload(rec: _Recorder, rng: np.random.Generator, workers: int, phases: int) -> None:
    shell = ("shell", "process")
    config = ("etc/app.conf", "file")
    log = ("var/app.log", "file")
    service = ("10.0.0.1:443", "socket")
    data = [(f"data/{i}.bin", "file") for i in range(4)]
    procs = [(f"worker-{w}", "process") for w in range(workers)]

    for proc in procs:
        rec.emit(shell, proc, "fork")
    for _ in range(phases):
        for proc in procs:
            rec.emit(proc, config, "read")
            for i in rng.choice(len(data), size=2, replace=False):
                for _ in range(int(rng.integers(1, 4))):
                    rec.emit(proc, data[int(i)], "read")
            rec.emit(proc, log, "write")
            rec.emit(proc, service, "send")
            rec.emit(service, proc, "recv")


def _intrusion(
    rec: _Recorder, rng: np.random.Generator, name: str, victims: list[tuple[str, str]], size: int
) -> list[str]:
    """Attach an intruder and its artifacts with random wiring.

    Returns the names of the intruder nodes that actually appear in the log.
    """
    intruder = (f"{name}-implant", "process")
    module = (f"{name}-module", "kernel_module")
    pipe = (f"{name}-pipe", "pipe")
    exfil = (f"{name}-c2", "socket")
    nodes = [intruder, module, pipe, exfil]
    used = {intruder}
    rec.emit(victims[int(rng.integers(len(victims)))], intruder, "exec")
    for _ in range(size):
        kind = int(rng.integers(4))
        target = victims[int(rng.integers(len(victims)))]
        if kind == 0:
            rec.emit(intruder, target, "chmod")
        elif kind == 1:
            rec.emit(intruder, module, "mmap")
            used.add(module)
        elif kind == 2:
            rec.emit(intruder, pipe, "write")
            rec.emit(pipe, target, "read")
            used.add(pipe)
        else:
            rec.emit(intruder, exfil, "send")
            used.add(exfil)
    return [n[0] for n in nodes if n in used]


def make_benign_graph(
    graph_id: str, rng: np.random.Generator, workers: int = 3, phases: int = 4
) -> SyntheticGraph:
    graph = SyntheticGraph(graph_id, "benign")
    _workload(_Recorder(graph), rng, workers, phases)
    return graph


def make_attack_graph(
    graph_id: str, rng: np.random.Generator, workers: int = 3, phases: int = 4, size: int = 24
) -> SyntheticGraph:
    """Benign workload followed by an intrusion; every intruder node is malicious."""
    graph = SyntheticGraph(graph_id, "attack")
    rec = _Recorder(graph)
    _workload(rec, rng, workers, phases)
    victims = [("etc/app.conf", "file"), ("var/app.log", "file"), ("worker-0", "process")]
    graph.malicious = _intrusion(rec, rng, "x", victims, size)
    return graph


def make_node_level_graph(
    graph_id: str, rng: np.random.Generator, n_noise: int = 2, workers: int = 3, phases: int = 4
) -> SyntheticGraph:
    """Benign workload with ``n_noise`` independent injected intruders."""
    graph = SyntheticGraph(graph_id, "attack")
    rec = _Recorder(graph)
    _workload(rec, rng, workers, phases)
    victims = [(f"data/{i}.bin", "file") for i in range(4)] + [("worker-1", "process")]
    for k in range(n_noise):
        graph.malicious += _intrusion(rec, rng, f"n{k}", victims, size=8)
    return graph


@dataclass
class SyntheticDataset:
    paths: list[Path]
    labels_path: Path
    node_labels_path: Path | None = None


def write_synthetic_dataset(
    out_dir: str | Path,
    n_benign: int = 20,
    n_attack: int = 6,
    seed: int = 0,
    node_level: bool = False,
) -> SyntheticDataset:
    """Write ``<graph_id>.tsv`` files plus label files under ``out_dir``.

    Graph ids are consecutive integers, benign graphs first.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    graphs = [make_benign_graph(str(i), rng) for i in range(n_benign)]
    for i in range(n_benign, n_benign + n_attack):
        maker = make_node_level_graph if node_level else make_attack_graph
        graphs.append(maker(str(i), rng))

    paths = []
    for graph in graphs:
        path = out / f"{graph.graph_id}.tsv"
        path.write_text(graph.to_tsv(), encoding="utf-8")
        paths.append(path)

    labels_path = out / LABELS_FILE
    labels_path.write_text(
        json.dumps({g.graph_id: g.label for g in graphs}, indent=2) + "\n", encoding="utf-8"
    )
    node_labels_path = None
    if node_level:
        node_labels_path = out / NODE_LABELS_FILE
        node_labels_path.write_text(
            json.dumps({g.graph_id: g.malicious for g in graphs}, indent=2) + "\n",
            encoding="utf-8",
        )
    logger.info("Wrote %d synthetic graph(s) to %s", len(graphs), out)
    return SyntheticDataset(paths, labels_path, node_labels_path)
