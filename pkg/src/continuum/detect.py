"""k-nearest-neighbor anomaly scoring, threshold selection and metrics."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from sklearn.metrics import auc, precision_recall_curve, roc_curve
from sklearn.neighbors import NearestNeighbors

from .exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    ManifestError,
    SingleClassValidationError,
    TooFewPointsError,
)
from .snapshot import Snapshot, SnapshotDataset
from .stgnn import Autoencoder, encode, graph_embedding, prepare

logger = logging.getLogger(__name__)

GRAPH_LEVEL = "graph"
NODE_LEVEL = "node"


@dataclass
class BenignIndex:
    """Exact Euclidean k-NN index over benign training embeddings.

    ``baseline`` is the mean, over training points, of each point's mean
    distance to its own ``k`` nearest neighbors, the point itself excluded.
    """

    embeddings: NDArray[np.float64]
    k: int
    baseline: float
    neighbors: NearestNeighbors = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


def build_index(benign_embeddings: ArrayLike, k: int) -> BenignIndex:
    """Fit the neighbor index and compute the benign baseline.

    Raises:
        TooFewPointsError: If there are not at least ``k + 1`` points.
    """
    points = np.atleast_2d(np.asarray(benign_embeddings, dtype=np.float64))
    if k < 1 or points.shape[0] < k + 1:
        raise TooFewPointsError(int(points.shape[0]), k)
    # kd-tree distances are computed directly, so coincident points are exactly 0
    neighbors = NearestNeighbors(n_neighbors=k, algorithm="kd_tree").fit(points)
    distances, _ = neighbors.kneighbors()
    baseline = float(distances.mean(axis=1).mean())
    logger.debug("Built index over %d points (k=%d), baseline %.6g", points.shape[0], k, baseline)
    return BenignIndex(points, k, baseline, neighbors)


def score_many(index: BenignIndex, points: ArrayLike) -> NDArray[np.float64]:
    """Anomaly scores for a batch of points; see ``score``."""
    queries = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if queries.shape[1] != index.dim:
        raise DimensionMismatchError(
            f"query dimension {queries.shape[1]} does not match index dimension {index.dim}"
        )
    if queries.shape[0] == 0:
        return np.zeros(0)
    distances, _ = index.neighbors.kneighbors(queries, n_neighbors=index.k + 1)
    # a query sitting on a training point does not count that point
    coincident = distances[:, 0] == 0.0
    nearest = np.where(coincident[:, None], distances[:, 1:], distances[:, :-1])
    mean_distance = nearest.mean(axis=1)
    if index.baseline > 0.0:
        return np.asarray(mean_distance / index.baseline, dtype=np.float64)
    return np.where(mean_distance == 0.0, 0.0, math.inf)


def score(index: BenignIndex, point: ArrayLike) -> float:
    """Mean distance to the ``k`` nearest benign points, divided by the baseline.

    If the point coincides with a training point, that one point is skipped.
    With a zero baseline the score is 0 for a point at distance 0 and +inf
    otherwise.

    Raises:
        DimensionMismatchError: If the point's dimension differs from the index's.
    """
    vector = np.asarray(point, dtype=np.float64).reshape(1, -1)
    return float(score_many(index, vector)[0])


def _is_attack(labels: Iterable[Any]) -> NDArray[np.bool_]:
    values = []
    for label in labels:
        if isinstance(label, str):
            values.append(label == "attack")
        else:
            values.append(bool(label))
    return np.asarray(values, dtype=bool)


def _finite(scores: NDArray[np.float64]) -> NDArray[np.float64]:
    """Replace +inf by a value above every finite score, keeping the order."""
    finite = scores[np.isfinite(scores)]
    ceiling = (finite.max() if finite.size else 0.0) + 1.0
    return np.where(np.isposinf(scores), ceiling, scores)


def threshold_sweep(
    scores: ArrayLike, labels: Iterable[Any]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """F1 at every distinct score used as the cut, thresholds in descending order."""
    values = np.asarray(scores, dtype=np.float64)
    attack = _is_attack(labels)
    order = np.argsort(-values, kind="stable")
    ordered, truth = values[order], attack[order]
    tp = np.cumsum(truth)
    fp = np.cumsum(~truth)
    fn = int(attack.sum()) - tp
    last_of_group = np.r_[ordered[1:] != ordered[:-1], True]
    tp, fp, fn = tp[last_of_group], fp[last_of_group], fn[last_of_group]
    f1 = 2.0 * tp / np.maximum(2 * tp + fp + fn, 1)
    return ordered[last_of_group], f1


def choose_threshold(val_scores: ArrayLike, val_labels: Iterable[Any]) -> float:
    """Score maximizing validation F1, ties going to the higher threshold.

    Items with ``score >= threshold`` are predicted as attacks.

    Raises:
        SingleClassValidationError: If validation lacks benign or attack items.
    """
    labels = _is_attack(val_labels)
    if labels.size == 0 or labels.all() or not labels.any():
        raise SingleClassValidationError(
            "validation set must contain both benign and attack items"
        )
    thresholds, f1 = threshold_sweep(val_scores, labels)
    best = int(np.flatnonzero(f1 >= f1.max() - 1e-12)[0])
    logger.info("Chose threshold %.6g (validation F1 %.4f)", thresholds[best], f1[best])
    return float(thresholds[best])


@dataclass
class AnomalyReport:
    """Scores, predictions and confusion-derived metrics for one evaluation.

    Ratios whose denominator is zero are reported as 0 and named in
    ``undefined``.
    """

    item_ids: list[str]
    scores: list[float]
    labels: list[bool]
    predicted: list[bool]
    threshold: float
    tp: int
    tn: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    auc: float
    pr_auc: float
    fp_rate: float
    undefined: list[str] = field(default_factory=list)
    level: str = GRAPH_LEVEL

    @property
    def count(self) -> int:
        return len(self.scores)

    def recompute(self) -> AnomalyReport:
        """Metrics derived again from the stored scores, labels and threshold."""
        return metrics(self.scores, self.labels, self.threshold, self.item_ids, self.level)

    def mismatches(self, other: AnomalyReport, tol: float = 1e-9) -> list[str]:
        """Names of count and metric fields on which two reports disagree."""
        names = []
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) != getattr(other, name):
                names.append(name)
        for name in ("precision", "recall", "f1", "auc", "pr_auc", "fp_rate"):
            if abs(getattr(self, name) - getattr(other, name)) > tol:
                names.append(name)
        return names

    def summary(self) -> str:
        return (
            f"{self.level}-level: {self.count} items, threshold {self.threshold:.4g}, "
            f"TP={self.tp} TN={self.tn} FP={self.fp} FN={self.fn}, "
            f"precision {self.precision:.4f}, recall {self.recall:.4f}, "
            f"F1 {self.f1:.4f}, AUC {self.auc:.4f}"
        )


def _ratio(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics(
    scores: ArrayLike,
    labels: Iterable[Any],
    threshold: float,
    item_ids: Sequence[str] | None = None,
    level: str = GRAPH_LEVEL,
) -> AnomalyReport:
    """Confusion counts and metrics for ``score >= threshold`` predictions.

    AUC integrates the full ROC sweep with the trapezoidal rule; PR-AUC does the
    same over the precision-recall sweep.

    Raises:
        EmptyInputError: If there are no scores.
    """
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    truth = _is_attack(labels)
    if values.size == 0:
        raise EmptyInputError("metrics need at least one score")
    if truth.size != values.size:
        raise DimensionMismatchError(f"{values.size} scores but {truth.size} labels")
    predicted = values >= threshold

    tp = int(np.sum(predicted & truth))
    tn = int(np.sum(~predicted & ~truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))

    undefined: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    fp_rate = _ratio(fp, fp + tn, "fp_rate", undefined)

    if truth.all() or not truth.any():
        undefined += ["auc", "pr_auc"]
        roc_auc = pr_auc = 0.0
    else:
        finite = _finite(values)
        fpr, tpr, _ = roc_curve(truth, finite, drop_intermediate=False)
        roc_auc = float(auc(fpr, tpr))
        curve_precision, curve_recall, _ = precision_recall_curve(truth, finite)
        pr_auc = float(auc(curve_recall, curve_precision))

    ids = list(item_ids) if item_ids is not None else [str(i) for i in range(values.size)]
    return AnomalyReport(
        item_ids=ids,
        scores=values.tolist(),
        labels=truth.tolist(),
        predicted=predicted.tolist(),
        threshold=float(threshold),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        auc=roc_auc,
        pr_auc=pr_auc,
        fp_rate=fp_rate,
        undefined=undefined,
        level=level,
    )


def save_report(report: AnomalyReport, path: str | Path) -> None:
    """Write the report as JSON (infinite scores are written as ``Infinity``)."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(report), f, indent=2, sort_keys=True)
        f.write("\n")


def load_report(path: str | Path) -> AnomalyReport:
    try:
        with open(path, encoding="utf-8") as f:
            return AnomalyReport(**json.load(f))
    except (ValueError, TypeError) as e:
        raise ManifestError(f"{path}: not an evaluation report ({e})")


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]


def split_dataset(
    items: Sequence[str],
    labels: Mapping[str, str],
    train_fraction: float = 0.8,
    val_fraction: float = 0.5,
    seed: int = 0,
) -> DatasetSplit:
    """Deterministic train/validation/test split.

    A ``train_fraction`` share of the benign items goes to training. The
    remaining benign items and every attack are divided per class, so both
    classes reach validation and test whenever a class has two or more items.
    """
    rng = np.random.default_rng(seed)
    ordered = sorted(items)
    benign = [i for i in ordered if labels.get(i, "benign") == "benign"]
    attacks = [i for i in ordered if labels.get(i, "benign") != "benign"]

    shuffled = [benign[i] for i in rng.permutation(len(benign))]
    n_train = round(train_fraction * len(shuffled))
    if train_fraction > 0 and shuffled:
        n_train = min(len(shuffled), max(1, n_train))
    train, held_benign = shuffled[:n_train], shuffled[n_train:]

    validation: list[str] = []
    test: list[str] = []
    for group in (held_benign, attacks):
        group = [group[i] for i in rng.permutation(len(group))]
        n_val = math.ceil(val_fraction * len(group))
        if len(group) >= 2:
            n_val = min(n_val, len(group) - 1)
        validation += group[:n_val]
        test += group[n_val:]
    return DatasetSplit(sorted(train), sorted(validation), sorted(test))


def _map(fn: Any, items: Sequence[Any], jobs: int) -> list[Any]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def node_embeddings(model: Autoencoder, snapshots: Sequence[Snapshot]) -> NDArray[np.float64]:
    views = prepare(snapshots, model.config.edge_transform)
    return np.asarray(encode(model, views).data, dtype=np.float64)


def embed_graphs(
    model: Autoencoder, graphs: Mapping[str, Sequence[Snapshot]], jobs: int = 1
) -> dict[str, NDArray[np.float64]]:
    """Mean-pooled embedding per graph; encoding fans out over ``jobs`` threads."""
    ids = sorted(graphs)
    vectors = _map(lambda gid: graph_embedding(node_embeddings(model, graphs[gid])), ids, jobs)
    return dict(zip(ids, vectors, strict=True))


def embed_nodes(
    model: Autoencoder, graphs: Mapping[str, Sequence[Snapshot]], jobs: int = 1
) -> dict[str, NDArray[np.float64]]:
    """Node embedding matrix per graph."""
    ids = sorted(graphs)
    matrices = _map(lambda gid: node_embeddings(model, graphs[gid]), ids, jobs)
    return dict(zip(ids, matrices, strict=True))


def node_item_id(graph_id: str, node: int) -> str:
    return f"{graph_id}/{node}"


def _graph_items(
    model: Autoencoder,
    graphs: Mapping[str, Sequence[Snapshot]],
    labels: Mapping[str, str],
    jobs: int,
) -> tuple[list[str], NDArray[np.float64], list[bool]]:
    embedded = embed_graphs(model, graphs, jobs)
    ids = sorted(embedded)
    if not ids:
        raise EmptyInputError("no graphs to evaluate")
    return ids, np.vstack([embedded[i] for i in ids]), [labels.get(i) == "attack" for i in ids]


def _node_items(
    model: Autoencoder,
    graphs: Mapping[str, Sequence[Snapshot]],
    malicious_nodes: Mapping[str, set[int]],
    jobs: int,
) -> tuple[list[str], NDArray[np.float64], list[bool]]:
    embedded = embed_nodes(model, graphs, jobs)
    ids: list[str] = []
    truth: list[bool] = []
    for graph_id in sorted(embedded):
        bad = malicious_nodes.get(graph_id, set())
        for node in range(embedded[graph_id].shape[0]):
            ids.append(node_item_id(graph_id, node))
            truth.append(node in bad)
    if not ids:
        raise EmptyInputError("no nodes to evaluate")
    return ids, np.vstack([embedded[g] for g in sorted(embedded)]), truth


def evaluate_graph_level(
    model: Autoencoder,
    index: BenignIndex,
    test_graphs: Mapping[str, Sequence[Snapshot]],
    labels: Mapping[str, str],
    threshold: float,
    jobs: int = 1,
) -> AnomalyReport:
    """Score each graph's pooled embedding against the index."""
    ids, points, truth = _graph_items(model, test_graphs, labels, jobs)
    return metrics(score_many(index, points), truth, threshold, ids, GRAPH_LEVEL)


def evaluate_node_level(
    model: Autoencoder,
    index: BenignIndex,
    test_graphs: Mapping[str, Sequence[Snapshot]],
    malicious_nodes: Mapping[str, set[int]],
    threshold: float,
    jobs: int = 1,
) -> AnomalyReport:
    """Score every node embedding directly, without pooling."""
    ids, points, truth = _node_items(model, test_graphs, malicious_nodes, jobs)
    return metrics(score_many(index, points), truth, threshold, ids, NODE_LEVEL)


@dataclass
class DetectionRun:
    index: BenignIndex
    threshold: float
    validation: AnomalyReport
    report: AnomalyReport


def detect(
    model: Autoencoder,
    index_graphs: Mapping[str, Sequence[Snapshot]],
    validation: SnapshotDataset,
    test: SnapshotDataset,
    k: int,
    level: str = GRAPH_LEVEL,
    jobs: int = 1,
) -> DetectionRun:
    """Build the benign index, pick the threshold on validation, report on test."""
    if level == NODE_LEVEL:
        embedded = embed_nodes(model, index_graphs, jobs)
        benign_points = np.vstack([embedded[g] for g in sorted(embedded)])
        val_ids, val_points, val_truth = _node_items(
            model, validation.graphs, validation.malicious_nodes, jobs
        )
    else:
        embedded = embed_graphs(model, index_graphs, jobs)
        benign_points = np.vstack([embedded[g] for g in sorted(embedded)])
        val_ids, val_points, val_truth = _graph_items(
            model, validation.graphs, validation.labels, jobs
        )
    index = build_index(benign_points, k)
    val_scores = score_many(index, val_points)
    threshold = choose_threshold(val_scores, val_truth)
    val_report = metrics(val_scores, val_truth, threshold, val_ids, level)

    if level == NODE_LEVEL:
        report = evaluate_node_level(model, index, test.graphs, test.malicious_nodes, threshold, jobs)
    else:
        report = evaluate_graph_level(model, index, test.graphs, test.labels, threshold, jobs)
    logger.info(report.summary())
    return DetectionRun(index, threshold, val_report, report)
