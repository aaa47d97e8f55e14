"""Spatial-temporal graph autoencoder.

The encoder applies stacked edge-aware attention layers to each snapshot and
threads their outputs through a GRU across snapshots; the decoder mirrors it
with independent weights and ends in a sigmoid over node-type features.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import numcore as nc
from .config import ModelConfig, config_to_dict, model_config_from_dict
from .exceptions import (
    CheckpointError,
    EmptyInputError,
    NonBenignInTrainingError,
    ShapeMismatchError,
)
from .numcore import AdamState, ModelParams, Tape, Tensor
from .snapshot import Snapshot

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25


@dataclass
class SnapshotView:
    """A snapshot prepared for message passing.

    Edges are the snapshot's compressed edges followed by one implicit self-loop
    for every node without incoming edges, so each node receives a message.
    """

    num_nodes: int
    node_features: NDArray[np.float64]
    src: NDArray[np.int64]
    dst: NDArray[np.int64]
    edge_features: NDArray[np.float64]
    n_self_loops: int

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @classmethod
    def from_snapshot(cls, s: Snapshot, edge_transform: str = "log1p") -> SnapshotView:
        counts = s.counts.astype(np.float64)
        features = np.log1p(counts) if edge_transform == "log1p" else counts
        has_incoming = np.zeros(s.num_nodes, dtype=bool)
        has_incoming[s.dst] = True
        isolated = np.flatnonzero(~has_incoming).astype(np.int64)
        return cls(
            num_nodes=s.num_nodes,
            node_features=s.node_features,
            src=np.concatenate([s.src, isolated]).astype(np.int64),
            dst=np.concatenate([s.dst, isolated]).astype(np.int64),
            edge_features=features,
            n_self_loops=int(isolated.shape[0]),
        )


def prepare(snapshots: Sequence[Snapshot], edge_transform: str = "log1p") -> list[SnapshotView]:
    return [SnapshotView.from_snapshot(s, edge_transform) for s in snapshots]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> NDArray[np.float64]:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AttentionOutput:
    output: Tensor
    # per-edge, per-head coefficients after softmax and before dropout
    alpha: NDArray[np.float64]


class AttentionLayer:
    """Multi-head attention over incoming edges, with edge features in the score.

    For an edge ``i -> j`` and head ``h``::

        score = leaky_relu(a_h . [W_src h_i | W_edge e_ij | W_dst h_j])
        alpha = dropout(softmax of score over j's incoming edges)
        h_j'  = prelu(sum_i alpha_ij W_src h_i), heads concatenated
    """

    def __init__(
        self,
        params: ModelParams,
        prefix: str,
        d_in: int,
        d_out: int,
        config: ModelConfig,
        rng: np.random.Generator,
    ):
        if d_out % config.n_heads:
            raise ShapeMismatchError("attention heads", (d_out,), (config.n_heads,))
        self.prefix = prefix
        self.d_in = d_in
        self.d_out = d_out
        self.n_heads = config.n_heads
        self.head_dim = d_out // config.n_heads
        self.use_edge_features = config.use_edge_features
        self.leaky_slope = config.leaky_slope
        self.dropout_p = config.dropout_p
        self.d_edge = config.d_edge

        blocks = 3 if self.use_edge_features else 2
        self.w_src = params.add(f"{prefix}.w_src", _glorot(rng, d_in, d_out, (d_in, d_out)))
        self.w_dst = params.add(f"{prefix}.w_dst", _glorot(rng, d_in, d_out, (d_in, d_out)))
        self.w_edge: Tensor | None = None
        self.self_edge: Tensor | None = None
        if self.use_edge_features:
            self.w_edge = params.add(
                f"{prefix}.w_edge", _glorot(rng, config.d_edge, d_out, (config.d_edge, d_out))
            )
            self.self_edge = params.add(
                f"{prefix}.self_edge", _glorot(rng, 1, config.d_edge, (1, config.d_edge))
            )
        self.attn = params.add(
            f"{prefix}.attn",
            _glorot(rng, blocks * self.head_dim, 1, (self.n_heads, blocks * self.head_dim)),
        )
        self.slope = params.add(f"{prefix}.prelu", np.array([PRELU_INIT]))

    def _edge_projection(self, view: SnapshotView) -> Tensor:
        assert self.w_edge is not None and self.self_edge is not None
        parts = []
        if view.num_edges > view.n_self_loops:
            parts.append(Tensor(view.edge_features))
        if view.n_self_loops:
            parts.append(
                nc.index_select(self.self_edge, np.zeros(view.n_self_loops, dtype=np.int64))
            )
        features = parts[0] if len(parts) == 1 else nc.concat(parts, axis=0)
        return nc.matmul(features, self.w_edge)

    def forward(
        self,
        view: SnapshotView,
        x: Tensor,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> AttentionOutput:
        if x.shape != (view.num_nodes, self.d_in):
            raise ShapeMismatchError("attention input", x.shape, (view.num_nodes, self.d_in))
        if view.edge_features.shape[1:] != (self.d_edge,) and self.use_edge_features:
            raise ShapeMismatchError("edge features", view.edge_features.shape, (self.d_edge,))
        n, e = view.num_nodes, view.num_edges
        heads, dim = self.n_heads, self.head_dim

        src_proj = nc.index_select(nc.matmul(x, self.w_src), view.src)
        dst_proj = nc.index_select(nc.matmul(x, self.w_dst), view.dst)
        src_heads = nc.reshape(src_proj, (e, heads, dim))
        blocks = [src_heads]
        if self.use_edge_features:
            blocks.append(nc.reshape(self._edge_projection(view), (e, heads, dim)))
        blocks.append(nc.reshape(dst_proj, (e, heads, dim)))

        joined = nc.concat(blocks, axis=-1)
        scores = nc.leaky_relu(
            nc.reduce_sum(nc.mul(joined, self.attn), axis=-1), self.leaky_slope
        )

        # softmax over each destination's incoming edges, per head
        peak = np.full((n, heads), -np.inf)
        np.maximum.at(peak, view.dst, scores.data)
        weights = nc.exp(nc.sub(scores, Tensor(peak[view.dst])))
        totals = nc.index_add(weights, view.dst, n)
        alpha = nc.div(weights, nc.index_select(totals, view.dst))
        coefficients = alpha.data.copy()
        alpha = nc.dropout(alpha, self.dropout_p, train, rng)

        messages = nc.mul(src_heads, nc.reshape(alpha, (e, heads, 1)))
        aggregated = nc.index_add(nc.reshape(messages, (e, heads * dim)), view.dst, n)
        return AttentionOutput(nc.prelu(aggregated, self.slope), coefficients)


class RecurrentCell:
    """Gated recurrent unit applied row-wise with weights shared across nodes."""

    def __init__(
        self, params: ModelParams, prefix: str, d_in: int, d_hidden: int, rng: np.random.Generator
    ):
        self.d_hidden = d_hidden
        self.gates: dict[str, tuple[Tensor, Tensor, Tensor]] = {}
        for gate in ("update", "reset", "candidate"):
            self.gates[gate] = (
                params.add(f"{prefix}.{gate}.w", _glorot(rng, d_in, d_hidden, (d_in, d_hidden))),
                params.add(
                    f"{prefix}.{gate}.u", _glorot(rng, d_hidden, d_hidden, (d_hidden, d_hidden))
                ),
                params.add(f"{prefix}.{gate}.b", np.zeros(d_hidden)),
            )

    def _affine(self, gate: str, x: Tensor, h: Tensor) -> Tensor:
        w, u, b = self.gates[gate]
        return nc.add(nc.add(nc.matmul(x, w), nc.matmul(h, u)), b)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        z = nc.sigmoid(self._affine("update", x, h))
        r = nc.sigmoid(self._affine("reset", x, h))
        w, u, b = self.gates["candidate"]
        candidate = nc.tanh(
            nc.add(nc.add(nc.matmul(x, w), nc.matmul(nc.mul(r, h), u)), b)
        )
        return nc.add(nc.mul(nc.sub(Tensor(1.0), z), candidate), nc.mul(z, h))


class Autoencoder:
    """Encoder/decoder pair sharing one ``ModelParams`` registry."""

    def __init__(self, config: ModelConfig, params: ModelParams | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        fresh = ModelParams()
        d_h = config.d_hidden

        self.encoder_layers = [
            AttentionLayer(fresh, f"encoder.gnn.{i}", config.d_node if i == 0 else d_h, d_h, config, rng)
            for i in range(config.n_gnn_layers)
        ]
        self.encoder_cell = RecurrentCell(fresh, "encoder.gru", d_h, d_h, rng)
        self.decoder_layers = [
            AttentionLayer(fresh, f"decoder.gnn.{i}", d_h, d_h, config, rng)
            for i in range(config.n_gnn_layers)
        ]
        self.decoder_cell = RecurrentCell(fresh, "decoder.gru", d_h, d_h, rng)
        self.w_out = fresh.add("decoder.out.w", _glorot(rng, d_h, config.d_node, (d_h, config.d_node)))
        self.b_out = fresh.add("decoder.out.b", np.zeros(config.d_node))

        if params is not None:
            if list(params) != list(fresh):
                raise ShapeMismatchError("checkpoint parameters", (len(params),), (len(fresh),))
            fresh.copy_from(params)
        self.params = fresh

    def save(self, path: str | Path) -> None:
        """Write the checkpoint and a ``<path>.json`` sidecar holding the config."""
        nc.save_checkpoint(self.params, path)
        with open(config_sidecar(path), "w", encoding="utf-8") as f:
            json.dump(config_to_dict(self.config), f, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> Autoencoder:
        """Load a checkpoint and its ``.json`` model-config sidecar.

        Raises:
            CheckpointError: If either file is unreadable.
            ShapeMismatchError: If the parameters do not fit the stored config.
        """
        sidecar = config_sidecar(path)
        try:
            with open(sidecar, encoding="utf-8") as f:
                data = json.load(f)
        except ValueError as e:
            raise CheckpointError(f"{sidecar}: model config is not valid JSON ({e})")
        if not isinstance(data, dict):
            raise CheckpointError(f"{sidecar}: model config must be a JSON object")
        return cls(model_config_from_dict(data), nc.load_checkpoint(path))


def config_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def attention_forward(
    layer: AttentionLayer,
    snapshot: Snapshot | SnapshotView,
    node_states: Tensor,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> AttentionOutput:
    """Run one attention layer over a snapshot."""
    view = snapshot if isinstance(snapshot, SnapshotView) else SnapshotView.from_snapshot(snapshot)
    return layer.forward(view, node_states, train, rng)


def _views(model: Autoencoder, snapshots: Sequence[Snapshot | SnapshotView]) -> list[SnapshotView]:
    if not snapshots:
        raise EmptyInputError("at least one snapshot is required")
    views = [
        s if isinstance(s, SnapshotView) else SnapshotView.from_snapshot(s, model.config.edge_transform)
        for s in snapshots
    ]
    if len({v.num_nodes for v in views}) != 1:
        raise ShapeMismatchError("snapshot node counts", *((v.num_nodes,) for v in views))
    return views


def encode(
    model: Autoencoder,
    snapshots: Sequence[Snapshot | SnapshotView],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Node embeddings ``h_T`` after the GRU has consumed every snapshot in order.

    Raises:
        EmptyInputError: If no snapshots are given.
    """
    views = _views(model, snapshots)
    h = Tensor(np.zeros((views[0].num_nodes, model.config.d_hidden)))
    for view in views:
        x = Tensor(view.node_features)
        for layer in model.encoder_layers:
            x = layer.forward(view, x, train, rng).output
        h = model.encoder_cell.forward(x, h)
    return h


def decode(
    model: Autoencoder,
    node_embeddings: Tensor,
    snapshots: Sequence[Snapshot | SnapshotView],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Reconstruct node features from embeddings, replaying the snapshot structure."""
    views = _views(model, snapshots)
    expected = (views[0].num_nodes, model.config.d_hidden)
    if node_embeddings.shape != expected:
        raise ShapeMismatchError("decode", node_embeddings.shape, expected)
    h = Tensor(np.zeros(expected))
    for view in views:
        x = node_embeddings
        for layer in model.decoder_layers:
            x = layer.forward(view, x, train, rng).output
        h = model.decoder_cell.forward(x, h)
    return nc.sigmoid(nc.add(nc.matmul(h, model.w_out), model.b_out))


def sce_loss(
    original: NDArray[np.float64] | Tensor,
    reconstructed: Tensor,
    alpha: float = 1.0,
    beta: float = 1.0,
    eps: float = 1e-4,
) -> Tensor:
    """Symmetric binary cross-entropy, averaged over all entries.

    ``alpha * CE(I, R) + beta * CE(R, I)``; the reverse term reads ``log`` of the
    original clamped to ``[eps, 1 - eps]``, and ``R`` is clamped the same way
    inside the forward term so saturated sigmoids stay finite.
    """
    target = original.data if isinstance(original, Tensor) else np.asarray(original, dtype=np.float64)
    if target.shape != reconstructed.shape:
        raise ShapeMismatchError("sce_loss", target.shape, reconstructed.shape)
    inputs = Tensor(target)
    clamped_target = np.clip(target, eps, 1.0 - eps)
    clamped_recon = nc.clamp(reconstructed, eps, 1.0 - eps)

    forward_ce = nc.neg(
        nc.add(
            nc.mul(inputs, nc.log(clamped_recon)),
            nc.mul(Tensor(1.0 - target), nc.log(nc.sub(Tensor(1.0), clamped_recon))),
        )
    )
    reverse_ce = nc.neg(
        nc.add(
            nc.mul(reconstructed, Tensor(np.log(clamped_target))),
            nc.mul(nc.sub(Tensor(1.0), reconstructed), Tensor(np.log(1.0 - clamped_target))),
        )
    )
    return nc.reduce_mean(nc.add(nc.mul(Tensor(alpha), forward_ce), nc.mul(Tensor(beta), reverse_ce)))


def graph_embedding(node_embeddings: Tensor | NDArray[np.float64]) -> NDArray[np.float64]:
    """Mean-pool node embeddings into one graph vector.

    Raises:
        EmptyInputError: If there are no nodes.
    """
    data = node_embeddings.data if isinstance(node_embeddings, Tensor) else np.asarray(node_embeddings)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyInputError("graph_embedding needs at least one node")
    return np.asarray(data.mean(axis=0), dtype=np.float64)


def reconstruction_loss(
    model: Autoencoder,
    views: Sequence[SnapshotView],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode, decode and score one graph's snapshot sequence."""
    embeddings = encode(model, views, train, rng)
    reconstructed = decode(model, embeddings, views, train, rng)
    cfg = model.config
    return sce_loss(views[0].node_features, reconstructed, cfg.sce_alpha, cfg.sce_beta, cfg.sce_eps)


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list[float] = field(default_factory=list)
    # mean loss of every (epoch, graph) step, in order
    step_losses: list[float] = field(default_factory=list)

    def write_trace(self, path: str | Path) -> None:
        lines = ["epoch,loss"] + [f"{i},{loss:.10g}" for i, loss in enumerate(self.loss_trace)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(
    model: Autoencoder,
    benign_graphs: Mapping[str, Sequence[Snapshot]],
    labels: Mapping[str, str] | None = None,
    epochs: int | None = None,
    state: AdamState | None = None,
) -> TrainResult:
    """Train the autoencoder on benign graphs, one graph per optimizer step.

    Each step encodes and decodes one graph's full snapshot sequence, so the loss
    covers all of its nodes at once.

    Args:
        model: Model to update in place.
        benign_graphs: Snapshot sequences keyed by graph id, visited in insertion order.
        labels: Optional labels; any non-benign graph is rejected.
        epochs: Overrides ``model.config.epochs``.
        state: Optimizer state to continue from (fresh if None).

    Returns:
        TrainResult: The model's parameters and the mean loss of each epoch.

    Raises:
        NonBenignInTrainingError: If a graph is labeled as an attack.
    """
    cfg = model.config
    if labels is not None:
        for graph_id in benign_graphs:
            if labels.get(graph_id, "benign") != "benign":
                raise NonBenignInTrainingError(graph_id)

    n_epochs = cfg.epochs if epochs is None else epochs
    state = state if state is not None else AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    views = {gid: prepare(snaps, cfg.edge_transform) for gid, snaps in benign_graphs.items()}
    result = TrainResult(params=model.params)

    for epoch in range(n_epochs):
        losses = []
        for graph_id, graph_views in views.items():
            nc.zero_grad(model.params)
            with Tape() as tape:
                loss = reconstruction_loss(model, graph_views, train=True, rng=rng)
            nc.backward(tape, loss)
            nc.adam_step(model.params, state)
            losses.append(loss.item())
            logger.debug("epoch %d graph %s loss %.6f", epoch, graph_id, losses[-1])
        result.step_losses.extend(losses)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        result.loss_trace.append(epoch_loss)
        logger.info("Epoch %d/%d: loss %.6f", epoch + 1, n_epochs, epoch_loss)
    return result


def with_dimensions(config: ModelConfig, d_node: int, d_edge: int) -> ModelConfig:
    """Copy of ``config`` sized for a dataset's vocabularies."""
    return replace(config, d_node=d_node, d_edge=d_edge)
