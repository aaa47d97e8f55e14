"""
Tests for the attention layer, recurrent cell and spatial-temporal autoencoder.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_graph, random_snapshots

from continuum import numcore as nc
from continuum.exceptions import (
    CheckpointError,
    EmptyInputError,
    NonBenignInTrainingError,
    ShapeMismatchError,
)
from continuum.numcore import ModelParams, Tensor
from continuum.snapshot import Snapshot, make_snapshots
from continuum.stgnn import (
    Autoencoder,
    SnapshotView,
    attention_forward,
    decode,
    encode,
    graph_embedding,
    reconstruction_loss,
    sce_loss,
    train,
    with_dimensions,
)


def hand_snapshot(counts=((1, 0), (0, 2), (3, 1))):
    """Three nodes; node 0 has no incoming edge and node 2 has exactly one."""
    return Snapshot(
        index=0,
        t_lo=0,
        t_hi=10,
        node_types=np.array([0, 1, 2]),
        d_node=3,
        d_edge=2,
        src=np.array([0, 1, 2]),
        dst=np.array([1, 2, 1]),
        counts=np.array(counts, dtype=np.int64),
        compressed=True,
    )


def permuted(s, perm):
    """The same snapshot with node ``i`` renamed to ``perm[i]``."""
    node_types = np.empty_like(s.node_types)
    node_types[perm] = s.node_types
    return Snapshot(
        index=s.index,
        t_lo=s.t_lo,
        t_hi=s.t_hi,
        node_types=node_types,
        d_node=s.d_node,
        d_edge=s.d_edge,
        src=perm[s.src],
        dst=perm[s.dst],
        counts=s.counts.copy(),
        compressed=True,
    )


def test_view_adds_self_loops_for_nodes_without_incoming_edges():
    """Test that only node 0 receives an implicit self-loop."""
    view = SnapshotView.from_snapshot(hand_snapshot())
    assert view.n_self_loops == 1
    assert view.num_edges == 4
    assert (view.src[-1], view.dst[-1]) == (0, 0)
    np.testing.assert_allclose(view.edge_features[2], np.log1p([3.0, 1.0]))


def test_view_raw_edge_transform():
    """Test that the raw transform keeps counts as features."""
    view = SnapshotView.from_snapshot(hand_snapshot(), edge_transform="raw")
    np.testing.assert_allclose(view.edge_features, [[1, 0], [0, 2], [3, 1]])


def test_attention_coefficients_sum_to_one(tiny_config):
    """Test that coefficients sum to one per destination and head."""
    model = Autoencoder(tiny_config)
    s = hand_snapshot()
    view = SnapshotView.from_snapshot(s)
    out = attention_forward(model.encoder_layers[0], s, Tensor(view.node_features))
    assert out.alpha.shape == (4, tiny_config.n_heads)
    assert out.output.shape == (3, tiny_config.d_hidden)

    totals = np.zeros((3, tiny_config.n_heads))
    np.add.at(totals, view.dst, out.alpha)
    np.testing.assert_allclose(totals, 1.0)
    # node 2 has a single incoming edge; node 0 only its self-loop
    np.testing.assert_allclose(out.alpha[1], 1.0)
    np.testing.assert_allclose(out.alpha[3], 1.0)


def test_attention_sums_to_one_on_random_multigraphs(tiny_config):
    """Test per-destination coefficient sums over many raw snapshots with parallel edges."""
    model = Autoencoder(replace(tiny_config, seed=5))
    layer = model.encoder_layers[0]
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n_nodes = int(rng.integers(1, 8))
        events = [
            (int(rng.integers(n_nodes)), int(rng.integers(n_nodes)), int(rng.integers(2)), int(t))
            for t in rng.integers(0, 20, size=int(rng.integers(1, 12)))
        ]
        graph = make_graph(events, rng.integers(0, 3, size=n_nodes).tolist(), d_node=3, d_edge=2)
        for s in make_snapshots(graph, 2):
            view = SnapshotView.from_snapshot(s)
            out = layer.forward(view, Tensor(view.node_features))
            totals = np.zeros((n_nodes, tiny_config.n_heads))
            np.add.at(totals, view.dst, out.alpha)
            np.testing.assert_allclose(totals, 1.0, rtol=1e-12)
            assert np.isfinite(out.output.data).all()


def test_attention_rejects_wrong_input_width(tiny_config):
    """Test that node states of the wrong width are refused."""
    model = Autoencoder(tiny_config)
    with pytest.raises(ShapeMismatchError):
        attention_forward(model.encoder_layers[0], hand_snapshot(), Tensor(np.zeros((3, 5))))


def test_edge_features_change_the_output(tiny_config):
    """Test that edge counts matter only when edge features are enabled."""
    for use_edges in (True, False):
        model = Autoencoder(replace(tiny_config, use_edge_features=use_edges))
        first = encode(model, [hand_snapshot()]).data
        second = encode(model, [hand_snapshot(((5, 5), (0, 1), (1, 0)))]).data
        assert np.allclose(first, second) is not use_edges


def test_encode_decode_shapes(tiny_config, tiny_snapshots):
    """Test embedding and reconstruction shapes and the sigmoid output range."""
    model = Autoencoder(tiny_config)
    h = encode(model, tiny_snapshots)
    assert h.shape == (4, tiny_config.d_hidden)
    reconstructed = decode(model, h, tiny_snapshots)
    assert reconstructed.shape == (4, tiny_config.d_node)
    assert ((reconstructed.data > 0) & (reconstructed.data < 1)).all()


def test_encode_rejects_bad_sequences(tiny_config, rng):
    """Test that empty sequences and differing node counts are refused."""
    model = Autoencoder(tiny_config)
    with pytest.raises(EmptyInputError):
        encode(model, [])
    mixed = random_snapshots(rng, n_nodes=4, n_snapshots=1) + random_snapshots(
        rng, n_nodes=5, n_snapshots=1
    )
    with pytest.raises(ShapeMismatchError):
        encode(model, mixed)
    with pytest.raises(ShapeMismatchError):
        decode(model, Tensor(np.zeros((4, 3))), mixed[:1])


def test_encoder_is_permutation_equivariant(tiny_config, tiny_snapshots):
    """Test that renaming nodes permutes embeddings and reconstructions the same way."""
    model = Autoencoder(tiny_config)
    perm = np.array([2, 0, 3, 1])
    h = encode(model, tiny_snapshots).data
    renamed = [permuted(s, perm) for s in tiny_snapshots]
    h_perm = encode(model, renamed).data
    np.testing.assert_allclose(h_perm[perm], h, atol=1e-12)

    r = decode(model, Tensor(h), tiny_snapshots).data
    r_perm = decode(model, Tensor(h_perm), renamed).data
    np.testing.assert_allclose(r_perm[perm], r, atol=1e-12)


def second_snapshot():
    """The nodes of ``hand_snapshot`` with different edges."""
    return Snapshot(
        index=1,
        t_lo=10,
        t_hi=20,
        node_types=np.array([0, 1, 2]),
        d_node=3,
        d_edge=2,
        src=np.array([2, 0]),
        dst=np.array([0, 2]),
        counts=np.array([[0, 4], [2, 2]], dtype=np.int64),
        compressed=True,
    )


def test_snapshot_order_matters(tiny_config):
    """Test that feeding the snapshots in reverse gives different embeddings."""
    model = Autoencoder(tiny_config)
    forward = encode(model, [hand_snapshot(), second_snapshot()]).data
    backward = encode(model, [second_snapshot(), hand_snapshot()]).data
    assert not np.allclose(forward, backward)


def test_single_snapshot_is_one_recurrent_step(tiny_config):
    """Test that one snapshot encodes to the cell applied to the attention output and zeros."""
    model = Autoencoder(replace(tiny_config, n_gnn_layers=2))
    view = SnapshotView.from_snapshot(hand_snapshot())
    x = Tensor(view.node_features)
    for layer in model.encoder_layers:
        x = layer.forward(view, x).output
    expected = model.encoder_cell.forward(x, Tensor(np.zeros((3, tiny_config.d_hidden))))
    np.testing.assert_allclose(encode(model, [hand_snapshot()]).data, expected.data, atol=1e-14)


def test_graph_embedding_is_permutation_invariant(tiny_config, tiny_snapshots):
    """Test that renaming nodes leaves the pooled graph vector unchanged."""
    model = Autoencoder(tiny_config)
    perm = np.array([3, 1, 0, 2])
    renamed = [permuted(s, perm) for s in tiny_snapshots]
    np.testing.assert_allclose(
        graph_embedding(encode(model, renamed)),
        graph_embedding(encode(model, tiny_snapshots)),
        atol=1e-12,
    )


def test_sce_loss_values():
    """Test the loss at a uniform half and at a perfect one-hot reconstruction."""
    half = np.full((2, 3), 0.5)
    assert sce_loss(half, Tensor(half)).item() == pytest.approx(2 * math.log(2))
    assert sce_loss(half, Tensor(half), alpha=1.0, beta=0.0).item() == pytest.approx(math.log(2))

    onehot = np.eye(3)
    assert sce_loss(onehot, Tensor(onehot)).item() < 1e-3
    with pytest.raises(ShapeMismatchError):
        sce_loss(onehot, Tensor(np.zeros((3, 2))))


def test_sce_loss_stays_finite_when_saturated():
    """Test that exact zeros and ones in the reconstruction do not produce infinities."""
    target = np.eye(2)
    loss = sce_loss(target, Tensor(1.0 - target))
    assert np.isfinite(loss.item())


def test_graph_embedding_is_mean_pool():
    """Test mean pooling and its empty-input error."""
    np.testing.assert_allclose(graph_embedding(np.array([[1.0, 2.0], [3.0, 6.0]])), [2.0, 4.0])
    with pytest.raises(EmptyInputError):
        graph_embedding(np.zeros((0, 4)))


def test_full_model_gradient_check(tiny_config, tiny_snapshots):
    """Test that the tape gradient of the whole loss matches finite differences."""
    model = Autoencoder(tiny_config)
    assert all(t.data.dtype == np.float64 for t in model.params.tensors())
    views = [SnapshotView.from_snapshot(s) for s in tiny_snapshots]
    error = nc.gradient_check(
        lambda: reconstruction_loss(model, views), model.params.tensors(), h=1e-6, floor=1e-4
    )
    assert error < 1e-4


def test_zero_epochs_leaves_parameters_unchanged(tiny_config, tiny_snapshots):
    """Test that training for zero epochs is a no-op."""
    model = Autoencoder(tiny_config)
    before = model.params.flatten().copy()
    result = train(model, {"g": tiny_snapshots}, epochs=0)
    np.testing.assert_array_equal(model.params.flatten(), before)
    assert result.loss_trace == []


def test_training_is_deterministic(tiny_config, rng):
    """Test that two runs with one seed produce identical parameters and losses."""
    graphs = {"a": random_snapshots(rng), "b": random_snapshots(rng)}
    config = replace(tiny_config, dropout_p=0.3)
    first = train(Autoencoder(config), graphs)
    second = train(Autoencoder(config), graphs)
    assert first.loss_trace == second.loss_trace
    assert first.params.equals(second.params)
    assert len(first.step_losses) == 2 * config.epochs


def test_training_reduces_loss(tiny_config, tiny_snapshots):
    """Test that the loss falls over a short run on one graph."""
    config = replace(tiny_config, epochs=40, lr=1e-2)
    result = train(Autoencoder(config), {"g": tiny_snapshots})
    assert result.loss_trace[-1] < result.loss_trace[0]


def test_loss_does_not_rise_early(tiny_config, tiny_snapshots):
    """Test that the loss does not rise over the first three epochs."""
    result = train(Autoencoder(replace(tiny_config, epochs=3)), {"g": tiny_snapshots})
    first, second, third = result.loss_trace
    assert second <= first
    assert third <= second


@pytest.mark.slow
def test_autoencoder_overfits_one_snapshot(tiny_config):
    """Test that 500 steps on a single snapshot drive the reconstruction loss below 0.05."""
    model = Autoencoder(replace(tiny_config, epochs=500, lr=2e-2))
    result = train(model, {"g": [hand_snapshot()]})
    assert result.loss_trace[-1] < 0.05
    reconstructed = decode(model, encode(model, [hand_snapshot()]), [hand_snapshot()]).data
    np.testing.assert_array_equal(reconstructed.argmax(axis=1), [0, 1, 2])


def test_training_rejects_attack_graphs(tiny_config, tiny_snapshots):
    """Test that a graph labeled as attack cannot be trained on."""
    model = Autoencoder(tiny_config)
    with pytest.raises(NonBenignInTrainingError) as excinfo:
        train(model, {"g": tiny_snapshots}, labels={"g": "attack"})
    assert excinfo.value.graph_id == "g"


def test_write_trace(tmp_path, tiny_config, tiny_snapshots):
    """Test the loss-trace CSV layout."""
    result = train(Autoencoder(tiny_config), {"g": tiny_snapshots})
    path = tmp_path / "trace.csv"
    result.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss"
    assert len(lines) == 1 + tiny_config.epochs
    assert lines[1].startswith("0,")


def test_save_and_load(tmp_path, tiny_config, tiny_snapshots):
    """Test that a saved model reloads with its config and identical outputs."""
    model = Autoencoder(replace(tiny_config, seed=7))
    path = tmp_path / "model.ckpt"
    model.save(path)
    assert (tmp_path / "model.ckpt.json").exists()

    loaded = Autoencoder.load(path)
    assert loaded.config == model.config
    assert loaded.params.equals(model.params)
    np.testing.assert_array_equal(
        encode(loaded, tiny_snapshots).data, encode(model, tiny_snapshots).data
    )


@pytest.mark.parametrize("sidecar", ["{broken", "[1, 2]"])
def test_load_rejects_damaged_config_sidecar(tmp_path, tiny_config, sidecar):
    """Test that an unreadable model-config sidecar raises CheckpointError."""
    path = tmp_path / "model.ckpt"
    Autoencoder(tiny_config).save(path)
    (tmp_path / "model.ckpt.json").write_text(sidecar)
    with pytest.raises(CheckpointError, match="model.ckpt.json"):
        Autoencoder.load(path)


def test_mismatched_parameters_are_refused(tiny_config):
    """Test that a parameter set for another architecture is rejected."""
    params = ModelParams()
    params.add("w", np.zeros(3))
    with pytest.raises(ShapeMismatchError):
        Autoencoder(tiny_config, params)


def test_with_dimensions(tiny_config):
    """Test resizing a config to a dataset's vocabularies."""
    config = with_dimensions(tiny_config, 7, 5)
    assert (config.d_node, config.d_edge) == (7, 5)
    assert config.d_hidden == tiny_config.d_hidden
