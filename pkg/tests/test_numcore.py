"""
Tests for the tensor core: recorded primitives, gradients, Adam and checkpoints.
"""

import threading

import numpy as np
import pytest

from continuum import numcore as nc
from continuum.exceptions import (
    CheckpointError,
    MissingGradError,
    NotScalarError,
    ShapeMismatchError,
)
from continuum.numcore import AdamState, ModelParams, Tape, Tensor


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_square_gradient():
    """Test the documented example: d/dw sum(w*w) is 2w."""
    w = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nc.reduce_sum(nc.mul(w, w))
    nc.backward(tape, loss)
    np.testing.assert_allclose(w.grad, [2.0, -4.0, 6.0])


def test_tape_records_only_tracked_operations():
    """Test that constants and operations outside a tape are not recorded."""
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0], requires_grad=True)
    nc.add(b, b)
    with Tape() as tape:
        nc.add(a, a)
        nc.mul(a, b)
    assert len(tape) == 1
    assert tape.entries[0].op == "mul"


def test_backward_requires_scalar():
    """Test that a non-scalar loss is refused."""
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = nc.mul(w, w)
    with pytest.raises(NotScalarError):
        nc.backward(tape, out)


def test_gradients_accumulate():
    """Test that a second backward pass adds into existing gradients."""
    w = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = nc.reduce_sum(w * 3.0)
        nc.backward(tape, loss)
    np.testing.assert_allclose(w.grad, [6.0, 6.0])


def test_shape_mismatch_errors():
    """Test that incompatible operands raise ShapeMismatchError."""
    with pytest.raises(ShapeMismatchError):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeMismatchError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError):
        nc.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)
    with pytest.raises(ShapeMismatchError):
        nc.reshape(Tensor(np.ones(6)), (4, 2))


@pytest.mark.parametrize(
    "build",
    [
        pytest.param(lambda a, b, m: nc.reduce_sum(nc.mul(nc.add(a, b), a)), id="add-mul"),
        pytest.param(lambda a, b, m: nc.reduce_sum(nc.div(a, nc.exp(b))), id="div-exp"),
        pytest.param(lambda a, b, m: nc.reduce_mean(nc.matmul(a, m)), id="matmul-mean"),
        pytest.param(lambda a, b, m: nc.reduce_sum(nc.softmax(a) * b), id="softmax"),
        pytest.param(lambda a, b, m: nc.reduce_sum(nc.tanh(a) - nc.sigmoid(b)), id="tanh-sigmoid"),
        pytest.param(
            lambda a, b, m: nc.reduce_sum(nc.log(nc.clamp(nc.sigmoid(a), 1e-6, 1.0))),
            id="log-clamp",
        ),
        pytest.param(lambda a, b, m: nc.reduce_sum(nc.leaky_relu(a, 0.2) * b), id="leaky-relu"),
        pytest.param(
            lambda a, b, m: nc.reduce_sum(nc.concat([a, nc.narrow(b, 0, 2, axis=1)], axis=1)),
            id="concat-narrow",
        ),
        pytest.param(
            lambda a, b, m: nc.reduce_sum(nc.reshape(a, (3, 2)) @ nc.reshape(b, (2, 3))),
            id="reshape",
        ),
        pytest.param(
            lambda a, b, m: nc.reduce_sum(nc.reduce_sum(a * b, axis=0) * 2.0), id="axis-sum"
        ),
    ],
)
def test_gradient_check_primitives(rng, build):
    """Test that recorded gradients match finite differences."""
    a, b, m = param(rng, 2, 3), param(rng, 2, 3), param(rng, 3, 4)
    error = nc.gradient_check(lambda: build(a, b, m), [a, b, m])
    assert error < 1e-4


def test_gradient_check_gather_scatter(rng):
    """Test index_select and index_add gradients with repeated indices."""
    x = param(rng, 4, 3)
    weights = Tensor(rng.normal(size=(5, 3)))
    index = np.array([0, 2, 2, 3, 0])
    target = np.array([1, 0, 1, 1, 2])

    def fn():
        gathered = nc.index_select(x, index) * weights
        return nc.reduce_sum(nc.tanh(nc.index_add(gathered, target, 3)))

    assert nc.gradient_check(fn, [x]) < 1e-4


def test_gradient_check_prelu(rng):
    """Test both the input and slope gradients of prelu."""
    x = param(rng, 3, 4)
    slope = Tensor([0.25], requires_grad=True)
    assert nc.gradient_check(lambda: nc.reduce_sum(nc.prelu(x, slope) * 1.5), [x, slope]) < 1e-4


def test_dropout_modes(rng):
    """Test that dropout is the identity in eval mode and scales survivors in training."""
    x = Tensor(np.ones((50, 20)))
    assert nc.dropout(x, 0.5, train=False) is x
    assert nc.dropout(x, 0.0, train=True) is x
    out = nc.dropout(x, 0.5, train=True, rng=rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.3 < (out == 0).mean() < 0.7
    with pytest.raises(ValueError):
        nc.dropout(x, 1.0, train=True)


def test_tapes_are_per_thread():
    """Test that a tape in one thread does not record another thread's work."""
    w = Tensor([1.0], requires_grad=True)
    recorded = {}
    barrier = threading.Barrier(2)

    def worker(name, repeats):
        with Tape() as tape:
            barrier.wait()
            for _ in range(repeats):
                nc.mul(w, w)
        recorded[name] = len(tape)

    threads = [threading.Thread(target=worker, args=(f"t{n}", n)) for n in (3, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert recorded == {"t3": 3, "t5": 5}


def test_model_params_flatten_roundtrip(rng):
    """Test registration order, flatten and assign_flat."""
    params = ModelParams()
    params.add("a", rng.normal(size=(2, 2)))
    params.add("b", rng.normal(size=3))
    flat = params.flatten()
    assert flat.shape == (7,)
    assert list(params) == ["a", "b"]

    other = ModelParams()
    other.add("a", np.zeros((2, 2)))
    other.add("b", np.zeros(3))
    other.assign_flat(flat)
    assert other.equals(params)
    with pytest.raises(ShapeMismatchError):
        other.assign_flat(np.zeros(6))
    with pytest.raises(ValueError):
        params.add("a", 1.0)


def test_adam_first_step_moves_by_lr():
    """Test that the first bias-corrected step moves each weight by about lr."""
    params = ModelParams()
    w = params.add("w", [1.0, -1.0])
    w.grad = np.array([0.5, -3.0])
    state = AdamState(lr=0.1)
    nc.adam_step(params, state)
    np.testing.assert_allclose(w.data, [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_adam_requires_gradients():
    """Test that a parameter without a gradient stops the step."""
    params = ModelParams()
    params.add("w", [1.0])
    with pytest.raises(MissingGradError):
        nc.adam_step(params, AdamState())


def test_adam_minimizes_quadratic():
    """Test that repeated steps drive a quadratic towards its minimum."""
    params = ModelParams()
    w = params.add("w", [5.0, -3.0])
    state = AdamState(lr=0.1)
    for _ in range(500):
        nc.zero_grad(params)
        with Tape() as tape:
            loss = nc.reduce_sum(nc.mul(w - 1.0, w - 1.0))
        nc.backward(tape, loss)
        nc.adam_step(params, state)
    np.testing.assert_allclose(w.data, [1.0, 1.0], atol=5e-2)


def test_checkpoint_roundtrip(tmp_path, rng):
    """Test that checkpoints restore names, shapes and exact values."""
    params = ModelParams()
    params.add("w", rng.normal(size=(3, 2)))
    params.add("b", rng.normal(size=2))
    params.add("s", np.array(0.25))
    path = tmp_path / "model.ckpt"
    nc.save_checkpoint(params, path)
    loaded = nc.load_checkpoint(path)
    assert loaded.equals(params)
    assert loaded["s"].shape == ()


@pytest.mark.parametrize(
    "text,message",
    [
        ("w\t2\n", "3 tab-separated"),
        ("w\tx\tAAAAAAAAAAA=\n", "bad parameter"),
        ("w\t2\tnot base64!\n", "bad parameter"),
        ("w\t2\tAAAAAAAAAAA=\n", "bad parameter"),
    ],
)
def test_load_checkpoint_rejects_bad_lines(tmp_path, text, message):
    """Test that malformed checkpoint lines raise CheckpointError with the line number."""
    path = tmp_path / "bad.ckpt"
    path.write_text(text)
    with pytest.raises(CheckpointError, match=message) as excinfo:
        nc.load_checkpoint(path)
    assert str(excinfo.value).startswith(f"{path}:1")


def test_load_checkpoint_rejects_binary(tmp_path):
    """Test that a non-text file is a CheckpointError."""
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(CheckpointError):
        nc.load_checkpoint(path)
