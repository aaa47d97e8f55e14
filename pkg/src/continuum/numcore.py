"""Minimal dense-tensor core with reverse-mode differentiation and Adam.

Tensors wrap float64 numpy arrays. Operations executed while a ``Tape`` is
active, on inputs that require gradients, are recorded on that tape in
execution order; ``backward`` replays the tape in reverse. The active tape is
held in a context variable, so each thread records onto its own tape.

    with Tape() as tape:
        loss = reduce_sum(mul(w, w))
    backward(tape, loss)   # w.grad == 2 * w.data
"""

from __future__ import annotations

import base64
from collections.abc import Callable, Iterator, Sequence
from contextvars import ContextVar, Token
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import (
    CheckpointError,
    MissingGradError,
    NotScalarError,
    ShapeMismatchError,
)


Array = NDArray[np.float64]
GradFn = Callable[[Array], Sequence[Array | None]]

_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("continuum_active_tape", default=None)


class Tensor:
    """A float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarError(f"item() needs one element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, _lift(other))

    def __radd__(self, other: float) -> Tensor:
        return add(_lift(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, _lift(other))

    def __rsub__(self, other: float) -> Tensor:
        return sub(_lift(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, _lift(other))

    def __rmul__(self, other: float) -> Tensor:
        return mul(_lift(other), self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return div(self, _lift(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _lift(value: Tensor | float) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    """One recorded primitive: its inputs, output, and local gradient rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


@dataclass
class Tape:
    """Ordered record of primitives; entries are appended as they execute."""

    entries: list[TapeEntry] = field(default_factory=list)
    _token: Token[Tape | None] | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(
    op: str, data: Array, inputs: tuple[Tensor, ...], grad_fn: GradFn
) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _ACTIVE_TAPE.get()
    if requires and tape is not None:
        tape.entries.append(TapeEntry(op, inputs, out, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor the loss depends on.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad``
    between steps to reset them.

    Args:
        tape: Tape the loss was computed under.
        loss: Scalar tensor.

    Raises:
        NotScalarError: If ``loss`` has more than one element.
    """
    if loss.size != 1:
        raise NotScalarError(f"backward() needs a scalar loss, got shape {loss.shape}")

    produced = {id(entry.output) for entry in tape.entries}
    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}

    for entry in reversed(tape.entries):
        upstream = pending.pop(id(entry.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.grad_fn(upstream), strict=True):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in produced:
                pending[key] = pending[key] + grad if key in pending else grad
            elif tensor.grad is None:
                tensor.grad = np.array(grad, dtype=np.float64)
            else:
                tensor.grad = tensor.grad + grad

    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape)


# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _record(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return _record(
        "matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


# Shape manipulation


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last one by default)."""
    if not tensors:
        raise ShapeMismatchError("concat")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeMismatchError("concat", *(t.shape for t in tensors))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: np.split(g, bounds, axis=ax),
    )


def narrow(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice ``[start, stop)`` along one axis."""
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeMismatchError(f"slice[{start}:{stop}]", a.shape)
    index = tuple(slice(start, stop) if i == ax else slice(None) for i in range(a.ndim))

    def grad_fn(g: Array) -> tuple[Array]:
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record("slice", a.data[index], (a,), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def index_select(a: Tensor, index: NDArray[np.int64]) -> Tensor:
    """Gather rows ``a[index]``."""
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeMismatchError("index_select", a.shape, (int(index.max()) + 1,))

    def grad_fn(g: Array) -> tuple[Array]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("index_select", a.data[index], (a,), grad_fn)


def index_add(a: Tensor, index: NDArray[np.int64], n_rows: int) -> Tensor:
    """Scatter-add rows: ``out[index[i]] += a[i]`` into ``n_rows`` rows."""
    if index.shape[0] != a.shape[0]:
        raise ShapeMismatchError("index_add", a.shape, index.shape)
    out = np.zeros((n_rows, *a.shape[1:]), dtype=np.float64)
    np.add.at(out, index, a.data)
    return _record("index_add", out, (a,), lambda g: (g[index],))


# Reductions


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def grad_fn(g: Array) -> tuple[Array]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn)


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeMismatchError("mean", a.shape)

    def grad_fn(g: Array) -> tuple[Array]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn)


# Nonlinearities


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(
        "softmax",
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _record("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Leaky ReLU with a learnable negative slope (a one-element tensor)."""
    if slope.size != 1:
        raise ShapeMismatchError("prelu", a.shape, slope.shape)
    alpha = float(slope.data.reshape(-1)[0])
    positive = a.data > 0
    out = np.where(positive, a.data, alpha * a.data)
    return _record(
        "prelu",
        out,
        (a, slope),
        lambda g: (
            g * np.where(positive, 1.0, alpha),
            np.array(np.sum(g * np.where(positive, 0.0, a.data))).reshape(slope.shape),
        ),
    )


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(
        "clamp", np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),)
    )


def dropout(
    a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p).

    Identity when ``train`` is false or ``p == 0``.
    """
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


# Parameters, optimizer, checkpoints


class ModelParams:
    """Ordered collection of named parameter tensors.

    Registration order is the canonical order for flattening and checkpoints.
    """

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: ArrayLike) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"parameter {name!r} already registered")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def flatten(self) -> Array:
        """All parameter values concatenated in registration order."""
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def assign_flat(self, values: ArrayLike) -> None:
        """Overwrite every parameter from a flat vector (inverse of ``flatten``)."""
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        if flat.size != self.num_values:
            raise ShapeMismatchError("assign_flat", (self.num_values,), flat.shape)
        offset = 0
        for tensor in self._tensors.values():
            tensor.data = flat[offset : offset + tensor.size].reshape(tensor.shape).copy()
            offset += tensor.size

    def copy_from(self, other: ModelParams) -> None:
        self.assign_flat(other.flatten())

    def equals(self, other: ModelParams) -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[name].data, other[name].data) for name in self
        )


def zero_grad(params: ModelParams) -> None:
    """Reset every parameter gradient to zeros."""
    for tensor in params.tensors():
        tensor.grad = np.zeros_like(tensor.data)


@dataclass
class AdamState:
    """Adam moments and hyperparameters (canonical defaults)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients are left untouched; reset them with ``zero_grad``.

    Raises:
        MissingGradError: If a parameter has no gradient.
    """
    for name, tensor in params.items():
        if tensor.grad is None:
            raise MissingGradError(name)
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, tensor in params.items():
        grad = tensor.grad
        assert grad is not None
        m = state.m.get(name, np.zeros_like(tensor.data))
        v = state.v.get(name, np.zeros_like(tensor.data))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write ``name TAB shape TAB base64(little-endian f64)`` lines in registration order."""
    lines = []
    for name, tensor in params.items():
        shape = ",".join(str(d) for d in tensor.shape)
        payload = base64.b64encode(tensor.data.astype("<f8").tobytes()).decode("ascii")
        lines.append(f"{name}\t{shape}\t{payload}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: If a line is not ``name, shape, base64 payload`` or the
            payload does not match its shape.
    """
    params = ModelParams()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: checkpoint is not UTF-8 text")
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise CheckpointError(f"{path}:{line_no}: expected 3 tab-separated fields")
        name, shape_text, payload = fields
        try:
            shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
            raw = base64.b64decode(payload, validate=True)
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params.add(name, data)
        except ValueError as e:
            raise CheckpointError(f"{path}:{line_no}: bad parameter {name!r} ({e})")
    return params


def numerical_gradient(
    fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5
) -> Array:
    """Central finite-difference gradient of a scalar ``fn()`` w.r.t. ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_check(
    fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-2
) -> float:
    """Largest relative error between tape gradients and finite differences.

    The relative error of each entry is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, t, h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale, initial=0.0)))
    return worst
