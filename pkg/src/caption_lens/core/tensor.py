"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records itself on the active :class:`Tape` when at least one of
its inputs requires a gradient. With no active tape the same functions are
plain numpy computations, which is how evaluation-mode forward passes run.

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # same shape as w
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar, Token
from dataclasses import dataclass
from typing import Any, TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray

from caption_lens.core.exceptions import (
    ContractError,
    DimensionError,
    NumericError,
    VocabularyLookupError,
)

logger = logging.getLogger(__name__)

FloatArray: TypeAlias = NDArray[np.float64]
BackwardFn: TypeAlias = Callable[[FloatArray], Sequence[FloatArray | None]]
Operand: TypeAlias = "Tensor | float | int | FloatArray"

_active_tape: ContextVar[Tape | None] = ContextVar(
    "caption_lens_active_tape", default=None
)


@dataclass(eq=False)
class TapeNode:
    """One recorded primitive: its output, its inputs and its gradient rule."""

    op: str
    output: Tensor
    parents: tuple[Tensor, ...]
    backward: BackwardFn
    tape: Tape


class Tape:
    """Ordered record of primitive operations for one differentiation pass.

    Tapes are single-threaded. Independent tapes may be active in different
    threads or tasks because the active tape lives in a context variable.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.consumed = False
        self._tokens: list[Token[Tape | None]] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op: str,
        output: Tensor,
        parents: tuple[Tensor, ...],
        backward: BackwardFn,
    ) -> TapeNode:
        """Append a primitive to the tape."""
        if self.consumed:
            raise ContractError(
                "Cannot record on a tape after backward(); start a new Tape"
            )
        node = TapeNode(op=op, output=output, parents=parents, backward=backward, tape=self)
        self.nodes.append(node)
        return node

    def backward(self, loss: Tensor) -> None:
        """
        Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

        Nodes are replayed in reverse recording order, so each node is visited
        once and gradients from fan-out are summed. Existing ``grad`` arrays are
        accumulated into. The tape is consumed afterwards.

        Args:
            loss: Scalar tensor produced on this tape

        Raises:
            ContractError: If the loss is not scalar or was not recorded here
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.shape}",
                details={"shape": loss.shape},
            )
        if loss.node is None or loss.node.tape is not self:
            raise ContractError("Loss was not computed on this tape")

        grads: dict[int, FloatArray] = {id(loss): np.ones_like(loss.data)}
        reached: dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            parent_grads = node.backward(upstream)
            for parent, grad in zip(node.parents, parent_grads, strict=True):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                    reached[key] = parent

        for key, tensor in reached.items():
            grad = grads[key]
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad

        logger.debug(f"Backward replayed {len(self.nodes)} nodes")
        self.nodes.clear()
        self.consumed = True


def active_tape() -> Tape | None:
    """Return the tape operations are currently recorded on, if any."""
    return _active_tape.get()


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording, e.g. for beam decoding inside a training step."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tensor:
    """Dense float64 array that can participate in a differentiation tape."""

    # Make ndarray <op> Tensor dispatch to the reflected Tensor operator.
    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data: FloatArray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return index(self, key)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value: Operand) -> Tensor:
    """Wrap a constant as a non-differentiable tensor."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    op: str, data: FloatArray, parents: tuple[Tensor, ...], backward: BackwardFn
) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = tape.record(op, out, parents, backward)
    return out


def unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
            shapes=[a.shape, b.shape],
        ) from e


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", ta, tb)
    return _result(
        "add",
        ta.data + tb.data,
        (ta, tb),
        lambda g: (unbroadcast(g, ta.shape), unbroadcast(g, tb.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", ta, tb)
    return _result(
        "sub",
        ta.data - tb.data,
        (ta, tb),
        lambda g: (unbroadcast(g, ta.shape), unbroadcast(-g, tb.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", ta, tb)
    return _result(
        "mul",
        ta.data * tb.data,
        (ta, tb),
        lambda g: (
            unbroadcast(g * tb.data, ta.shape),
            unbroadcast(g * ta.data, tb.shape),
        ),
    )


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", ta, tb)
    return _result(
        "div",
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            unbroadcast(g / tb.data, ta.shape),
            unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


# Linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, batched over leading axes.

    Raises:
        DimensionError: If the inner extents or batch axes are incompatible
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: cannot multiply {a.shape} by {b.shape}",
            shapes=[a.shape, b.shape],
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(
            f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast",
            shapes=[a.shape, b.shape],
        ) from e

    def backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        order = list(range(a.ndim))
        if a.ndim >= 2:
            order[-1], order[-2] = order[-2], order[-1]
    else:
        order = list(axes)
    inverse = np.argsort(order)
    return _result(
        "transpose",
        np.transpose(a.data, order),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(shape)
    try:
        data = a.data.reshape(target)
    except ValueError as e:
        raise DimensionError(
            f"reshape: cannot view {a.shape} as {target}", shapes=[a.shape, target]
        ) from e
    return _result("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; other extents must agree."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    parts = tuple(tensors)
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(
            f"concat along axis {axis}: incompatible shapes",
            shapes=[t.shape for t in parts],
        ) from e
    offsets = np.cumsum([t.shape[axis] for t in parts])[:-1]
    return _result(
        "concat", data, parts, lambda g: tuple(np.split(g, offsets, axis=axis))
    )


def index(a: Tensor, key: Any) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""

    def backward(g: FloatArray) -> tuple[FloatArray]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _result("index", np.asarray(a.data[key], dtype=np.float64), (a,), backward)


def embedding_lookup(table: Tensor, ids: ArrayLike) -> Tensor:
    """
    Gather rows of ``table`` for integer ``ids``.

    Raises:
        VocabularyLookupError: If any id is outside ``[0, rows)``
    """
    token_ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    bad = token_ids[(token_ids < 0) | (token_ids >= rows)]
    if bad.size:
        raise VocabularyLookupError(
            f"Token id {int(bad[0])} is outside the vocabulary of size {rows}",
            token_id=int(bad[0]),
            vocab_size=rows,
        )

    def backward(g: FloatArray) -> tuple[FloatArray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, token_ids, g)
        return (grad,)

    return _result("embedding_lookup", table.data[token_ids], (table,), backward)


# Reductions


def _expand_reduced(
    g: FloatArray, shape: tuple[int, ...], axis: int | None, keepdims: bool
) -> FloatArray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _result(
        "sum",
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractError("mean over an empty axis", details={"shape": a.shape})
    return _result(
        "mean",
        np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


# Nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _result(
        "relu", np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,)
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def _require_finite(op: str, a: Tensor) -> None:
    if not np.isfinite(a.data).all():
        raise NumericError(
            f"{op} received non-finite input",
            details={"nan_count": int(np.isnan(a.data).sum())},
        )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """
    Max-shifted softmax along ``axis``.

    Raises:
        NumericError: If the input contains NaN or infinite values
    """
    _require_finite("softmax", a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(
        "softmax",
        y,
        (a,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite("log_softmax", a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(y)
    return _result(
        "log_softmax",
        y,
        (a,),
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5
) -> Tensor:
    """
    Normalise the last axis to zero mean and unit variance, then apply gain/bias.

    Raises:
        ContractError: If the last axis has fewer than two entries
    """
    width = x.shape[-1] if x.ndim else 0
    if width < 2:
        raise ContractError(
            f"layer_norm needs a last axis of at least 2, got {x.shape}",
            details={"shape": x.shape},
        )
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    x_hat = centred * inv_std

    def backward(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        d_hat = g * gain.data
        grad_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return (
            grad_x,
            unbroadcast(g * x_hat, gain.shape),
            unbroadcast(g, bias.shape),
        )

    return _result(
        "layer_norm", x_hat * gain.data + bias.data, (x, gain, bias), backward
    )


def dropout(
    x: Tensor,
    keep_prob: float,
    train: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """
    Inverted dropout: keep entries with probability ``keep_prob`` and rescale.

    Identity in evaluation mode or when ``keep_prob`` is 1.

    Raises:
        ContractError: If ``keep_prob`` is outside ``(0, 1]`` or no rng is given
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(
            f"keep_prob must be in (0, 1], got {keep_prob}",
            details={"keep_prob": keep_prob},
        )
    if not train or keep_prob == 1.0:
        return x
    if rng is None:
        raise ContractError("Training-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return mul(x, Tensor(mask))
