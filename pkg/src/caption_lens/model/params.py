"""Named parameter storage and the small building blocks shared by all layers."""

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from caption_lens.core.exceptions import CheckpointError
from caption_lens.core.tensor import FloatArray, Tensor, add, layer_norm, matmul, relu

logger = logging.getLogger(__name__)


class ModelParams:
    """Ordered store of every learnable tensor, keyed by a dotted name.

    Names mirror the module structure (``encoder.layer0.attention.w_q``) so
    optimiser state, gradient checks and checkpoints can all address a tensor
    the same way.
    """

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: FloatArray) -> Tensor:
        """Register a new parameter; names must be unique."""
        if name in self._tensors:
            raise ValueError(f"Duplicate parameter name: {name}")
        if not np.isfinite(data).all():
            raise ValueError(f"Parameter {name} initialised with non-finite values")
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self._tensors.items()

    def as_dict(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters whose name starts with ``prefix``."""
        return {k: v for k, v in self._tensors.items() if k.startswith(prefix)}

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def grads(self) -> dict[str, FloatArray]:
        """Current gradients, zeros for parameters the last pass did not reach."""
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in self._tensors.items()
        }

    def state_dict(self) -> dict[str, FloatArray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, FloatArray]) -> None:
        """
        Copy values into the existing tensors.

        Raises:
            CheckpointError: If names or shapes differ from this store
        """
        missing = [n for n in self._tensors if n not in state]
        unexpected = [n for n in state if n not in self._tensors]
        if missing or unexpected:
            raise CheckpointError(
                "Checkpoint parameters do not match the model",
                parameter=(missing or unexpected)[0],
                details={"missing": len(missing), "unexpected": len(unexpected)},
            )
        for name, tensor in self._tensors.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {value.shape}, "
                    f"model {tensor.shape}",
                    parameter=name,
                )
            tensor.data[...] = value


def xavier(rng: np.random.Generator, rows: int, cols: int) -> FloatArray:
    """Glorot-uniform initialisation for a ``rows × cols`` matrix."""
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class LinearParams:
    """Affine map ``x @ weight + bias`` with weight ``d_in × d_out``."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(
        cls,
        store: ModelParams,
        name: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
    ) -> "LinearParams":
        return cls(
            weight=store.add(f"{name}.weight", xavier(rng, d_in, d_out)),
            bias=store.add(f"{name}.bias", np.zeros((1, d_out))),
        )


def linear(x: Tensor, params: LinearParams) -> Tensor:
    return add(matmul(x, params.weight), params.bias)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ModelParams, name: str, width: int) -> "LayerNormParams":
        return cls(
            gain=store.add(f"{name}.gain", np.ones((1, width))),
            bias=store.add(f"{name}.bias", np.zeros((1, width))),
        )


def apply_layer_norm(x: Tensor, params: LayerNormParams, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, params.gain, params.bias, eps=eps)


@dataclass
class FeedForwardParams:
    """Position-wise ``relu(x W1 + b1) W2 + b2`` with inner width d_ff."""

    inner: LinearParams
    outer: LinearParams

    @classmethod
    def create(
        cls,
        store: ModelParams,
        name: str,
        d_model: int,
        d_ff: int,
        rng: np.random.Generator,
    ) -> "FeedForwardParams":
        return cls(
            inner=LinearParams.create(store, f"{name}.inner", d_model, d_ff, rng),
            outer=LinearParams.create(store, f"{name}.outer", d_ff, d_model, rng),
        )


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    return linear(relu(linear(x, params.inner)), params.outer)
