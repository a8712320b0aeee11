"""Adam with bias correction, the inverse-square-root warmup schedule and norm clipping."""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from caption_lens.core.exceptions import ContractError
from caption_lens.core.tensor import FloatArray, Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """First and second moment estimates keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    first_moment: dict[str, FloatArray] = field(default_factory=dict)
    second_moment: dict[str, FloatArray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(
                "Adam betas must lie in [0, 1)",
                details={"beta1": self.beta1, "beta2": self.beta2},
            )
        if self.eps <= 0.0:
            raise ContractError(f"Adam eps must be positive, got {self.eps}")


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, FloatArray],
    state: OptimizerState,
    lr: float,
) -> OptimizerState:
    """
    Apply one Adam update to ``params`` in place.

    Args:
        params: Named parameter tensors
        grads: Gradient for every parameter, same shapes
        state: Moment estimates, updated in place
        lr: Learning rate for this step

    Returns:
        The updated state

    Raises:
        ContractError: If a gradient is missing or its shape differs from the
            parameter or the stored moments
    """
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError("Missing gradients", details={"parameters": ", ".join(missing)})

    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step

    for name, tensor in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ContractError(
                f"Gradient shape {grad.shape} does not match parameter {name} {tensor.shape}"
            )
        m = state.first_moment.setdefault(name, np.zeros_like(tensor.data))
        v = state.second_moment.setdefault(name, np.zeros_like(tensor.data))
        if m.shape != tensor.shape or v.shape != tensor.shape:
            raise ContractError(f"Optimizer moments for {name} have the wrong shape")

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        tensor.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)

    return state


def warmup_lr(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """``factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``; steps count from 1."""
    if step < 1:
        raise ContractError(f"Schedule steps start at 1, got {step}")
    if warmup < 1:
        raise ContractError(f"Warmup must be at least 1 step, got {warmup}")
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def global_norm(grads: Mapping[str, FloatArray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(
    grads: Mapping[str, FloatArray], max_norm: float
) -> tuple[dict[str, FloatArray], float]:
    """
    Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    logger.debug(f"Clipping gradient norm {norm:.4f} to {max_norm}")
    return {name: g * scale for name, g in grads.items()}, norm
