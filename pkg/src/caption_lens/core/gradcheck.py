"""Central finite-difference verification of tape gradients."""

import logging
from collections.abc import Callable, Iterable, Mapping

import numpy as np
from pydantic import BaseModel, Field

from caption_lens.core.tensor import Tape, Tensor, no_tape

logger = logging.getLogger(__name__)


class ParameterCheck(BaseModel):
    """Gradient agreement for one parameter tensor."""

    name: str
    shape: list[int]
    entries_checked: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


class GradCheckReport(BaseModel):
    """Per-parameter comparison of analytic and numerical gradients."""

    step: float
    tolerance: float
    abs_floor: float
    loss: float
    parameters: list[ParameterCheck] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.parameters)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.parameters), default=0.0)

    @property
    def failures(self) -> list[ParameterCheck]:
        return [p for p in self.parameters if not p.passed]


def _entries(
    size: int, max_entries: int | None, rng: np.random.Generator
) -> Iterable[int]:
    if max_entries is None or max_entries >= size:
        return range(size)
    return sorted(rng.choice(size, size=max_entries, replace=False).tolist())


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-2,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare tape gradients of ``f`` against central differences.

    ``f`` reads the current values of ``params`` and must be deterministic:
    disable dropout or reseed its generator on every call. The relative error
    of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``.

    Args:
        f: Zero-argument closure returning a scalar loss tensor
        params: Named tensors to perturb; mutated in place and restored
        step: Central-difference step
        tol: Maximum relative error for a parameter to pass
        abs_floor: Denominator floor for near-zero gradients
        max_entries: Check a seeded sample of this many entries per parameter
        seed: Seed for entry sampling

    Returns:
        GradCheckReport with one entry per parameter; never raises on mismatch
    """
    for tensor in params.values():
        tensor.zero_grad()

    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(
        step=step, tolerance=tol, abs_floor=abs_floor, loss=loss.item()
    )

    with no_tape():
        for name, tensor in params.items():
            flat = tensor.data.reshape(-1)
            grad_flat = analytic[name].reshape(-1)
            worst_rel = 0.0
            worst_abs = 0.0
            checked = 0
            for i in _entries(flat.size, max_entries, rng):
                original = flat[i]
                flat[i] = original + step
                plus = f().item()
                flat[i] = original - step
                minus = f().item()
                flat[i] = original

                numeric = (plus - minus) / (2.0 * step)
                error = abs(grad_flat[i] - numeric)
                scale = max(abs(grad_flat[i]), abs(numeric), abs_floor)
                worst_abs = max(worst_abs, error)
                worst_rel = max(worst_rel, error / scale)
                checked += 1

            report.parameters.append(
                ParameterCheck(
                    name=name,
                    shape=list(tensor.shape),
                    entries_checked=checked,
                    max_abs_error=float(worst_abs),
                    max_rel_error=float(worst_rel),
                    passed=worst_rel < tol,
                )
            )
            if worst_rel >= tol:
                logger.warning(
                    f"Gradient mismatch for {name}: rel error {worst_rel:.3e}"
                )

    logger.info(
        f"Gradient check over {len(report.parameters)} parameters: "
        f"max rel error {report.max_rel_error:.3e}"
    )
    return report
