"""
Finite-Difference Gradient Oracle

Certifies analytic backward rules against central differences in float64.

The checked function is projected onto a fixed random direction before
differentiation, so every output element contributes with a distinct weight.
A plain sum would hide errors that cancel (batch norm outputs sum to beta).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import DiffArray, no_grad
from errors import PreconditionError

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
# Denominator floor for the relative error; gradients smaller than this are
# compared on an absolute scale.
RELATIVE_FLOOR = 1e-4

NamedInputs = Union[Dict[str, DiffArray], Sequence[Tuple[str, DiffArray]]]


@dataclass
class InputCheck:
    """Worst disagreement found for one input array."""
    name: str
    max_rel_error: float
    worst_index: Optional[Tuple[int, ...]]
    analytic: float
    numeric: float
    checked: int


@dataclass
class CheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    inputs: List[InputCheck] = field(default_factory=list)
    failure: Optional[str] = None

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"
        if self.failure:
            text += f" ({self.failure})"
        return text


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[[], DiffArray], inputs: NamedInputs, eps: float = DEFAULT_EPS,
               tol: float = DEFAULT_TOL, seed: int = 0, max_elements: Optional[int] = None,
               floor: float = RELATIVE_FLOOR) -> CheckReport:
    """
    Compare the tape gradient of fn with central differences.

    Args:
        fn: zero-argument callable recomputing the output from the inputs
        inputs: named float64 arrays to differentiate with respect to
        eps: finite-difference step
        tol: pass threshold on the maximum relative error
        seed: seed of the output projection and of element sampling
        max_elements: check at most this many randomly chosen elements per input

    Returns:
        CheckReport; a non-finite gradient fails the check with its location
    """
    named = list(inputs.items()) if isinstance(inputs, dict) else list(inputs)
    for name, array in named:
        if array.dtype != np.float64:
            raise PreconditionError("grad_check", f"input '{name}' must be float64, got {array.dtype}")
        array.requires_grad = True
        array.grad = None

    output = fn()
    if output.dtype != np.float64:
        raise PreconditionError("grad_check", f"function output must be float64, got {output.dtype}")
    projection = np.random.default_rng(seed).standard_normal(output.shape)
    output.backward(projection)

    def objective() -> float:
        with no_grad():
            value = fn()
        return float(np.sum(value.data * projection))

    sampler = np.random.default_rng(seed + 1)
    results: List[InputCheck] = []
    failure: Optional[str] = None
    overall = 0.0

    for name, array in named:
        analytic_full = array.grad if array.grad is not None else np.zeros_like(array.data)
        bad = np.argwhere(~np.isfinite(analytic_full))
        if bad.size:
            failure = f"{name}: non-finite analytic gradient at {tuple(int(i) for i in bad[0])}"
            results.append(InputCheck(name, float("inf"), tuple(int(i) for i in bad[0]),
                                      float("nan"), float("nan"), 0))
            overall = float("inf")
            continue

        if max_elements is not None and array.size > max_elements:
            indices = np.sort(sampler.choice(array.size, size=max_elements, replace=False))
        else:
            indices = np.arange(array.size)

        flat = array.data.reshape(-1)
        worst = InputCheck(name, 0.0, None, 0.0, 0.0, len(indices))
        for flat_index in indices:
            original = flat[flat_index]
            flat[flat_index] = original + eps
            plus = objective()
            flat[flat_index] = original - eps
            minus = objective()
            flat[flat_index] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = float(analytic_full.reshape(-1)[flat_index])
            location = tuple(int(i) for i in np.unravel_index(flat_index, array.shape))
            if not np.isfinite(numeric):
                failure = failure or f"{name}: non-finite numeric gradient at {location}"
                worst = InputCheck(name, float("inf"), location, analytic, numeric, len(indices))
                break
            error = relative_error(analytic, numeric, floor)
            if error > worst.max_rel_error:
                worst = InputCheck(name, error, location, analytic, numeric, len(indices))
        results.append(worst)
        overall = max(overall, worst.max_rel_error)

    passed = failure is None and overall <= tol
    if failure is None and not passed:
        worst_input = max(results, key=lambda r: r.max_rel_error)
        failure = (f"{worst_input.name}{list(worst_input.worst_index)}: analytic {worst_input.analytic:.6e} "
                   f"vs numeric {worst_input.numeric:.6e}")
    return CheckReport(passed=passed, max_rel_error=overall, tol=tol, inputs=results, failure=failure)
