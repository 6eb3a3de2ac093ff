# autograd/gradcheck.py
"""Central finite-difference check of analytic gradients."""
from typing import Callable, Optional

import numpy as np

from exceptions import ShapeError
from autograd.tensor import Tape, Tensor, backward, no_grad

DENOMINATOR_FLOOR = 1e-8


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = list(out.shape) if isinstance(out, Tensor) else type(out).__name__
        raise ShapeError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare backward() of `f` at `x` against central differences.

    Args:
        f: deterministic scalar-valued tensor function
        x: point to check at (promoted to float64)
        eps: finite-difference step
        max_elements: check only this many randomly chosen elements
        rng: generator for that choice

    Returns:
        max over checked elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with Tape.scope():
        probe = Tensor(base.copy(), requires_grad=True)
        out = f(probe)
        _scalar(out)
        backward(out, inputs=[probe])
        analytic = probe.grad.reshape(-1)

    indices = np.arange(base.size)
    if max_elements is not None and max_elements < base.size:
        rng = rng or np.random.default_rng(0)
        indices = np.sort(rng.choice(base.size, size=max_elements, replace=False))

    worst = 0.0
    with no_grad():
        for index in indices:
            shifted = base.copy()
            shifted.flat[index] += eps
            f_plus = _scalar(f(Tensor(shifted)))
            shifted.flat[index] -= 2 * eps
            f_minus = _scalar(f(Tensor(shifted)))
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[index])
            error = abs(a - numeric) / max(abs(a), abs(numeric), DENOMINATOR_FLOOR)
            worst = max(worst, error)
    return worst
