"""Finite-difference verification of tape gradients.

Used by the test suite to check every differentiable op against central
differences. The forward function is re-evaluated without a tape, so checks
stay cheap even for convolutional graphs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(
    forward: Callable[[], Tensor],
    param: Tensor,
    indices: Sequence[tuple],
    h: float = 1e-6,
) -> np.ndarray:
    """Central-difference gradient of a scalar-valued forward at the given coordinates."""
    grads = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = param.data[idx]
        param.data[idx] = orig + h
        fp = forward().item()
        param.data[idx] = orig - h
        fm = forward().item()
        param.data[idx] = orig
        grads[n] = (fp - fm) / (2.0 * h)
    return grads


def check_gradients(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    rtol: float = 1e-6,
    atol: float = 1e-8,
    h: float = 1e-6,
    samples: int = 24,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare tape gradients with central differences on sampled coordinates.

    Runs one taped forward/backward, then probes up to ``samples`` randomly
    chosen coordinates of each parameter numerically. Returns the worst
    absolute error seen; raises AssertionError when any coordinate exceeds
    ``atol + rtol * |numeric|``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = forward()
        tape.backward(loss)

    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        flat = np.arange(p.size)
        if p.size > samples:
            flat = rng.choice(flat, size=samples, replace=False)
        indices = [np.unravel_index(f, p.shape) for f in flat]
        numeric = numeric_grad(forward, p, indices, h=h)
        analytic = np.array([p.grad[idx] for idx in indices])
        err = np.abs(analytic - numeric)
        bound = atol + rtol * np.abs(numeric)
        if np.any(err > bound):
            k = int(np.argmax(err - bound))
            raise AssertionError(
                f"gradient mismatch at {indices[k]}: analytic={analytic[k]:.12g} "
                f"numeric={numeric[k]:.12g} err={err[k]:.3g}"
            )
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
