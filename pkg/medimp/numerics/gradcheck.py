"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from medimp.numerics.tensor import Parameter, Tape, Tensor, backward

logger = logging.getLogger(__name__)

REL_ERROR_FLOOR = 1e-8
DEFAULT_STEP = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR)


def checkable_parameters(params: Sequence[Parameter]) -> list[Parameter]:
    """Drop attention key biases.

    Adding the same bias to every key shifts each score row by a constant,
    which softmax ignores, so their exact gradient is zero and a central
    difference returns only rounding noise.
    """
    return [p for p in params if not (p.name == "k.bias" or p.name.endswith(".k.bias"))]


def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Parameter]) -> dict[str, np.ndarray]:
    with Tape() as tape:
        loss = f()
    return backward(tape, loss, params)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = DEFAULT_STEP,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds a scalar loss from the current parameter values. With
    ``coords`` set, only that many randomly chosen coordinates per parameter
    are perturbed.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    grads = analytic_gradients(f, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            indices = rng.choice(flat.size, size=coords, replace=False)
        analytic = grads[p.name].reshape(-1)
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            plus = f().item()
            flat[i] = original - h
            minus = f().item()
            flat[i] = original
            err = relative_error(analytic[i], (plus - minus) / (2.0 * h))
            if err > worst:
                worst = err
    logger.debug("grad_check over %d parameters: max relative error %.3e", len(params), worst)
    return worst
