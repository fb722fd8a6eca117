"""Symmetric InfoNCE over a batch of image/text embedding pairs."""
import math
from typing import Literal

import numpy as np

from medimp.numerics import Tensor, log_softmax
from medimp.numerics.tensor import as_tensor

NORM_EPS = 1e-12
DEFAULT_MAX_LOGIT_SCALE = 100.0

Direction = Literal["i2t", "t2i"]


def cosine_similarity_matrix(f_i, f_t) -> Tensor:
    """Entry (b, k) is the cosine between image embedding b and text embedding k."""
    f_i, f_t = as_tensor(f_i), as_tensor(f_t)
    a = f_i / ((f_i * f_i).sum(axis=1, keepdims=True) + NORM_EPS**2).sqrt()
    b = f_t / ((f_t * f_t).sum(axis=1, keepdims=True) + NORM_EPS**2).sqrt()
    return a @ b.T


def _diagonal_nll(logits: Tensor, axis: int) -> Tensor:
    n = logits.shape[0]
    idx = np.arange(n)
    return -log_softmax(logits, axis=axis)[idx, idx].sum()


def info_nce_directional(sim, tau, direction: Direction = "i2t") -> Tensor:
    """Sum over pairs of the negative log-probability of the matching column (i2t) or row (t2i)."""
    logits = as_tensor(sim) / tau
    if direction == "i2t":
        return _diagonal_nll(logits, axis=1)
    if direction == "t2i":
        return _diagonal_nll(logits, axis=0)
    raise ValueError(f"unknown direction {direction!r}")


def contrastive_loss(f_i, f_t, logit_scale, max_logit_scale: float = DEFAULT_MAX_LOGIT_SCALE) -> Tensor:
    """Mean of both directional losses at temperature 1 / exp(min(s, ln max_logit_scale))."""
    scale = as_tensor(logit_scale).clip(hi=math.log(max_logit_scale)).exp()
    logits = cosine_similarity_matrix(f_i, f_t) * scale
    return (_diagonal_nll(logits, axis=1) + _diagonal_nll(logits, axis=0)) * 0.5


def clamp_logit_scale(s: float, max_logit_scale: float = DEFAULT_MAX_LOGIT_SCALE) -> float:
    return min(float(s), math.log(max_logit_scale))


def initial_logit_scale(temperature: float) -> float:
    return math.log(1.0 / temperature)
