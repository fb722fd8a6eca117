"""Exact t-SNE for a few hundred points."""
import logging

import numpy as np

from medimp.exceptions import ConfigError
from medimp.seeds import derive_rng

logger = logging.getLogger(__name__)

EXAGGERATION = 12.0
MIN_GAIN = 0.01
PERPLEXITY_TOL = 1e-3
MAX_BISECTION_STEPS = 200


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_distribution(d: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Gaussian neighbour probabilities for one row and their entropy in nats."""
    shifted = d - d.min()
    p = np.exp(-beta * shifted)
    total = p.sum()
    p /= total
    entropy = float(beta * (p * shifted).sum() + np.log(total))
    return p, entropy


def conditional_probabilities(x: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P(j | i) with each row's bandwidth bisected to the target perplexity.

    Returns the matrix and the per-row precisions.
    """
    n = len(x)
    if not 3.0 * perplexity < n:
        raise ConfigError(f"perplexity {perplexity} is infeasible for {n} points; need 3 * perplexity < n")
    d = squared_distances(np.asarray(x, dtype=np.float64))
    target = np.log(perplexity)
    p = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        others = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(MAX_BISECTION_STEPS):
            row, entropy = _row_distribution(others, beta)
            if abs(np.exp(entropy) - perplexity) < PERPLEXITY_TOL:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else (beta + lo) / 2.0
        else:
            logger.warning("t-SNE bandwidth for row %d did not converge (perplexity %.4f)", i, np.exp(entropy))
        betas[i] = beta
        p[i, np.arange(n) != i] = row
    return p, betas


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    conditional, _ = conditional_probabilities(x, perplexity)
    joint = conditional + conditional.T
    return joint / joint.sum()


def tsne_2d(
    x: np.ndarray,
    perplexity: float = 15.0,
    iterations: int = 500,
    seed: int = 0,
    learning_rate: float = 200.0,
) -> np.ndarray:
    """Embed the rows of ``x`` in the plane.

    Gradient descent with per-coordinate gains; early exaggeration and
    momentum 0.5 for the first quarter of the iterations, momentum 0.8 after.
    """
    if iterations < 1:
        raise ConfigError(f"t-SNE needs at least one iteration, got {iterations}")
    p = joint_probabilities(x, perplexity)
    n = len(p)
    y = derive_rng("tsne", seed).normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    early = max(1, iterations // 4)
    for it in range(iterations):
        exaggeration, momentum = (EXAGGERATION, 0.5) if it < early else (1.0, 0.8)
        num = 1.0 / (1.0 + squared_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (exaggeration * p - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        reversing = velocity * grad < 0.0
        gains = np.maximum(np.where(reversing, gains + 0.2, gains * 0.8), MIN_GAIN)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    if not np.isfinite(y).all():
        raise ConfigError("t-SNE diverged; lower the learning rate")
    kl = float((p[p > 0] * np.log(p[p > 0] / q[p > 0])).sum())
    logger.info("t-SNE on %d points: %d iterations, final KL %.4f", n, iterations, kl)
    return y
