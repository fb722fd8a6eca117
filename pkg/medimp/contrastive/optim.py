"""Adam with decoupled weight decay and the warmup + cosine learning-rate schedule."""
import math
from typing import Callable, Mapping, Sequence

import numpy as np

from medimp.config import TrainConfig
from medimp.numerics import Parameter


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at the final epoch."""
    w, total, base = config.warmup_epochs, config.epochs, config.base_lr
    epoch = min(max(float(epoch), 0.0), float(total))
    if epoch < w:
        return base * epoch / w
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (total - w)))


def adamw_step(
    params: Sequence[Parameter],
    grads: Mapping[str, np.ndarray],
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    lr: float,
    wd: float,
    beta1: float,
    beta2: float,
    t: int,
    eps: float = 1e-8,
    decay: Callable[[Parameter], bool] = lambda p: True,
) -> None:
    """One bias-corrected Adam update at step ``t`` (from 1); decay is ``p <- p * (1 - lr * wd)``.

    Frozen parameters are left untouched.
    """
    if t < 1:
        raise ValueError(f"optimizer step count starts at 1, got {t}")
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = moments.get(p.name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        moments[p.name] = (m, v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        value = p.data * (1.0 - lr * wd) if decay(p) else p.data
        p.data = value - lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Stateful wrapper; gains, biases and other 1D/scalar tensors are not decayed."""

    def __init__(self, params: Sequence[Parameter], config: TrainConfig, no_decay: Sequence[str] = ()):
        self.params = list(params)
        self.config = config
        self.no_decay = set(no_decay)
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def should_decay(self, p: Parameter) -> bool:
        return p.ndim >= 2 and p.name not in self.no_decay

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c = self.config
        adamw_step(
            self.params, grads, self.moments, lr, c.weight_decay, c.beta1, c.beta2, self.t, c.adam_eps, self.should_decay
        )
