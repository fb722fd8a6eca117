"""Light transformer over the four follow-up exam embeddings, tolerant of missing exams."""
import logging
import math
from dataclasses import dataclass

import numpy as np

from medimp.config import DownstreamConfig, TrainConfig
from medimp.contrastive.optim import AdamW, lr_at
from medimp.encoders import ParameterStore
from medimp.encoders.text import TransformerBlock
from medimp.exceptions import ShapeError
from medimp.numerics import Parameter, Tape, Tensor, backward, concat, linear
from medimp.schemas import Exam

logger = logging.getLogger(__name__)

N_SLOTS = len(Exam)


@dataclass(frozen=True)
class ExamSequence:
    """Per-exam embeddings in D15, D30, M3, M12 order; absent slots are masked out."""

    embeddings: np.ndarray  # (4, D)
    mask: np.ndarray  # (4,) bool

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != N_SLOTS:
            raise ShapeError(f"exam sequence needs shape ({N_SLOTS}, D), got {self.embeddings.shape}")
        if self.mask.shape != (N_SLOTS,):
            raise ShapeError(f"exam mask needs shape ({N_SLOTS},), got {self.mask.shape}")
        if not self.mask.any():
            raise ShapeError("exam sequence has no present exam")


class SequenceHead:
    """A classification token attends over the present exam slots; a sigmoid reads it out."""

    def __init__(self, width: int, config: DownstreamConfig | None = None, seed: int = 0, prefix: str = "head"):
        config = config or DownstreamConfig()
        if width % config.heads:
            raise ShapeError(f"embedding width {width} must be divisible by {config.heads} heads")
        self.width = width
        self.config = config
        self.store = ParameterStore(seed)
        self.cls_token = self.store.normal(f"{prefix}.cls", (1, 1, width), 0.02)
        self.position = self.store.normal(f"{prefix}.position", (1, N_SLOTS, width), 0.02)
        self.block = TransformerBlock.create(self.store, f"{prefix}.block", width, config.heads, config.ff_width)
        self.out_weight = self.store.normal(f"{prefix}.out.weight", (width, 1), 1.0 / math.sqrt(width))
        self.out_bias = self.store.zeros(f"{prefix}.out.bias", 1)

    def parameters(self) -> list[Parameter]:
        return list(self.store)

    def logits(self, embeddings, mask) -> Tensor:
        """(B, 4, D) embeddings and (B, 4) presence mask to (B,) logits."""
        x = np.asarray(embeddings, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if x.ndim == 2:
            x, mask = x[None], mask[None]
        if x.shape[1:] != (N_SLOTS, self.width) or mask.shape != x.shape[:2]:
            raise ShapeError(f"expected embeddings (B, {N_SLOTS}, {self.width}) and mask (B, {N_SLOTS}), got {x.shape} and {mask.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("every exam sequence needs at least one present exam")
        b = x.shape[0]
        # zeroed so non-finite values in absent slots cannot reach the masked products
        x = np.where(mask[..., None], x, 0.0)
        tokens = concat([self.cls_token + np.zeros((b, 1, self.width)), self.position + x], axis=1)
        full_mask = np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1)
        h = self.block(tokens, full_mask)
        return linear(h[:, 0, :], self.out_weight, self.out_bias).reshape(b)

    def forward(self, embeddings, mask) -> np.ndarray:
        return self.logits(embeddings, mask).sigmoid().data

    __call__ = forward

    def loss(self, embeddings, mask, labels) -> Tensor:
        """Mean binary cross-entropy, written with softplus for stability."""
        z = self.logits(embeddings, mask)
        y = np.asarray(labels, dtype=np.float64)
        return ((-z).softplus() * y + z.softplus() * (1.0 - y)).mean()

    def fit(self, embeddings, mask, labels) -> list[float]:
        """Full-batch AdamW with a cosine schedule; returns the per-epoch loss."""
        cfg = self.config
        schedule = TrainConfig(epochs=cfg.epochs, warmup_epochs=0, base_lr=cfg.lr, weight_decay=cfg.weight_decay)
        optimizer = AdamW(self.parameters(), schedule)
        history = []
        for epoch in range(cfg.epochs):
            with Tape() as tape:
                loss = self.loss(embeddings, mask, labels)
            grads = backward(tape, loss, optimizer.params)
            optimizer.step(grads, lr_at(epoch, schedule))
            history.append(loss.item())
        logger.debug("Sequence head trained for %d epochs: loss %.4f -> %.4f", cfg.epochs, history[0], history[-1])
        return history


def sequence_forward(seq: ExamSequence, head: SequenceHead) -> float:
    return float(head(seq.embeddings, seq.mask)[0])
