"""Both embedding towers plus the learnable logit scale, as one checkpointable unit."""
import math

import numpy as np

from medimp.config import ImageEncoderConfig, TextEncoderConfig
from medimp.contrastive.loss import DEFAULT_MAX_LOGIT_SCALE, clamp_logit_scale, contrastive_loss, cosine_similarity_matrix
from medimp.encoders import ImageEncoder, ParameterStore, TextEncoder
from medimp.exceptions import CheckpointError, EvaluationError, ShapeError
from medimp.numerics import Parameter, Tensor
from medimp.promptgen import TokenizedText, Vocabulary
from medimp.schemas import Checkpoint
from medimp.seeds import derive_rng

LOGIT_SCALE = "logit_scale"
TIE_TOLERANCE = 1e-12


class MedimpModel:
    def __init__(
        self,
        image_config: ImageEncoderConfig,
        text_config: TextEncoderConfig,
        vocab: Vocabulary,
        seed: int = 0,
        init_temperature: float = 0.07,
        max_logit_scale: float = DEFAULT_MAX_LOGIT_SCALE,
    ):
        self.vocab = vocab
        self.max_logit_scale = max_logit_scale
        self.store = ParameterStore(seed)
        self.image = ImageEncoder(image_config, self.store)
        self.text = TextEncoder(text_config, len(vocab), self.store)
        self.logit_scale: Parameter = self.store.add(LOGIT_SCALE, np.array(math.log(1.0 / init_temperature)))

    def parameters(self) -> list[Parameter]:
        return list(self.store)

    @property
    def temperature(self) -> float:
        return 1.0 / math.exp(float(self.logit_scale.data))

    def clamp_logit_scale(self) -> None:
        self.logit_scale.data = np.array(clamp_logit_scale(self.logit_scale.data, self.max_logit_scale))

    def loss(self, voxels: np.ndarray, tokens: TokenizedText) -> Tensor:
        f_i = self.image(voxels)
        f_t = self.text(tokens.ids, tokens.mask)
        return contrastive_loss(f_i, f_t, self.logit_scale, self.max_logit_scale)

    def embed_images(self, voxels: np.ndarray, batch_size: int = 16) -> np.ndarray:
        chunks = [self.image(voxels[i : i + batch_size]).data for i in range(0, len(voxels), batch_size)]
        return np.concatenate(chunks, axis=0)

    def embed_texts(self, tokens: TokenizedText, batch_size: int = 64) -> np.ndarray:
        n = len(tokens.ids)
        chunks = [
            self.text(tokens.ids[i : i + batch_size], tokens.mask[i : i + batch_size]).data for i in range(0, n, batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def to_checkpoint(self) -> Checkpoint:
        tensors = {p.name: p.data.copy() for p in self.store if p.name != LOGIT_SCALE}
        metadata = {
            "image_encoder": self.image.config.model_dump(mode="json"),
            "text_encoder": self.text.config.model_dump(mode="json"),
            "vocab": self.vocab.to_list(),
            "max_logit_scale": self.max_logit_scale,
        }
        return Checkpoint(logit_scale=float(self.logit_scale.data), tensors=tensors, metadata=metadata)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "MedimpModel":
        meta = checkpoint.metadata
        try:
            image_config = ImageEncoderConfig.model_validate(meta["image_encoder"])
            text_config = TextEncoderConfig.model_validate(meta["text_encoder"])
            vocab = Vocabulary(meta["vocab"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"checkpoint metadata cannot rebuild the model: {e}")
        model = cls(image_config, text_config, vocab, max_logit_scale=meta.get("max_logit_scale", DEFAULT_MAX_LOGIT_SCALE))
        state = dict(checkpoint.tensors)
        state[LOGIT_SCALE] = np.array(checkpoint.logit_scale)
        try:
            model.store.load_state_dict(state)
        except ShapeError as e:
            raise CheckpointError(f"checkpoint tensors do not fit the model: {e}")
        return model


def retrieval_accuracy(image_embeddings: np.ndarray, text_embeddings: np.ndarray, batch_size: int, seed: int = 0) -> float:
    """Image-to-text top-1 accuracy within shuffled full batches; chance is 1 / batch_size.

    A row whose best score is shared by several texts, as happens with
    duplicate prompts, earns 1 / (number tied) when its own text is among
    them.
    """
    n = len(image_embeddings)
    if len(text_embeddings) != n:
        raise ShapeError(f"{n} image embeddings vs {len(text_embeddings)} text embeddings")
    if batch_size < 2 or n < batch_size:
        raise EvaluationError(f"retrieval needs at least one full batch of {batch_size}, got {n} pairs")
    order = derive_rng("retrieval", seed).permutation(n)
    correct = total = 0
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        sim = cosine_similarity_matrix(image_embeddings[idx], text_embeddings[idx]).data
        at_max = sim >= sim.max(axis=1, keepdims=True) - TIE_TOLERANCE
        correct += float((np.diag(at_max) / at_max.sum(axis=1)).sum())
        total += batch_size
    return correct / total
