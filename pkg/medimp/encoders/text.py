"""Post-norm transformer text encoder."""
import math
from dataclasses import dataclass

import numpy as np

from medimp.config import TextEncoderConfig
from medimp.encoders.params import ParameterStore
from medimp.exceptions import ShapeError
from medimp.numerics import AttentionParams, Parameter, Tensor, embedding, layer_norm, linear, multi_head_attention
from medimp.promptgen import TokenizedText


@dataclass
class TransformerBlock:
    attn: AttentionParams
    ln1_gain: Parameter
    ln1_bias: Parameter
    ff_in: Parameter
    ff_in_bias: Parameter
    ff_out: Parameter
    ff_out_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter
    heads: int

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, width: int, heads: int, ff_width: int) -> "TransformerBlock":
        return cls(
            attn=store.attention(f"{prefix}.attn", width),
            ln1_gain=store.ones(f"{prefix}.ln1.gain", width),
            ln1_bias=store.zeros(f"{prefix}.ln1.bias", width),
            ff_in=store.normal(f"{prefix}.ff.in.weight", (width, ff_width), 1.0 / math.sqrt(width)),
            ff_in_bias=store.zeros(f"{prefix}.ff.in.bias", ff_width),
            ff_out=store.normal(f"{prefix}.ff.out.weight", (ff_width, width), 1.0 / math.sqrt(ff_width)),
            ff_out_bias=store.zeros(f"{prefix}.ff.out.bias", width),
            ln2_gain=store.ones(f"{prefix}.ln2.gain", width),
            ln2_bias=store.zeros(f"{prefix}.ln2.bias", width),
            heads=heads,
        )

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        x = layer_norm(x + multi_head_attention(x, x, x, self.heads, self.attn, mask=mask), self.ln1_gain, self.ln1_bias)
        ff = linear(linear(x, self.ff_in, self.ff_in_bias).gelu(), self.ff_out, self.ff_out_bias)
        return layer_norm(x + ff, self.ln2_gain, self.ln2_bias)


class TextEncoder:
    def __init__(self, config: TextEncoderConfig, vocab_size: int, store: ParameterStore | None = None, prefix: str = "text"):
        self.config = config
        self.vocab_size = vocab_size
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix
        w = config.width
        self.token_embedding = self.store.normal(f"{prefix}.embeddings.token", (vocab_size, w), 0.02 * math.sqrt(w))
        self.position_embedding = self.store.normal(f"{prefix}.embeddings.position", (config.max_len, w), 0.02 * math.sqrt(w))
        self.embed_ln_gain = self.store.ones(f"{prefix}.embeddings.ln.gain", w)
        self.embed_ln_bias = self.store.zeros(f"{prefix}.embeddings.ln.bias", w)
        self.blocks = [
            TransformerBlock.create(self.store, f"{prefix}.blocks.{i}", w, config.heads, config.ff_width)
            for i in range(config.layers)
        ]
        self.projection = self.store.normal(f"{prefix}.projection.weight", (w, config.embed_dim), 1.0 / math.sqrt(w))

    def parameters(self) -> list[Parameter]:
        return self.store.parameters(self.prefix + ".")

    def forward(self, ids, mask=None) -> Tensor:
        """Embed token ids (B, T') with T' <= max_len into (B, D) from the [CLS] position."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        mask = ids != 0 if mask is None else np.asarray(mask, dtype=bool).reshape(ids.shape)
        length = ids.shape[1]
        if length > self.config.max_len:
            raise ShapeError(f"token sequence of length {length} exceeds max_len {self.config.max_len}")
        if not mask.any(axis=1).all():
            raise ShapeError("cannot encode a sequence made only of padding")
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise ShapeError(f"token ids outside vocabulary of size {self.vocab_size}")
        x = embedding(self.token_embedding, ids) + self.position_embedding[:length]
        x = layer_norm(x, self.embed_ln_gain, self.embed_ln_bias)
        for block in self.blocks:
            x = block(x, mask)
        return linear(x[:, 0, :], self.projection)

    __call__ = forward


def encode_text(t: TokenizedText, encoder: TextEncoder) -> np.ndarray:
    if len(t.ids) != encoder.config.max_len:
        raise ShapeError(f"tokenized length {len(t.ids)} != encoder max_len {encoder.config.max_len}")
    return encoder.forward(t.ids[None], t.mask[None]).data[0].copy()
