"""Residual 3D convolutional image encoder with attention pooling."""
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from medimp.config import ImageEncoderConfig
from medimp.encoders.params import ParameterStore
from medimp.exceptions import ShapeError, VolumeError
from medimp.imaging import Volume
from medimp.numerics import AttentionParams, Parameter, Tensor, activation, concat, conv3d, multi_head_attention

logger = logging.getLogger(__name__)


def inflate_kernel(kernel2d: np.ndarray, depth: int) -> np.ndarray:
    """Repeat a (C_out, C_in, ky, kx) kernel ``depth`` times along a new depth axis, divided by depth."""
    if depth < 1:
        raise ShapeError(f"inflation depth must be at least 1, got {depth}")
    kernel2d = np.asarray(kernel2d, dtype=np.float64)
    if kernel2d.ndim != 4:
        raise ShapeError(f"expected a 4D kernel, got shape {kernel2d.shape}")
    return np.repeat(kernel2d[:, :, None, :, :], depth, axis=2) / depth


def _conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@dataclass
class Bottleneck:
    conv1: Parameter
    bias1: Parameter
    conv2: Parameter
    bias2: Parameter
    conv3: Parameter
    bias3: Parameter
    shortcut: Parameter | None
    shortcut_bias: Parameter | None
    stride: int

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, in_ch: int, width: int, stride: int) -> "Bottleneck":
        mid = max(1, width // 4)
        needs_shortcut = stride != 1 or in_ch != width
        return cls(
            conv1=store.normal(f"{prefix}.conv1.weight", (mid, in_ch, 1, 1, 1), math.sqrt(2.0 / in_ch)),
            bias1=store.zeros(f"{prefix}.conv1.bias", mid),
            conv2=store.normal(f"{prefix}.conv2.weight", (mid, mid, 3, 3, 3), math.sqrt(2.0 / (27 * mid))),
            bias2=store.zeros(f"{prefix}.conv2.bias", mid),
            conv3=store.normal(f"{prefix}.conv3.weight", (width, mid, 1, 1, 1), math.sqrt(1.0 / mid)),
            bias3=store.zeros(f"{prefix}.conv3.bias", width),
            shortcut=store.normal(f"{prefix}.shortcut.weight", (width, in_ch, 1, 1, 1), math.sqrt(1.0 / in_ch))
            if needs_shortcut
            else None,
            shortcut_bias=store.zeros(f"{prefix}.shortcut.bias", width) if needs_shortcut else None,
            stride=stride,
        )

    def __call__(self, x: Tensor, act: str) -> Tensor:
        h = activation(conv3d(x, self.conv1, self.bias1), act)
        h = activation(conv3d(h, self.conv2, self.bias2, stride=self.stride, padding=1), act)
        h = conv3d(h, self.conv3, self.bias3)
        skip = x if self.shortcut is None else conv3d(x, self.shortcut, self.shortcut_bias, stride=self.stride)
        return activation(h + skip, act)


def attention_pool_3d(features, pos_embedding, attn: AttentionParams, heads: int) -> Tensor:
    """Pool a (C, Dz, Dy, Dx) feature map, or a batch of them, into one embedding each.

    The mean feature is prepended as the query token, positional embeddings
    are added to all P + 1 tokens and the query's attention output is returned.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    single = features.ndim == 4
    if single:
        features = features.reshape((1,) + features.shape)
    batch, channels = features.shape[:2]
    tokens = features.reshape(batch, channels, -1).transpose(0, 2, 1)
    if pos_embedding.shape != (tokens.shape[1] + 1, channels):
        raise ShapeError(
            f"positional embedding {pos_embedding.shape} does not fit {tokens.shape[1]} positions of width {channels}"
        )
    seq = concat([tokens.mean(axis=1, keepdims=True), tokens], axis=1) + pos_embedding
    pooled = multi_head_attention(seq[:, :1, :], seq, seq, heads, attn)
    pooled = pooled.reshape(batch, pooled.shape[-1])
    return pooled.reshape(pooled.shape[-1]) if single else pooled


class ImageEncoder:
    def __init__(self, config: ImageEncoderConfig, store: ParameterStore | None = None, prefix: str = "image"):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix
        widths = config.widths
        self.stem_weight = self.store.normal(f"{prefix}.stem.weight", (widths[0], 1, 3, 3, 3), math.sqrt(2.0 / 27))
        self.stem_bias = self.store.zeros(f"{prefix}.stem.bias", widths[0])

        spatial = [_conv_extent(n, 3, config.stem_stride, 1) for n in config.input_shape]
        self.blocks: list[Bottleneck] = []
        in_ch = widths[0]
        for si, (width, count) in enumerate(zip(widths, config.blocks)):
            for bi in range(count):
                stride = 2 if si > 0 and bi == 0 else 1
                self.blocks.append(Bottleneck.create(self.store, f"{prefix}.stages.{si}.blocks.{bi}", in_ch, width, stride))
                spatial = [_conv_extent(n, 3, stride, 1) for n in spatial]
                in_ch = width
        self.feature_shape = (in_ch, *spatial)
        positions = int(np.prod(spatial))
        self.pos_embedding = self.store.normal(f"{prefix}.pool.pos_embedding", (positions + 1, in_ch), 1.0 / math.sqrt(in_ch))
        self.pool = self.store.attention(f"{prefix}.pool.attn", in_ch, config.embed_dim)

    def parameters(self) -> list[Parameter]:
        return self.store.parameters(self.prefix + ".")

    def features(self, x: Tensor) -> Tensor:
        act = self.config.activation
        h = activation(conv3d(x, self.stem_weight, self.stem_bias, stride=self.config.stem_stride, padding=1), act)
        for block in self.blocks:
            h = block(h, act)
        return h

    def forward(self, voxels) -> Tensor:
        """Embed a batch of normalized voxel grids (B, Dz, Dy, Dx) into (B, D)."""
        voxels = np.asarray(voxels, dtype=np.float64)
        if voxels.ndim != 4 or tuple(voxels.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(f"image batch {voxels.shape} does not match encoder input {self.config.input_shape}")
        x = Tensor(voxels[:, None])
        return attention_pool_3d(self.features(x), self.pos_embedding, self.pool, self.config.pool_heads)

    __call__ = forward

    def load_inflated(self, weights2d: Mapping[str, np.ndarray]) -> list[str]:
        """Initialize from a 2D checkpoint.

        4D kernels are inflated onto the matching 3D convolutions; other
        arrays of identical shape are copied. Positional embeddings are
        left as initialized.
        """
        loaded = []
        for name, value in weights2d.items():
            if name not in self.store:
                logger.warning("Skipping %s: no such parameter in the image encoder", name)
                continue
            if name.endswith("pos_embedding"):
                continue
            target = self.store[name]
            value = np.asarray(value, dtype=np.float64)
            if target.ndim == 5 and value.ndim == 4:
                if value.shape != target.shape[:2] + target.shape[3:]:
                    raise ShapeError(f"cannot inflate {name}: 2D kernel {value.shape} vs 3D kernel {target.shape}")
                target.data = inflate_kernel(value, target.shape[2])
            elif value.shape == target.shape:
                target.data = value.copy()
            else:
                raise ShapeError(f"cannot load {name}: stored shape {value.shape} vs model shape {target.shape}")
            loaded.append(name)
        logger.info("Initialized %d image encoder parameters from 2D weights", len(loaded))
        return loaded


def encode_image(v: Volume, encoder: ImageEncoder) -> np.ndarray:
    if not v.normalized:
        raise VolumeError("encode_image expects a normalized volume")
    return encoder.forward(v.voxels[None]).data[0].copy()
