"""Named finite-difference checks over every differentiable piece of the model."""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from medimp.config import DownstreamConfig, ImageEncoderConfig, TextEncoderConfig
from medimp.contrastive import contrastive_loss
from medimp.downstream import SequenceHead
from medimp.encoders import ImageEncoder, ParameterStore, TextEncoder
from medimp.numerics import (
    AttentionParams,
    Parameter,
    checkable_parameters,
    concat,
    conv3d,
    grad_check,
    layer_norm,
    log_softmax,
    multi_head_attention,
    softmax,
    take,
)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable, list[Parameter]]]


def _param(name, rng, shape, scale=1.0, offset=0.0):
    return Parameter(name, offset + scale * rng.normal(size=shape))


def _away_from_zero(name, rng, shape):
    return Parameter(name, rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape))


def elementwise(rng):
    a, b = _param("a", rng, (3, 4)), _param("b", rng, (4,), offset=3.0, scale=0.5)
    return lambda: ((a + b) * (a - b) / b - a).sum(), [a, b]


def unary(rng):
    a = Parameter("a", rng.uniform(0.5, 2.0, size=(3, 3)))
    return lambda: ((a**1.7).exp().log() + a.sqrt() - a.log()).sum(), [a]


def activations(rng):
    a = _away_from_zero("a", rng, (4, 5))
    return lambda: (a.relu() * 0.3 + a.gelu() + a.sigmoid() * a.softplus() + a.clip(-0.25, 0.25)).sum(), [a]


def shapes(rng):
    a, b = _param("a", rng, (2, 3, 4)), _param("b", rng, (2, 3, 2))
    return lambda: (concat([a.transpose(0, 2, 1).reshape(2, 4, 3)[:, 1:, :], b.T], axis=1).mean(axis=1) ** 2).sum(), [a, b]


def matmul(rng):
    a, b = _param("a", rng, (2, 3, 4)), _param("b", rng, (4, 5))
    return lambda: ((a @ b) ** 2).mean(), [a, b]


def lookup(rng):
    table = _param("table", rng, (6, 3))
    return lambda: (take(table, [0, 2, 2, 5]) ** 2).sum(), [table]


def softmaxes(rng):
    a = _param("a", rng, (3, 5))
    target = rng.normal(size=(3, 5))
    mask = np.array([True, True, False, True, True])
    return lambda: (softmax(a, mask=mask) * target).sum() + (log_softmax(a, axis=0) * target).sum(), [a]


def norm(rng):
    x, g, b = _param("x", rng, (3, 6)), _param("g", rng, 6), _param("b", rng, 6)
    target = rng.normal(size=(3, 6))
    return lambda: (layer_norm(x, g, b) * target).sum(), [x, g, b]


def conv(rng):
    x, w, bias = _param("x", rng, (2, 2, 4, 5, 4)), _param("w", rng, (3, 2, 3, 2, 3)), _param("bias", rng, 3)
    target = rng.normal(size=(2, 3, 2, 2, 2))
    return lambda: (conv3d(x, w, bias, stride=(2, 2, 2), padding=(1, 0, 1)) * target).sum(), [x, w, bias]


ATTENTION_SLOTS = ("q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "out.weight", "out.bias")


def attention(rng):
    x = _param("x", rng, (2, 3, 4))
    ps = [_param(f"attn.{slot}", rng, (4, 4) if i % 2 == 0 else (4,), scale=0.5) for i, slot in enumerate(ATTENTION_SLOTS)]
    target = rng.normal(size=(2, 3, 4))
    mask = np.array([[True, True, False], [True, True, True]])
    return lambda: (multi_head_attention(x, x, x, 2, AttentionParams(*ps), mask=mask) * target).sum(), [x, *ps]


def contrastive(rng):
    b = int(rng.integers(2, 5))
    f_i, f_t = _param("f_i", rng, (b, 4)), _param("f_t", rng, (b, 4))
    s = Parameter("logit_scale", np.array(rng.uniform(0.5, 3.0)))
    return lambda: contrastive_loss(f_i, f_t, s), [f_i, f_t, s]


def image_encoder(rng):
    config = ImageEncoderConfig(
        input_shape=(6, 6, 6), widths=(4, 8), blocks=(1, 1), embed_dim=4, pool_heads=2, activation="gelu"
    )
    encoder = ImageEncoder(config, ParameterStore(int(rng.integers(1 << 30))))
    batch = rng.uniform(size=(2, 6, 6, 6))
    head = rng.normal(size=(2, 4))
    return lambda: (encoder(batch) * head).sum(), encoder.parameters()


def text_encoder(rng):
    config = TextEncoderConfig(layers=2, width=8, heads=2, ff_width=16, max_len=8, embed_dim=4)
    encoder = TextEncoder(config, 10, ParameterStore(int(rng.integers(1 << 30))))
    ids = np.array([[2, 5, 6, 7, 3, 0, 0, 0], [2, 8, 9, 4, 5, 6, 3, 0]])
    head = rng.normal(size=(2, 4))
    return lambda: (encoder(ids) * head).sum(), encoder.parameters()


def sequence_head(rng):
    head = SequenceHead(4, DownstreamConfig(heads=2, ff_width=8), seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(3, 4, 4))
    mask = np.array([[True, False, True, True], [False, True, False, False], [True, True, True, True]])
    labels = np.array([1, 0, 1])
    return lambda: head.loss(x, mask, labels), head.parameters()


CASES: dict[str, Case] = {
    "elementwise": elementwise,
    "unary": unary,
    "activations": activations,
    "shapes": shapes,
    "matmul": matmul,
    "lookup": lookup,
    "softmax": softmaxes,
    "layer_norm": norm,
    "conv3d": conv,
    "attention": attention,
    "contrastive_loss": contrastive,
    "image_encoder": image_encoder,
    "text_encoder": text_encoder,
    "sequence_head": sequence_head,
}
# sampled coordinates per parameter for the end-to-end checks
SAMPLED = {"image_encoder": 4, "text_encoder": 4, "sequence_head": 3}


@dataclass(frozen=True)
class CheckResult:
    name: str
    configurations: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_grad_suite(configurations: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for name in names or CASES:
        worst = 0.0
        for i in range(configurations):
            rng = np.random.default_rng([seed, i])
            f, params = CASES[name](rng)
            worst = max(worst, grad_check(f, checkable_parameters(params), h=STEP, coords=SAMPLED.get(name), rng=rng))
        result = CheckResult(name, configurations, worst)
        logger.info("[gradcheck] %s: max relative error %.2e over %d configurations", name, worst, configurations)
        results.append(result)
    return results


def results_table(results: list[CheckResult]) -> str:
    frame = pd.DataFrame(
        [
            {"check": r.name, "configs": r.configurations, "max_rel_error": f"{r.max_error:.2e}", "status": "PASS" if r.passed else "FAIL"}
            for r in results
        ]
    )
    return frame.to_string(index=False)
