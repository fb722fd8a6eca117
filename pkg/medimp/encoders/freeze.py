"""Which text-encoder parameters receive optimizer updates."""
import logging
import re
from typing import Iterable

from medimp.config import FreezePolicy
from medimp.exceptions import ConfigError
from medimp.numerics import Parameter

logger = logging.getLogger(__name__)

_BLOCK = re.compile(r"\.blocks\.(\d+)\.")
_BLOCK_NORM = re.compile(r"\.blocks\.\d+\.ln\d\.(gain|bias)$")


def text_layer(name: str) -> int | None:
    """Layer of a text parameter: embeddings are 0, block i is i + 1, the projection has none."""
    if ".projection." in name:
        return None
    match = _BLOCK.search(name)
    return int(match.group(1)) + 1 if match else 0


def apply_freeze_policy(params: Iterable[Parameter], policy: FreezePolicy, layers: int) -> set[str]:
    """Set ``trainable`` on every parameter according to ``policy``; returns the trainable names.

    ``first_k`` freezes layers 0 through k, counting the embeddings as layer 0.
    ``ln_only`` trains the ln1/ln2 gains and biases of every block plus the
    projection. The LayerNorm applied to the embeddings stays frozen with the
    embedding tables it normalizes. ``none`` trains everything.
    """
    if policy.mode == "first_k" and policy.k > layers:
        raise ConfigError(f"cannot freeze the first {policy.k} layers of a {layers}-layer encoder")
    trainable = set()
    params = list(params)
    for p in params:
        layer = text_layer(p.name)
        if policy.mode == "none" or layer is None:
            p.trainable = True
        elif policy.mode == "first_k":
            p.trainable = not (policy.k > 0 and layer <= policy.k)
        else:
            p.trainable = bool(_BLOCK_NORM.search(p.name))
        if p.trainable:
            trainable.add(p.name)
    logger.info("Freeze policy %s (k=%d): %d of %d text parameters trainable", policy.mode, policy.k, len(trainable), len(params))
    return trainable
