"""Deterministic seed derivation.

Every random stream in the pipeline is keyed by a prefix plus the identifiers
of the thing being randomized (subject, exam, epoch...), hashed the same way
regardless of call order, so results do not depend on worker count.
"""
import hashlib
import json

import numpy as np

_SEED_BITS = 63


def generate_seed_key(prefix: str, *args, **kwargs) -> str:
    """Build a stable key string from a prefix and arguments."""
    key_data = {
        "prefix": prefix,
        "args": [str(a) for a in args],
        "kwargs": sorted((k, str(v)) for k, v in kwargs.items()) if kwargs else [],
    }
    key_string = json.dumps(key_data, sort_keys=True)
    key_hash = hashlib.md5(key_string.encode()).hexdigest()
    return f"{prefix}:{key_hash}"


def derive_seed(prefix: str, *args, **kwargs) -> int:
    """Hash a key into a non-negative 63-bit integer seed."""
    key_hash = generate_seed_key(prefix, *args, **kwargs).split(":", 1)[1]
    return int(key_hash[:16], 16) & ((1 << _SEED_BITS) - 1)


def derive_rng(prefix: str, *args, **kwargs) -> np.random.Generator:
    return np.random.default_rng(derive_seed(prefix, *args, **kwargs))
