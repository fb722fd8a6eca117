"""Named parameter storage shared by the encoders."""
from typing import Iterator, Mapping

import numpy as np

from medimp.exceptions import ShapeError
from medimp.numerics import AttentionParams, Parameter
from medimp.seeds import derive_rng


class ParameterStore:
    """Ordered collection of uniquely named parameters.

    Initial values are drawn from a stream keyed by (seed, name), so a
    parameter's initialization does not depend on creation order.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, Parameter] = {}

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        param = Parameter(name, value, trainable)
        self._params[name] = param
        return param

    def normal(self, name: str, shape, std: float) -> Parameter:
        return self.add(name, derive_rng("init", self.seed, name).normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Parameter:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self.add(name, np.ones(shape))

    def attention(self, prefix: str, width: int, out_width: int | None = None) -> AttentionParams:
        out_width = out_width or width
        std = 1.0 / np.sqrt(width)
        return AttentionParams(
            wq=self.normal(f"{prefix}.q.weight", (width, width), std),
            bq=self.zeros(f"{prefix}.q.bias", width),
            wk=self.normal(f"{prefix}.k.weight", (width, width), std),
            bk=self.zeros(f"{prefix}.k.bias", width),
            wv=self.normal(f"{prefix}.v.weight", (width, width), std),
            bv=self.zeros(f"{prefix}.v.bias", width),
            wo=self.normal(f"{prefix}.out.weight", (width, out_width), std),
            bo=self.zeros(f"{prefix}.out.bias", out_width),
        )

    def parameters(self, prefix: str = "") -> list[Parameter]:
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy values in by name; with ``strict`` the name sets must match exactly."""
        if strict:
            missing = sorted(set(self._params) - set(state))
            unexpected = sorted(set(state) - set(self._params))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        loaded = []
        for name, value in state.items():
            if name not in self._params:
                continue
            param = self._params[name]
            value = np.asarray(value)
            if value.shape != param.shape:
                raise ShapeError(f"parameter {name}: stored shape {value.shape} != model shape {param.shape}")
            param.data = value.astype(np.float64)
            loaded.append(name)
        return loaded
