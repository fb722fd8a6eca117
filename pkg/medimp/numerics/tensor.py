"""Dense tensors with tape-based reverse-mode differentiation.

Primitive operations are ``Function`` subclasses. While a ``Tape`` is active,
every primitive application is appended to it in execution order, which is
already a topological order of the computation; ``backward`` walks the tape in
reverse. Outside a tape, primitives just compute.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from medimp.exceptions import ShapeError

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("medimp_tape", default=None)


class Tensor:
    # numpy operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    def __getitem__(self, key):
        return Index.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes) if axes else None)

    @property
    def T(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return Transpose.apply(self, axes=tuple(axes))

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def relu(self):
        return Relu.apply(self)

    def gelu(self):
        return Gelu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def softplus(self):
        return Softplus.apply(self)

    def clip(self, lo: float | None = None, hi: float | None = None):
        return Clip.apply(self, lo=lo, hi=hi)


class Parameter(Tensor):
    """A named leaf tensor; only trainable parameters receive gradients."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.data = np.array(value, dtype=DTYPE)
        self.trainable = trainable

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    fn: "Function"
    inputs: tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Computation record: primitive applications in execution order."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, fn: "Function", inputs: tuple[Tensor, ...], output: Tensor) -> None:
        self.entries.append(TapeEntry(fn, inputs, output))

    def replay(self) -> bool:
        """Re-run every recorded primitive; True when all outputs match bit for bit."""
        for entry in self.entries:
            fresh = type(entry.fn)(**entry.fn.attrs)
            fresh.needs = entry.fn.needs
            out = fresh.forward(*(t.data for t in entry.inputs))
            if out.shape != entry.output.data.shape or not np.array_equal(out, entry.output.data):
                return False
        return True

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for entry in self.entries:
            for t in entry.inputs:
                if isinstance(t, Parameter):
                    seen.setdefault(id(t), t)
        return list(seen.values())


def current_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class Function:
    """A differentiable primitive.

    ``forward`` maps input arrays to an output array and may stash what
    ``backward`` needs in ``self.saved``; ``backward`` maps the output gradient
    to one gradient (or None) per input.
    """

    def __init__(self, **attrs):
        self.attrs = attrs
        self.needs: tuple[bool, ...] = ()
        self.saved: tuple = ()

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        fn = cls(**attrs)
        tensors = tuple(as_tensor(x) for x in inputs)
        fn.needs = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors)), requires_grad=any(fn.needs))
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(fn, tensors, out)
        return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad * b, a.shape) if self.needs[0] else None
        gb = unbroadcast(grad * a, b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a / b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad / b, a.shape) if self.needs[0] else None
        gb = unbroadcast(-grad * a / (b * b), b.shape) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a):
        self.saved = (a,)
        return a ** self.attrs["exponent"]

    def backward(self, grad):
        (a,) = self.saved
        p = self.attrs["exponent"]
        return (grad * p * a ** (p - 1.0),)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, grad):
        return (grad * self.saved[0],)


class Log(Function):
    def forward(self, a):
        self.saved = (a,)
        return np.log(a)

    def backward(self, grad):
        return (grad / self.saved[0],)


class Sqrt(Function):
    def forward(self, a):
        out = np.sqrt(a)
        self.saved = (out,)
        return out

    def backward(self, grad):
        return (grad * 0.5 / self.saved[0],)


class Relu(Function):
    def forward(self, a):
        self.saved = (a > 0,)
        return np.where(a > 0, a, 0.0)

    def backward(self, grad):
        return (grad * self.saved[0],)


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """Tanh approximation of GELU."""

    def forward(self, a):
        inner = _GELU_C * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        self.saved = (a, t)
        return 0.5 * a * (1.0 + t)

    def backward(self, grad):
        a, t = self.saved
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * d_inner),)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Sigmoid(Function):
    def forward(self, a):
        out = _stable_sigmoid(a)
        self.saved = (out,)
        return out

    def backward(self, grad):
        s = self.saved[0]
        return (grad * s * (1.0 - s),)


class Softplus(Function):
    def forward(self, a):
        self.saved = (a,)
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * _stable_sigmoid(self.saved[0]),)


class Clip(Function):
    def forward(self, a):
        lo, hi = self.attrs.get("lo"), self.attrs.get("hi")
        inside = np.ones(a.shape, dtype=bool)
        if lo is not None:
            inside &= a >= lo
        if hi is not None:
            inside &= a <= hi
        self.saved = (inside,)
        return np.clip(a, lo, hi)

    def backward(self, grad):
        return (grad * self.saved[0],)


class Sum(Function):
    def forward(self, a):
        self.saved = (a.shape,)
        return np.sum(a, axis=self.attrs["axis"], keepdims=self.attrs["keepdims"])

    def backward(self, grad):
        (shape,) = self.saved
        axis = self.attrs["axis"]
        if axis is not None and not self.attrs["keepdims"]:
            axes = tuple(a % len(shape) for a in np.atleast_1d(axis))
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    def forward(self, a):
        self.saved = (a.shape,)
        return a.reshape(self.attrs["shape"])

    def backward(self, grad):
        return (grad.reshape(self.saved[0]),)


class Transpose(Function):
    def forward(self, a):
        return np.transpose(a, self.attrs["axes"])

    def backward(self, grad):
        axes = self.attrs["axes"]
        if axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(axes)),)


class Index(Function):
    def forward(self, a):
        self.saved = (a.shape,)
        return np.array(a[self.attrs["key"]], dtype=DTYPE)

    def backward(self, grad):
        out = np.zeros(self.saved[0], dtype=DTYPE)
        np.add.at(out, self.attrs["key"], grad)
        return (out,)


class Take(Function):
    """Row lookup ``table[ids]`` (embedding tables)."""

    def forward(self, table):
        self.saved = (table.shape,)
        return table[self.attrs["ids"]]

    def backward(self, grad):
        out = np.zeros(self.saved[0], dtype=DTYPE)
        np.add.at(out, self.attrs["ids"], grad)
        return (out,)


class Concat(Function):
    def forward(self, *xs):
        axis = self.attrs["axis"]
        self.saved = (np.cumsum([x.shape[axis] for x in xs])[:-1],)
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.saved[0], axis=self.attrs["axis"]))


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape) if self.needs[0] else None
        gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape) if self.needs[1] else None
        return ga, gb


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def take(table, ids) -> Tensor:
    return Take.apply(table, ids=np.asarray(ids, dtype=np.int64))


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to the trainable parameters.

    Parameters listed in ``params`` that the loss never reached get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(entry.output is loss for entry in tape.entries):
        raise ShapeError("loss is not an output recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Parameter] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None or not entry.output.requires_grad:
            continue
        for t, gi in zip(entry.inputs, entry.fn.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if isinstance(t, Parameter):
                leaves[key] = t
    result = {p.name: grads[key] for key, p in leaves.items()}
    for p in params or ():
        if p.trainable and p.name not in result:
            result[p.name] = np.zeros_like(p.data)
    return result
