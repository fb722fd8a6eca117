"""Neural primitives built on the tape: 3D convolution, masked softmax,
layer normalization and multi-head attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from medimp.exceptions import ShapeError
from medimp.numerics.tensor import DTYPE, Function, Tensor, as_tensor, take, unbroadcast

LAYER_NORM_EPS = 1e-5


def _triple(value) -> tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise ShapeError(f"expected an int or a triple, got {value!r}")
    return out


class Conv3d(Function):
    """Cross-correlation of a batch (N, C_in, Dz, Dy, Dx) with (C_out, C_in, kz, ky, kx)."""

    def forward(self, x, w):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv3d input {x.shape} incompatible with kernel {w.shape}")
        padded = tuple(x.shape[2 + i] + 2 * padding[i] for i in range(3))
        if any(w.shape[2 + i] > padded[i] for i in range(3)):
            raise ShapeError(f"conv3d kernel {w.shape} larger than padded input {x.shape} (padding {padding})")
        xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
        windows = sliding_window_view(xp, w.shape[2:], axis=(2, 3, 4))
        windows = windows[:, :, :: stride[0], :: stride[1], :: stride[2]]
        self.saved = (windows, w, xp.shape)
        out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(self, grad):
        windows, w, padded_shape = self.saved
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        gw = np.tensordot(grad, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4])) if self.needs[1] else None
        gx = None
        if self.needs[0]:
            gxp = np.zeros(padded_shape, dtype=DTYPE)
            n_out = grad.shape[2:]
            kz, ky, kx = w.shape[2:]
            for a in range(kz):
                for b in range(ky):
                    for c in range(kx):
                        contrib = np.tensordot(grad, w[:, :, a, b, c], axes=([1], [0]))
                        gxp[
                            :,
                            :,
                            a : a + stride[0] * n_out[0] : stride[0],
                            b : b + stride[1] * n_out[1] : stride[1],
                            c : c + stride[2] * n_out[2] : stride[2],
                        ] += np.moveaxis(contrib, -1, 1)
            pz, py, px = padding
            gx = gxp[:, :, pz : padded_shape[2] - pz, py : padded_shape[3] - py, px : padded_shape[4] - px]
        return gx, gw


def conv3d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation; accepts a single volume (C, Dz, Dy, Dx) or a batch."""
    x = as_tensor(x)
    single = x.ndim == 4
    if single:
        x = x.reshape((1,) + x.shape)
    out = Conv3d.apply(x, kernel, stride=_triple(stride), padding=_triple(padding))
    if bias is not None:
        out = out + as_tensor(bias).reshape(-1, 1, 1, 1)
    if single:
        out = out.reshape(out.shape[1:])
    return out


class Softmax(Function):
    def forward(self, a):
        axis, mask = self.attrs["axis"], self.attrs.get("mask")
        if mask is not None:
            mask = np.broadcast_to(mask, a.shape)
            if not mask.any(axis=axis).all():
                raise ShapeError("softmax over a row whose positions are all masked")
            a = np.where(mask, a, -np.inf)
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)
        self.saved = (out,)
        return out

    def backward(self, grad):
        (s,) = self.saved
        axis = self.attrs["axis"]
        return (s * (grad - (grad * s).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a):
        axis = self.attrs["axis"]
        m = a.max(axis=axis, keepdims=True)
        out = a - m - np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
        self.saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self.saved
        axis = self.attrs["axis"]
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gain, bias):
        eps = self.attrs["eps"]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        self.saved = (xhat, inv_std, gain)
        return xhat * gain + bias

    def backward(self, grad):
        xhat, inv_std, gain = self.saved
        dxhat = grad * gain
        gx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, unbroadcast(grad * xhat, gain.shape), unbroadcast(grad, gain.shape)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max-subtraction; masked-out positions get exactly zero mass."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return Softmax.apply(x, axis=axis, mask=mask)


def softmax_rows(logits) -> Tensor:
    return softmax(logits, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = as_tensor(x) @ weight
    return out + bias if bias is not None else out


def embedding(table, ids) -> Tensor:
    return take(table, ids)


def activation(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return x.relu()
    if name == "gelu":
        return x.gelu()
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nd = len(lead) + 3
    axes = tuple(range(len(lead))) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead) + 3
    axes = tuple(range(len(lead))) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(axes).reshape(*lead, n, h * dh)


def multi_head_attention(q, k, v, heads: int, params: AttentionParams, mask=None) -> Tensor:
    """Scaled dot-product attention of queries (..., n_q, d) over keys/values (..., n_k, d).

    ``mask`` marks usable key positions, shape (..., n_k); masked keys get zero
    weight and a fully masked row raises ShapeError.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d_model = params.wq.shape[-1]
    if d_model % heads:
        raise ShapeError(f"attention width {d_model} not divisible by {heads} heads")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention keys {k.shape} and values {v.shape} disagree")
    qh = _split_heads(linear(q, params.wq, params.bq), heads)
    kh = _split_heads(linear(k, params.wk, params.bk), heads)
    vh = _split_heads(linear(v, params.wv, params.bv), heads)
    scores = (qh @ kh.T) * (1.0 / np.sqrt(d_model // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, None, :]
    weights = softmax(scores, axis=-1, mask=mask)
    return linear(_merge_heads(weights @ vh), params.wo, params.bo)
