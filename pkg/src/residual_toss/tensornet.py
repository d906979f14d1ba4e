"""Small numpy neural-network kernel: convolution, pooling, upsampling, activations,
losses and momentum SGD, each with an exact backward pass.

Tensors are 4-D arrays stored channels-last, ``(batch, height, width, channels)``.
Layers cache what they need in ``forward`` and accumulate parameter gradients
in ``backward`` until ``zero_grad`` is called, so several samples can be pushed
through before a single optimiser step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7
IM2COL_MAX_DEPTH = 32


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)


# --------------------------------------------------------------------------
# convolution


def _pad_amount(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sizes")
        return kh // 2, kw // 2
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding="same"):
    """Cross-correlation of ``x`` (N, H, W, C) with ``w`` (kh, kw, C, O) plus bias.

    Returns the output and a cache for :func:`conv2d_backward`.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if b.shape != (co,):
        raise ValueError("bias shape does not match kernel")
    ph, pw = _pad_amount(padding, kh, kw)
    hp, wp = h + 2 * ph, wd + 2 * pw
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + wd] = x
    if stride == 1:
        flat = xp.reshape(-1, c)
        span = (kh - 1) * wp + (kw - 1)
        L = flat.shape[0] - span
        if c * kh * kw <= IM2COL_MAX_DEPTH:
            # thin inputs: one GEMM over gathered shifts beats kh * kw skinny ones
            cols = np.concatenate([flat[a * wp + bb : a * wp + bb + L] for a in range(kh) for bb in range(kw)], axis=1)
            acc = cols @ w.reshape(kh * kw * c, co)
        else:
            acc = np.zeros((L, co), dtype=x.dtype)
            for a in range(kh):
                for bb in range(kw):
                    off = a * wp + bb
                    acc += flat[off : off + L] @ w[a, bb]
        full = np.empty((n * hp * wp, co), dtype=x.dtype)
        full[:L] = acc
        full[L:] = 0
        out = full.reshape(n, hp, wp, co)[:, :ho, :wo] + b
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        # win: (n, ho, wo, c, kh, kw)
        out = np.einsum("nyxcab,abco->nyxo", win, w, optimize=True) + b
    cache = (xp, w, x.shape, (ph, pw), stride, (ho, wo))
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out: np.ndarray, cache, need_input_grad: bool = True):
    """Return ``(grad_in, grad_w, grad_b)`` for a cached convolution.

    ``grad_in`` is ``None`` when ``need_input_grad`` is false.
    """
    xp, w, in_shape, (ph, pw), stride, (ho, wo) = cache
    n, h, wd, c = in_shape
    kh, kw, _, co = w.shape
    hp, wp = xp.shape[1], xp.shape[2]
    if grad_out.shape != (n, ho, wo, co):
        raise ValueError("grad_out shape does not match the forward output")
    gb = grad_out.sum(axis=(0, 1, 2))
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp) if need_input_grad else None
    if stride == 1:
        span = (kh - 1) * wp + (kw - 1)
        L = n * hp * wp - span
        gfull = np.zeros((n, hp, wp, co), dtype=grad_out.dtype)
        gfull[:, :ho, :wo] = grad_out
        gflat = gfull.reshape(-1, co)[:L]
        xflat = xp.reshape(-1, c)
        gxflat = gxp.reshape(-1, c) if need_input_grad else None
        for a in range(kh):
            for bb in range(kw):
                off = a * wp + bb
                gw[a, bb] = xflat[off : off + L].T @ gflat
                if need_input_grad:
                    gxflat[off : off + L] += gflat @ w[a, bb].T
    else:
        for a in range(kh):
            for bb in range(kw):
                xs = xp[:, a : a + stride * ho : stride, bb : bb + stride * wo : stride]
                gw[a, bb] = np.einsum("nyxc,nyxo->co", xs, grad_out)
                if need_input_grad:
                    gxp[:, a : a + stride * ho : stride, bb : bb + stride * wo : stride] += grad_out @ w[a, bb].T
    if not need_input_grad:
        return None, gw, gb
    gx = gxp[:, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------
# layers


class Layer:
    def params(self) -> list[Param]:
        return []

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0


class Conv2d(Layer):
    """3x3 (by default) convolution layer.

    With ``input_grad=False`` the backward pass skips the input gradient and
    returns ``None``; use it for a network's first layer.
    """

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, padding="same", rng=None,
                 dtype=np.float32, input_grad: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        w = rng.standard_normal((k, k, cin, cout)) * math.sqrt(2.0 / fan_in)
        self.weight = Param(w.astype(dtype))
        self.bias = Param(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = padding
        self.input_grad = input_grad
        self._cache = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        gx, gw, gb = conv2d_backward(g, self._cache, self.input_grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2.

    Odd trailing rows/columns are dropped. The backward pass routes each window's
    gradient to its first maximum in row-major order.
    """

    def forward(self, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        self._in_shape = x.shape
        win = x[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
        self._arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, h, w, c = self._in_shape
        h2, w2 = h // 2, w // 2
        onehot = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(onehot, self._arg[..., None], g[..., None], axis=-1)
        blk = onehot.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        gx = np.zeros(self._in_shape, dtype=g.dtype)
        gx[:, : 2 * h2, : 2 * w2] = blk
        return gx


def _up_axis(x, axis):
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_backward(g, axis):
    n2 = g.shape[axis]
    n = n2 // 2
    ge = np.take(g, np.arange(0, n2, 2), axis=axis)
    go = np.take(g, np.arange(1, n2, 2), axis=axis)
    gx = 0.75 * (ge + go)
    idx = [slice(None)] * g.ndim

    def sl(s):
        idx2 = list(idx)
        idx2[axis] = s
        return tuple(idx2)

    # even output k pulls 0.25 from k-1 (clamped at 0)
    gx[sl(slice(0, n - 1))] += 0.25 * ge[sl(slice(1, n))]
    gx[sl(slice(0, 1))] += 0.25 * ge[sl(slice(0, 1))]
    # odd output k pulls 0.25 from k+1 (clamped at n-1)
    gx[sl(slice(1, n))] += 0.25 * go[sl(slice(0, n - 1))]
    gx[sl(slice(n - 1, n))] += 0.25 * go[sl(slice(n - 1, n))]
    return gx


class UpsampleBilinear2x(Layer):
    """Bilinear 2x upsampling, align-corners-false convention (source coordinate
    ``(o + 0.5) / 2 - 0.5``, clamped at the borders)."""

    def forward(self, x):
        return _up_axis(_up_axis(x, 1), 2)

    def backward(self, g):
        return _up_axis_backward(_up_axis_backward(g, 2), 1)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


# --------------------------------------------------------------------------
# losses


def bce_loss(q: float, y: int) -> tuple[float, float]:
    """Binary cross-entropy and its derivative w.r.t. ``q`` (clamped to [1e-7, 1 - 1e-7])."""
    q = min(max(float(q), BCE_EPS), 1.0 - BCE_EPS)
    loss = -(y * math.log(q) + (1 - y) * math.log(1.0 - q))
    grad = -y / q + (1 - y) / (1.0 - q)
    return loss, grad


def huber_loss(delta: float, delta_bar: float) -> tuple[float, float]:
    e = float(delta) - float(delta_bar)
    if abs(e) < 1.0:
        return 0.5 * e * e, e
    return abs(e) - 0.5, math.copysign(1.0, e)


# --------------------------------------------------------------------------
# optimiser


def sgd_momentum_step(params, lr: float, momentum: float, weight_decay: float) -> None:
    """In-place update ``m <- momentum m + (grad + wd p); p <- p - lr m`` (coupled L2 decay)."""
    for p in params:
        if p.grad.shape != p.value.shape:
            raise ValueError("gradient shape does not match parameter")
        p.velocity *= momentum
        p.velocity += p.grad + weight_decay * p.value
        p.value -= lr * p.velocity


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (little endian):
#   magic  b"RTNW"   | u32 version (1) | u32 tensor count
#   per tensor: u16 name length, utf-8 name, u8 dtype code (0 f32, 1 f64),
#               u8 ndim, ndim x u32 dims, raw row-major buffer

_MAGIC = b"RTNW"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _CODES[arr.dtype]
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a weight checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dt = _DTYPES[code]
            size = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(fh.read(size * dt.itemsize), dtype=dt).reshape(dims).copy()
    return out
