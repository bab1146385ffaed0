"""Differentiable operators on channels-last feature maps.

Feature maps are ``(H, W, C)`` or batched ``(N, H, W, C)``.  Convolution
weights are ``(kh, kw, C_in, C_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..bevgrid import Kernel2
from .tensor import Parameter, Tensor, TensorError, as_tensor, record, track


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    a = x.data
    if a.ndim == 3:
        return a[None], True
    if a.ndim == 4:
        return a, False
    raise TensorError(f"expected (H, W, C) or (N, H, W, C), got {a.shape}")


def _unbatch(a: np.ndarray, squeeze: bool) -> np.ndarray:
    return a[0] if squeeze else a


# ----------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise TensorError(f"add shape mismatch {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return record(out, (x,), lambda g: (g * (out > 0),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise TensorError(str(exc)) from None
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, ts, backward)


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),))


def tensor_mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return record(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, float(g) / n),))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return record(x.data * c, (x,), lambda g: (g * c,))


# ----------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(n, ho, wo, kh, kw, c),
                      strides=(s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, weights, bias=None, stride: int = 1, padding: int = 0, relu: bool = False) -> Tensor:
    """Cross-correlation, optionally followed by a fused rectifier."""
    x, w = as_tensor(x), as_tensor(weights)
    b = as_tensor(bias) if bias is not None else None
    xa, squeeze = _batched(x)
    if w.data.ndim != 4:
        raise TensorError(f"conv weights must be (kh, kw, Cin, Cout), got {w.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, c = xa.shape
    if c != cin:
        raise TensorError(f"conv expects {cin} input channels, got {c}")
    if stride < 1:
        raise TensorError("stride must be >= 1")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise TensorError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")
    if b is not None and b.shape != (cout,):
        raise TensorError(f"bias must have shape ({cout},), got {b.shape}")

    def cols_of(a):
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            return a.reshape(-1, cin)
        ap = np.pad(a, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else a
        return _windows(ap, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * cin)

    wm = w.data.reshape(kh * kw * cin, cout)
    out = cols_of(xa) @ wm
    if b is not None:
        out += b.data
    if relu:
        np.maximum(out, 0.0, out=out)
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g = g[None] if squeeze else g
        if relu:
            g = g * (out > 0)
        g2 = g.reshape(-1, cout)
        gw = gb = gx = None
        if w.requires_grad:
            gw = (cols_of(xa).T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, :, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + wd]
            gx = gx[0] if squeeze else gx
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record(_unbatch(out, squeeze), inputs, backward)


def transposed_conv2d(x, weights, stride: int, bias=None, padding: int = 0) -> Tensor:
    """Gradient-of-convolution ("deconvolution").

    ``out[y, x] = sum w[dy, dx] . in[(y - dy) / s, (x - dx) / s]`` over the
    offsets where the division is exact; output size ``(H - 1) s + kh - 2 padding``
    (``padding`` rows and columns are cropped from every border).
    """
    x, w = as_tensor(x), as_tensor(weights)
    b = as_tensor(bias) if bias is not None else None
    xa, squeeze = _batched(x)
    if w.data.ndim != 4:
        raise TensorError(f"deconv weights must be (kh, kw, Cin, Cout), got {w.shape}")
    if stride < 1 or padding < 0:
        raise TensorError("stride must be >= 1 and padding >= 0")
    kh, kw, cin, cout = w.shape
    n, h, wd, c = xa.shape
    if c != cin:
        raise TensorError(f"deconv expects {cin} input channels, got {c}")
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    if 2 * padding >= min(ho, wo):
        raise TensorError(f"padding {padding} crops the whole {ho}x{wo} output")
    # all offsets in one matmul: (n*h*w, cin) @ (cin, kh*kw*cout)
    wm = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    y = (xa.reshape(-1, cin) @ wm).reshape(n, h, wd, kh, kw, cout)
    if kh == stride and kw == stride:
        out = np.ascontiguousarray(y.transpose(0, 1, 3, 2, 4, 5)).reshape(n, ho, wo, cout)
    else:
        out = np.zeros((n, ho, wo, cout))
        for i in range(kh):
            for j in range(kw):
                out[:, i:i + stride * (h - 1) + 1:stride, j:j + stride * (wd - 1) + 1:stride] += y[:, :, :, i, j]
    del y
    if padding:
        out = np.ascontiguousarray(out[:, padding:ho - padding, padding:wo - padding])
    if b is not None:
        out += b.data

    def backward(g):
        g = g[None] if squeeze else g
        if padding:
            full = np.zeros((n, ho, wo, cout))
            full[:, padding:ho - padding, padding:wo - padding] = g
            g = full
        gy = np.empty((n, h, wd, kh, kw, cout))
        for i in range(kh):
            for j in range(kw):
                gy[:, :, :, i, j] = g[:, i:i + stride * (h - 1) + 1:stride, j:j + stride * (wd - 1) + 1:stride]
        gy = gy.reshape(-1, kh * kw * cout)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gy @ wm.T).reshape(n, h, wd, cin)
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = (xa.reshape(-1, cin).T @ gy).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record(_unbatch(out, squeeze), inputs, backward)


# ----------------------------------------------------------------------
# sub-pixel rearrangement


def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    n, h, w, c = a.shape
    co = c // (s * s)
    return np.ascontiguousarray(
        a.reshape(n, h, w, co, s, s).transpose(0, 1, 4, 2, 5, 3)).reshape(n, h * s, w * s, co)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    n, hs, ws, c = a.shape
    h, w = hs // s, ws // s
    return np.ascontiguousarray(
        a.reshape(n, h, s, w, s, c).transpose(0, 1, 3, 5, 2, 4)).reshape(n, h, w, c * s * s)


def pixel_shuffle(x, s: int) -> Tensor:
    """``(h, w, s^2 C) -> (s h, s w, C)`` with channel index ``c s^2 + dy s + dx``."""
    x = as_tensor(x)
    xa, squeeze = _batched(x)
    if s < 1 or xa.shape[-1] % (s * s):
        raise TensorError(f"channels {xa.shape[-1]} not divisible by s^2={s * s}")
    out = _shuffle(xa, s)

    def backward(g):
        g = g[None] if squeeze else g
        return (_unbatch(_unshuffle(g, s), squeeze),)

    return record(_unbatch(out, squeeze), (x,), backward)


def pixel_unshuffle(x, s: int) -> Tensor:
    x = as_tensor(x)
    xa, squeeze = _batched(x)
    if s < 1 or xa.shape[1] % s or xa.shape[2] % s:
        raise TensorError(f"spatial dims {xa.shape[1:3]} not divisible by {s}")
    out = _unshuffle(xa, s)

    def backward(g):
        g = g[None] if squeeze else g
        return (_unbatch(_shuffle(g, s), squeeze),)

    return record(_unbatch(out, squeeze), (x,), backward)


# ----------------------------------------------------------------------
# pooling


def pool2d(x, k: Kernel2 | int, mode: Literal["max", "average"] = "max") -> Tensor:
    """Non-overlapping pooling, stride equal to the kernel size."""
    if isinstance(k, int):
        k = Kernel2(k, k)
    x = as_tensor(x)
    xa, squeeze = _batched(x)
    n, h, w, c = xa.shape
    kv, ku = k.size_v, k.size_u
    if h % kv or w % ku:
        raise TensorError(f"input {h}x{w} not divisible by kernel {kv}x{ku}")
    blocks = xa.reshape(n, h // kv, kv, w // ku, ku, c)
    if mode == "average":
        out = blocks.mean(axis=(2, 4))

        def backward(g):
            g = g[None] if squeeze else g
            gx = np.broadcast_to((g / (kv * ku))[:, :, None, :, None, :], blocks.shape).reshape(n, h, w, c)
            return (_unbatch(np.ascontiguousarray(gx), squeeze),)
    elif mode == "max":
        win = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // kv, w // ku, c, kv * ku)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            g = g[None] if squeeze else g
            gw = np.zeros(win.shape)
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gx = gw.reshape(n, h // kv, w // ku, c, kv, ku).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
            return (_unbatch(gx, squeeze),)
    else:
        raise TensorError(f"unknown pooling mode {mode!r}")
    return record(_unbatch(out, squeeze), (x,), backward)


# ----------------------------------------------------------------------
# fixed interpolation


def _cubic(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def interp_matrix(n: int, s: int, method: str) -> np.ndarray:
    """``(n s, n)`` matrix mapping a 1-D signal to its upsampled version.

    Half-pixel (align-corners false) convention: source coordinate
    ``(dst + 0.5) / s - 0.5``; taps outside the signal are clamped to the edge.
    """
    m = np.zeros((n * s, n))
    dst = np.arange(n * s)
    if method == "nearest":
        m[dst, dst // s] = 1.0
    elif method == "bilinear":
        src = np.maximum((dst + 0.5) / s - 0.5, 0.0)
        i0 = np.floor(src).astype(int)
        lam = src - i0
        i1 = np.minimum(i0 + 1, n - 1)
        np.add.at(m, (dst, i0), 1.0 - lam)
        np.add.at(m, (dst, i1), lam)
    elif method == "bicubic":
        src = (dst + 0.5) / s - 0.5
        i0 = np.floor(src).astype(int)
        t = src - i0
        for off in (-1, 0, 1, 2):
            idx = np.clip(i0 + off, 0, n - 1)
            np.add.at(m, (dst, idx), _cubic(t - off))
    else:
        raise TensorError(f"unknown interpolation method {method!r}")
    m.setflags(write=False)
    return m


def interp_upsample(x, s: int, method: Literal["nearest", "bilinear", "bicubic"]) -> Tensor:
    x = as_tensor(x)
    if s < 1:
        raise TensorError("scale must be >= 1")
    xa, squeeze = _batched(x)
    n, h, w, c = xa.shape
    my, mx = interp_matrix(h, s, method), interp_matrix(w, s, method)
    out = np.einsum("yh,nhwc->nywc", my, xa, optimize=True)
    out = np.einsum("xw,nywc->nyxc", mx, out, optimize=True)

    def backward(g):
        g = g[None] if squeeze else g
        gx = np.einsum("xw,nyxc->nywc", mx, g, optimize=True)
        gx = np.einsum("yh,nywc->nhwc", my, gx, optimize=True)
        return (_unbatch(gx, squeeze),)

    return record(_unbatch(out, squeeze), (x,), backward)


# ----------------------------------------------------------------------
# attention


@dataclass
class MSAParams:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter

    def all(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def msa_layer(x, params: MSAParams, heads: int) -> Tensor:
    """Multi-head softmax self-attention over grid cells, with residual.

    Keeps one ``(H W) x (H W)`` attention matrix per head for the backward pass.
    """
    x = as_tensor(x)
    xa, squeeze = _batched(x)
    n, h, w, c = xa.shape
    if heads < 1 or c % heads:
        raise TensorError(f"channels {c} not divisible by {heads} heads")
    dh = c // heads
    t = h * w
    ws = [p.tensor for p in params.all()]
    wq, bq, wk, bk, wv, bv, wo, bo = (p.data for p in ws)
    X = xa.reshape(n, t, c)

    def split(a):
        return np.ascontiguousarray(a.reshape(n, t, heads, dh).transpose(0, 2, 1, 3))

    q = track(split(X @ wq + bq))
    k = track(split(X @ wk + bk))
    v = track(split(X @ wv + bv))
    inv = 1.0 / np.sqrt(dh)
    a = q @ k.transpose(0, 1, 3, 2)
    a *= inv
    a -= a.max(axis=-1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=-1, keepdims=True)
    track(a)
    ctx = track(np.ascontiguousarray((a @ v).transpose(0, 2, 1, 3)).reshape(n, t, c))
    out = X + ctx @ wo + bo

    def backward(g):
        g = (g[None] if squeeze else g).reshape(n, t, c)
        grads = [None] * 8
        gwo_in = g
        grads[6] = np.einsum("ntc,ntd->cd", ctx, gwo_in)
        grads[7] = gwo_in.sum(axis=(0, 1))
        gctx = split(gwo_in @ wo.T)
        ga = gctx @ v.transpose(0, 1, 3, 2)
        gv = a.transpose(0, 1, 3, 2) @ gctx
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gs *= inv
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q

        def merge(z):
            return z.transpose(0, 2, 1, 3).reshape(n, t, c)

        gq, gk, gv = merge(gq), merge(gk), merge(gv)
        for i, (gz, wz) in enumerate(((gq, wq), (gk, wk), (gv, wv))):
            grads[2 * i] = np.einsum("ntc,ntd->cd", X, gz)
            grads[2 * i + 1] = gz.sum(axis=(0, 1))
        gx = None
        if x.requires_grad:
            gx = g + gq @ wq.T + gk @ wk.T + gv @ wv.T
            gx = _unbatch(gx.reshape(n, h, w, c), squeeze)
        return (gx, *grads)

    return record(_unbatch(out.reshape(n, h, w, c), squeeze), (x, *ws), backward)


# ----------------------------------------------------------------------
# loss


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_focal_loss(logits, target, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` over all elements."""
    z = as_tensor(logits)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if tgt.shape != z.shape:
        raise TensorError(f"focal loss shape mismatch {z.shape} vs {tgt.shape}")
    pos = tgt > 0.5
    zt = np.where(pos, z.data, -z.data)  # logit of p_t
    log_pt = -_softplus(-zt)
    pt = sigmoid(zt)
    one_m = sigmoid(-zt)
    a_t = np.where(pos, alpha, 1.0 - alpha)
    mod = one_m ** gamma
    loss = -(a_t * mod * log_pt).mean()
    count = z.size

    def backward(g):
        dzt = a_t * mod * (gamma * pt * log_pt - one_m)
        return (np.where(pos, dzt, -dzt) * (float(g) / count),)

    return record(np.asarray(loss), (z,), backward)
