"""Differentiable primitives.

Every op takes Tensors (or array-likes for constants), computes the forward
value with numpy and registers a closure that pushes the output gradient to
its parents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    if not isinstance(b, Tensor):
        b = _const(b, a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: a._accum(-g), "neg")


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        a._accum(g * p * a.data ** (p - 1))

    return make_result(a.data ** p, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: a._accum(g * out), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: a._accum(g / a.data), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: a._accum(g * 0.5 / out), "sqrt")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        x._accum(g * (cdf + xd * pdf))

    return make_result(xd * cdf, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.shape))

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g / n, x.shape))

    return make_result(np.asarray(out), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: x._accum(g.reshape(x.shape)), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return make_result(out, (x,), lambda g: x._accum(np.transpose(g, inv)), "permute")


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        x._accum(gx)

    return make_result(np.array(out, copy=True), (x,), backward, "slice")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        # move gathered dims to front so add.at indexes the leading axis
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        gxm = np.moveaxis(gx, axis, 0)
        np.add.at(gxm, indices, gm)
        x._accum(gx)

    return make_result(out, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return make_result(out, tensors, backward, "concat")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in np.atleast_1d(shifts))
    axes = tuple(int(a) for a in np.atleast_1d(axes))
    out = np.roll(x.data, shifts, axes)
    back = tuple(-s for s in shifts)
    return make_result(out, (x,), lambda g: x._accum(np.roll(g, back, axes)), "roll")


def pad(x: Tensor, widths, mode: str = "constant") -> Tensor:
    """Zero or reflection padding; ``widths`` is one (before, after) per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim:
        raise ValueError(f"pad widths for {len(widths)} axes given to a rank-{x.ndim} tensor")
    if mode == "constant":
        out = np.pad(x.data, widths, mode="constant")
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
        return make_result(out, (x,), lambda g: x._accum(g[sl]), "pad")
    if mode == "reflect":
        # reflection is a gather; compose per-axis takes so backward folds correctly
        out = x
        for ax, (lo, hi) in enumerate(widths):
            if lo == 0 and hi == 0:
                continue
            n = x.shape[ax]
            if lo >= n or hi >= n:
                raise ValueError(f"reflect pad ({lo},{hi}) too wide for axis {ax} of extent {n}")
            idx = np.pad(np.arange(n), (lo, hi), mode="reflect")
            out = take(out, idx, ax)
        return out
    raise ValueError(f"unknown pad mode {mode!r}")


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each element ``repeats`` times along ``axis`` (nearest upsampling)."""
    axis = axis % x.ndim
    out = np.repeat(x.data, repeats, axis=axis)

    def backward(g):
        shp = list(x.shape)
        shp.insert(axis + 1, repeats)
        x._accum(g.reshape(shp).sum(axis=axis + 1))

    return make_result(out, (x,), backward, "repeat")


# ---------------------------------------------------------------------------
# linear algebra / normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` with broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return make_result(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over ``axis`` then apply a per-channel affine map.

    Positions with zero variance (and ``var + eps == 0``) normalise to 0.
    """
    axis = axis % x.ndim
    c = x.shape[axis]
    if scale.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"layer_norm affine shapes {scale.shape}/{bias.shape} do not match channel extent {c}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    sc = scale.data.reshape(bshape)
    bi = bias.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    denom = var + eps
    with np.errstate(divide="ignore"):
        inv = np.where(denom > 0, 1.0 / np.sqrt(np.where(denom > 0, denom, 1.0)), 0.0).astype(x.dtype)
    xhat = xc * inv
    out = xhat * sc + bi
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        if x.requires_grad:
            gh = g * sc
            m1 = gh.mean(axis=axis, keepdims=True)
            m2 = (gh * xhat).mean(axis=axis, keepdims=True)
            x._accum(inv * (gh - m1 - xhat * m2))
        if scale.requires_grad:
            scale._accum((g * xhat).sum(axis=other))
        if bias.requires_grad:
            bias._accum(g.sum(axis=other))

    return make_result(out, (x, scale, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)
    groups: int = 1

    @classmethod
    def cubic(cls, kernel: int = 3, stride: int = 1, padding: Optional[int] = None, groups: int = 1):
        if padding is None:
            padding = kernel // 2
        return cls((kernel,) * 3, (stride,) * 3, (padding,) * 3, groups)

    def out_shape(self, spatial) -> tuple:
        out = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(spatial, self.padding, self.kernel, self.stride))
        if any(o < 1 for o in out):
            raise ValueError(f"conv output extent {out} < 1 for input {tuple(spatial)} with {self}")
        return out


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, spec: Optional[ConvSpec] = None) -> Tensor:
    """Cross-correlation over ``[N, C_in, D, H, W]`` with grouped weights.

    ``w`` has shape ``[C_out, C_in / groups, kd, kh, kw]``.
    """
    if spec is None:
        spec = ConvSpec(kernel=tuple(w.shape[2:]), padding=tuple(k // 2 for k in w.shape[2:]))
    if x.ndim != 5:
        raise ValueError(f"conv3d expects [N, C, D, H, W], got shape {x.shape}")
    n, cin = x.shape[:2]
    cout, cig = w.shape[:2]
    g_ = spec.groups
    if g_ < 1 or cin % g_ or cout % g_:
        raise ValueError(f"groups={g_} must divide in_channels={cin} and out_channels={cout}")
    if cig != cin // g_:
        raise ValueError(f"weight shape {w.shape} expects {cig * g_} input channels, got {cin}")
    if tuple(w.shape[2:]) != tuple(spec.kernel):
        raise ValueError(f"weight kernel {w.shape[2:]} disagrees with spec kernel {spec.kernel}")
    cog = cout // g_
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    do, ho, wo = spec.out_shape(x.shape[2:])
    vol = do * ho * wo
    dt = np.result_type(x.dtype, w.dtype)

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in spec.padding]).astype(dt, copy=False)
    xp = xp.reshape(n, g_, cig, *xp.shape[2:])
    offsets = [(a, b_, c) for a in range(kd) for b_ in range(kh) for c in range(kw)]

    def window(arr, k):
        a, b_, c = k
        return arr[..., a:a + sd * (do - 1) + 1:sd, b_:b_ + sh * (ho - 1) + 1:sh, c:c + sw * (wo - 1) + 1:sw]

    depthwise = cig == 1 and cog == 1
    wd = w.data.astype(dt, copy=False)
    if depthwise:
        wk = wd.reshape(g_, len(offsets))
        out = np.zeros((n, g_, do, ho, wo), dtype=dt)
        for i, k in enumerate(offsets):
            out += wk[None, :, i, None, None, None] * window(xp, k)[:, :, 0]
        cols = None
    else:
        # im2col: [N, G, C_in/G * K, V]; reused by backward
        cols = np.empty((n, g_, cig, len(offsets), vol), dtype=dt)
        for i, k in enumerate(offsets):
            cols[:, :, :, i, :] = window(xp, k).reshape(n, g_, cig, vol)
        cols = cols.reshape(n, g_, cig * len(offsets), vol)
        wm = wd.reshape(g_, cog, cig * len(offsets))
        out = np.matmul(wm, cols)
    out = out.reshape(n, cout, do, ho, wo)
    if b is not None:
        out = out + b.data.astype(dt, copy=False).reshape(1, cout, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward(gout):
        pd, ph, pw = spec.padding
        if b is not None and b.requires_grad:
            b._accum(gout.sum(axis=(0, 2, 3, 4)).astype(b.dtype, copy=False))
        if depthwise:
            gg = gout.reshape(n, g_, do, ho, wo)
            if w.requires_grad:
                gw = np.empty((g_, len(offsets)), dtype=dt)
                for i, k in enumerate(offsets):
                    gw[:, i] = (gg * window(xp, k)[:, :, 0]).sum(axis=(0, 2, 3, 4))
                w._accum(gw.reshape(w.shape).astype(w.dtype, copy=False))
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=dt)
                for i, k in enumerate(offsets):
                    window(gxp, k)[:, :, 0] += wk[None, :, i, None, None, None] * gg
                gx = gxp.reshape(n, cin, *xp.shape[3:])
                x._accum(gx[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]].astype(x.dtype, copy=False))
            return
        gg = gout.reshape(n, g_, cog, vol)
        if w.requires_grad:
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0)
            w._accum(gw.reshape(w.shape).astype(w.dtype, copy=False))
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wm, -1, -2), gg).reshape(n, g_, cig, len(offsets), do, ho, wo)
            gxp = np.zeros(xp.shape, dtype=dt)
            for i, k in enumerate(offsets):
                window(gxp, k)[...] += gcols[:, :, :, i]
            gx = gxp.reshape(n, cin, *xp.shape[3:])
            x._accum(gx[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]].astype(x.dtype, copy=False))

    return make_result(out, parents, backward, "conv3d")
