"""3D (shifted-)window self-attention and channel-wise transposed attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor
from .params import ParamInit, Scope

MASK_VALUE = -100.0


@dataclass(frozen=True)
class WindowSpec:
    """Cubic window of extent ``M`` over a token grid, optionally shifted."""

    M: int
    shift: int
    grid: tuple

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"window size must be >= 1, got {self.M}")
        if len(self.grid) != 3:
            raise ValueError(f"token grid must be 3D, got {self.grid}")
        bad = [i for i, n in enumerate(self.grid) if n % self.M]
        if bad:
            raise ValueError(f"token grid {self.grid} not divisible by window {self.M} on axes {bad}; pad first")
        if self.shift not in (0, self.M // 2):
            raise ValueError(f"shift must be 0 or {self.M // 2} for M={self.M}, got {self.shift}")

    @property
    def num_windows(self) -> int:
        return int(np.prod([n // self.M for n in self.grid]))

    @property
    def tokens(self) -> int:
        return self.M ** 3


def effective_window(grid, M: int) -> tuple[int, int]:
    """Window extent and shift actually used on ``grid``.

    A grid no larger than the window is attended as a single unshifted window.
    """
    smallest = min(grid)
    if smallest <= M:
        return smallest, 0
    return M, M // 2


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------

def window_partition(x: Tensor, M: int) -> Tensor:
    """[D, H, W, d] -> [numWindows, M^3, d]; windows and tokens in z-major order."""
    D, H, W, d = x.shape
    for ax, n in zip("DHW", (D, H, W)):
        if n % M:
            raise ValueError(f"grid extent {ax}={n} not divisible by window {M}")
    t = x.reshape(D // M, M, H // M, M, W // M, M, d)
    t = t.permute(0, 2, 4, 1, 3, 5, 6)
    return t.reshape((D // M) * (H // M) * (W // M), M ** 3, d)


def window_reverse(windows: Tensor, M: int, grid) -> Tensor:
    D, H, W = grid
    d = windows.shape[-1]
    t = windows.reshape(D // M, H // M, W // M, M, M, M, d)
    t = t.permute(0, 3, 1, 4, 2, 5, 6)
    return t.reshape(D, H, W, d)


def cyclic_shift(x: Tensor, offsets) -> Tensor:
    """Toroidal roll of the three leading (grid) axes."""
    offsets = tuple(int(o) for o in np.broadcast_to(offsets, (3,)))
    if not any(offsets):
        return x
    return ad.roll(x, offsets, (0, 1, 2))


def relative_position_index(m: int, table_m: Optional[int] = None) -> np.ndarray:
    """Bias-table index for every token pair of an ``m``-window.

    ``table_m`` is the window size the table was sized for; offsets are
    encoded as (dz+T-1)(2T-1)^2 + (dy+T-1)(2T-1) + (dx+T-1) with T = table_m.
    """
    t = m if table_m is None else table_m
    if m > t:
        raise ValueError(f"window {m} larger than bias table window {t}")
    c = np.stack(np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"), -1).reshape(-1, 3)
    delta = c[:, None, :] - c[None, :, :] + (t - 1)
    span = 2 * t - 1
    return delta[..., 0] * span * span + delta[..., 1] * span + delta[..., 2]


def region_labels(grid, M: int, shift: int) -> np.ndarray:
    """Integer region id per token of the (already rolled) grid."""
    labels = np.zeros(tuple(grid), dtype=np.int64)
    for ax, n in enumerate(grid):
        lab = np.zeros(n, dtype=np.int64)
        if shift:
            lab[n - M:n - shift] = 1
            lab[n - shift:] = 2
        shape = [1, 1, 1]
        shape[ax] = n
        labels = labels * 3 + lab.reshape(shape)
    return labels


def build_shift_mask(spec: WindowSpec) -> np.ndarray:
    """Additive [numWindows, M^3, M^3] mask: 0 within a region, -100 across."""
    n_tok = spec.tokens
    if spec.shift == 0:
        return np.zeros((spec.num_windows, n_tok, n_tok))
    lab = region_labels(spec.grid, spec.M, spec.shift)
    win = window_partition(Tensor(lab[..., None].astype(np.float64)), spec.M).data[..., 0]
    return np.where(win[:, :, None] == win[:, None, :], 0.0, MASK_VALUE)


# ---------------------------------------------------------------------------
# window multi-head self-attention
# ---------------------------------------------------------------------------

@dataclass
class WindowAttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    bias_table: Tensor  # [heads, (2M-1)^3]
    heads: int
    M: int

    @classmethod
    def create(cls, init: ParamInit, prefix: str, d: int, heads: int, M: int) -> "WindowAttnParams":
        if d % heads:
            raise ValueError(f"embed dim {d} not divisible by heads {heads}")
        for n in ("q", "k", "v"):
            init.normal(f"{prefix}w{n}", (d, d))
            init.zeros(f"{prefix}b{n}", (d,))
        init.normal(f"{prefix}wo", (d, d))
        init.zeros(f"{prefix}bo", (d,))
        init.normal(f"{prefix}bias_table", (heads, (2 * M - 1) ** 3))
        return cls.bind(Scope(init.weights, prefix), heads, M)

    @classmethod
    def bind(cls, s: Scope, heads: int, M: int) -> "WindowAttnParams":
        p = cls(s["wq"], s["bq"], s["wk"], s["bk"], s["wv"], s["bv"], s["wo"], s["bo"],
                s["bias_table"], heads, M)
        if p.wq.shape[0] % heads:
            raise ValueError(f"embed dim {p.wq.shape[0]} not divisible by heads {heads}")
        if p.bias_table.shape != (heads, (2 * M - 1) ** 3):
            raise ValueError(f"bias table shape {p.bias_table.shape} != {(heads, (2 * M - 1) ** 3)}")
        return p

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def window_msa(tokens: Tensor, params: WindowAttnParams, mask: Optional[np.ndarray] = None,
               rel_index: Optional[np.ndarray] = None, return_attn: bool = False):
    """Multi-head attention inside each window with relative position bias.

    ``tokens`` is [numWindows, N, d] with N = m^3 for some m <= params.M.
    ``rel_index`` overrides the pair -> bias-table index map (shape [N, N]).
    """
    nw, n, d = tokens.shape
    h = params.heads
    if d != params.dim:
        raise ValueError(f"token dim {d} does not match attention dim {params.dim}")
    if d % h:
        raise ValueError(f"embed dim {d} not divisible by heads {h}")
    dh = d // h
    if rel_index is None:
        m = round(n ** (1 / 3))
        if m ** 3 != n:
            raise ValueError(f"window token count {n} is not a cube")
        rel_index = relative_position_index(m, params.M)

    def heads_first(t):
        return t.reshape(nw, n, h, dh).permute(0, 2, 1, 3)

    q = heads_first(tokens @ params.wq + params.bq)
    k = heads_first(tokens @ params.wk + params.bk)
    v = heads_first(tokens @ params.wv + params.bv)

    logits = (q @ k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    logits = logits + ad.take(params.bias_table, rel_index, axis=1)
    if mask is not None:
        mask = np.asarray(mask, dtype=tokens.dtype)
        if mask.shape != (nw, n, n):
            raise ValueError(f"mask shape {mask.shape} != {(nw, n, n)}")
        logits = logits + mask[:, None]
    attn = ad.softmax(logits, axis=-1)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(nw, n, d)
    out = out @ params.wo + params.bo
    return (out, attn) if return_attn else out


def shifted_window_msa(x: Tensor, params: WindowAttnParams, spec: WindowSpec, return_attn: bool = False):
    """Window attention over a [D, H, W, d] grid after a cyclic shift of -shift."""
    if tuple(x.shape[:3]) != tuple(spec.grid):
        raise ValueError(f"grid {x.shape[:3]} does not match window spec grid {spec.grid}")
    s = spec.shift
    xs = cyclic_shift(x, (-s, -s, -s)) if s else x
    windows = window_partition(xs, spec.M)
    mask = build_shift_mask(spec) if s else None
    res = window_msa(windows, params, mask, relative_position_index(spec.M, params.M), return_attn)
    out, attn = res if return_attn else (res, None)
    y = window_reverse(out, spec.M, spec.grid)
    if s:
        y = cyclic_shift(y, (s, s, s))
    return (y, attn) if return_attn else y


# ---------------------------------------------------------------------------
# multi-Dconv head transposed attention
# ---------------------------------------------------------------------------

@dataclass
class MdtaParams:
    ln_scale: Tensor
    ln_bias: Tensor
    point_qkv_w: Tensor  # [3C, C, 1, 1, 1]
    point_qkv_b: Tensor
    depth_qkv_w: Tensor  # [3C, 1, 3, 3, 3]
    depth_qkv_b: Tensor
    alpha: Tensor        # [heads]
    point_out_w: Tensor  # [C, C, 1, 1, 1]
    point_out_b: Tensor
    heads: int

    @classmethod
    def create(cls, init: ParamInit, prefix: str, channels: int, heads: int) -> "MdtaParams":
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        c = channels
        init.ones(f"{prefix}ln_scale", (c,))
        init.zeros(f"{prefix}ln_bias", (c,))
        init.normal(f"{prefix}point_qkv_w", (3 * c, c, 1, 1, 1))
        init.zeros(f"{prefix}point_qkv_b", (3 * c,))
        init.normal(f"{prefix}depth_qkv_w", (3 * c, 1, 3, 3, 3))
        init.zeros(f"{prefix}depth_qkv_b", (3 * c,))
        init.ones(f"{prefix}alpha", (heads,))
        init.normal(f"{prefix}point_out_w", (c, c, 1, 1, 1))
        init.zeros(f"{prefix}point_out_b", (c,))
        return cls.bind(Scope(init.weights, prefix), heads)

    @classmethod
    def bind(cls, s: Scope, heads: int) -> "MdtaParams":
        names = ("ln_scale", "ln_bias", "point_qkv_w", "point_qkv_b", "depth_qkv_w",
                 "depth_qkv_b", "alpha", "point_out_w", "point_out_b")
        p = cls(*(s[n] for n in names), heads=heads)
        if p.channels % heads:
            raise ValueError(f"channels {p.channels} not divisible by heads {heads}")
        return p

    @property
    def channels(self) -> int:
        return self.ln_scale.shape[0]


def conv(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, groups: int = 1) -> Tensor:
    """conv3d on an unbatched [C, D, H, W] map with 'same' padding."""
    k = w.shape[2]
    spec = ConvSpec.cubic(k, stride=stride, padding=k // 2, groups=groups)
    y = ad.conv3d(x.reshape(1, *x.shape), w, b, spec)
    return y.reshape(y.shape[1:])


def mdta(F: Tensor, params: MdtaParams, return_attn: bool = False):
    """Channel-wise attention: a per-head (C/h x C/h) map, linear in voxel count."""
    c = F.shape[0]
    if c != params.channels:
        raise ValueError(f"feature channels {c} != MDTA channels {params.channels}")
    h = params.heads
    spatial = F.shape[1:]
    vox = int(np.prod(spatial))

    y = ad.layer_norm(F, params.ln_scale, params.ln_bias, eps=1e-5, axis=0)
    qkv = conv(y, params.point_qkv_w, params.point_qkv_b)
    qkv = conv(qkv, params.depth_qkv_w, params.depth_qkv_b, groups=3 * c)
    qkv = qkv.reshape(3, h, c // h, vox)
    q, k, v = qkv[0], qkv[1], qkv[2]

    logits = (q @ k.permute(0, 2, 1)) / params.alpha.reshape(h, 1, 1)
    attn = ad.softmax(logits, axis=-1)  # [h, C/h, C/h]; rows sum to one
    out = (attn @ v).reshape(c, *spatial)
    out = conv(out, params.point_out_w, params.point_out_b) + F
    return (out, attn) if return_attn else out
