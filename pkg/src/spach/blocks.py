"""Transformer blocks, gated feed-forward variants and resampling layers.

Spatial-path tensors are token grids ``[D, H, W, d]``; channel-path tensors
are unbatched channel-first maps ``[C, D, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import autodiff as ad
from .attention import (
    MdtaParams,
    WindowAttnParams,
    WindowSpec,
    conv,
    effective_window,
    mdta,
    shifted_window_msa,
)
from .autodiff import Tensor
from .params import ParamInit, Scope

LN_EPS = 1e-5
GDFN = "gdfn"
GCFN = "gcfn"


# ---------------------------------------------------------------------------
# patch embedding / merging
# ---------------------------------------------------------------------------

def patch_embed(x: Tensor, E: Tensor, P: int) -> Tensor:
    """[1, D, H, W] volume -> [D/P, H/P, W/P, d] tokens; patches flattened z-major."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"patch_embed expects a [1, D, H, W] volume, got {x.shape}")
    _, D, H, W = x.shape
    for ax, n in zip("DHW", (D, H, W)):
        if n % P:
            raise ValueError(f"volume extent {ax}={n} not divisible by patch size {P}")
    if E.shape[0] != P ** 3:
        raise ValueError(f"embedding matrix has {E.shape[0]} rows, expected P^3 = {P ** 3}")
    t = x.reshape(D // P, P, H // P, P, W // P, P).permute(0, 2, 4, 1, 3, 5)
    return t.reshape(D // P, H // P, W // P, P ** 3) @ E


def patch_merge(z: Tensor, Wm: Tensor) -> Tensor:
    """Concatenate each 2x2x2 token neighbourhood (z-major) and project 8d -> 2d."""
    Dt, Ht, Wt, d = z.shape
    if Dt % 2 or Ht % 2 or Wt % 2:
        raise ValueError(f"patch_merge needs even token grid extents, got {(Dt, Ht, Wt)}")
    if Wm.shape[0] != 8 * d:
        raise ValueError(f"merge projection expects {Wm.shape[0]} inputs, neighbourhood has {8 * d}")
    t = z.reshape(Dt // 2, 2, Ht // 2, 2, Wt // 2, 2, d).permute(0, 2, 4, 1, 3, 5, 6)
    return t.reshape(Dt // 2, Ht // 2, Wt // 2, 8 * d) @ Wm


# ---------------------------------------------------------------------------
# spatial-wise (Swin-style) block
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, init: ParamInit, prefix: str, d: int, ratio: int) -> "MlpParams":
        init.normal(f"{prefix}w1", (d, ratio * d))
        init.zeros(f"{prefix}b1", (ratio * d,))
        init.normal(f"{prefix}w2", (ratio * d, d))
        init.zeros(f"{prefix}b2", (d,))
        return cls.bind(Scope(init.weights, prefix))

    @classmethod
    def bind(cls, s: Scope) -> "MlpParams":
        return cls(s["w1"], s["b1"], s["w2"], s["b2"])


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return ad.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


@dataclass
class SpatialBlockParams:
    norms: list           # four (scale, bias) pairs, one before each sub-layer
    attn_w: WindowAttnParams
    attn_sw: WindowAttnParams
    mlp_w: MlpParams
    mlp_sw: MlpParams

    @classmethod
    def create(cls, init: ParamInit, prefix: str, d: int, heads: int, M: int, mlp_ratio: int = 4):
        for i in range(4):
            init.ones(f"{prefix}ln{i}.scale", (d,))
            init.zeros(f"{prefix}ln{i}.bias", (d,))
        WindowAttnParams.create(init, f"{prefix}attn_w.", d, heads, M)
        MlpParams.create(init, f"{prefix}mlp_w.", d, mlp_ratio)
        WindowAttnParams.create(init, f"{prefix}attn_sw.", d, heads, M)
        MlpParams.create(init, f"{prefix}mlp_sw.", d, mlp_ratio)
        return cls.bind(Scope(init.weights, prefix), heads, M)

    @classmethod
    def bind(cls, s: Scope, heads: int, M: int) -> "SpatialBlockParams":
        norms = [(s[f"ln{i}.scale"], s[f"ln{i}.bias"]) for i in range(4)]
        return cls(norms,
                   WindowAttnParams.bind(s / "attn_w", heads, M),
                   WindowAttnParams.bind(s / "attn_sw", heads, M),
                   MlpParams.bind(s / "mlp_w"),
                   MlpParams.bind(s / "mlp_sw"))


def _padded_window_msa(y: Tensor, params: WindowAttnParams, shifted: bool) -> Tensor:
    grid = tuple(y.shape[:3])
    m, shift = effective_window(grid, params.M)
    pads = [(0, (-n) % m) for n in grid]
    if any(hi for _, hi in pads):
        y = ad.pad(y, pads + [(0, 0)], mode="reflect")
    spec = WindowSpec(m, shift if shifted else 0, tuple(y.shape[:3]))
    out = shifted_window_msa(y, params, spec)
    if any(hi for _, hi in pads):
        out = out[: grid[0], : grid[1], : grid[2]]
    return out


def spatial_block(z: Tensor, p: SpatialBlockParams) -> Tensor:
    """W-MSA / MLP / SW-MSA / MLP, each pre-normed with a residual."""
    def ln(x, i):
        return ad.layer_norm(x, p.norms[i][0], p.norms[i][1], LN_EPS)

    z_hat = _padded_window_msa(ln(z, 0), p.attn_w, shifted=False) + z
    z1 = mlp(ln(z_hat, 1), p.mlp_w) + z_hat
    z1_hat = _padded_window_msa(ln(z1, 2), p.attn_sw, shifted=True) + z1
    return mlp(ln(z1_hat, 3), p.mlp_sw) + z1_hat


# ---------------------------------------------------------------------------
# gated feed-forward networks
# ---------------------------------------------------------------------------

@dataclass
class GatedFfnParams:
    ln_scale: Tensor
    ln_bias: Tensor
    point_in_a_w: Tensor
    point_in_a_b: Tensor
    point_in_b_w: Tensor
    point_in_b_b: Tensor
    inner_a_w: Tensor
    inner_a_b: Tensor
    inner_b_w: Tensor
    inner_b_b: Tensor
    point_out_w: Tensor
    point_out_b: Tensor
    variant: str

    _NAMES = ("ln_scale", "ln_bias", "point_in_a_w", "point_in_a_b", "point_in_b_w", "point_in_b_b",
              "inner_a_w", "inner_a_b", "inner_b_w", "inner_b_b", "point_out_w", "point_out_b")

    @classmethod
    def create(cls, init: ParamInit, prefix: str, channels: int, expansion: float, variant: str):
        if variant not in (GDFN, GCFN):
            raise ValueError(f"unknown gated FFN variant {variant!r}")
        c = channels
        hidden = int(round(expansion * c))
        if hidden < 1:
            raise ValueError(f"expansion {expansion} leaves no hidden channels for C={c}")
        inner_in = 1 if variant == GDFN else hidden
        init.ones(f"{prefix}ln_scale", (c,))
        init.zeros(f"{prefix}ln_bias", (c,))
        for br in ("a", "b"):
            init.normal(f"{prefix}point_in_{br}_w", (hidden, c, 1, 1, 1))
            init.zeros(f"{prefix}point_in_{br}_b", (hidden,))
        for br in ("a", "b"):
            init.normal(f"{prefix}inner_{br}_w", (hidden, inner_in, 3, 3, 3))
            init.zeros(f"{prefix}inner_{br}_b", (hidden,))
        init.normal(f"{prefix}point_out_w", (c, hidden, 1, 1, 1))
        init.zeros(f"{prefix}point_out_b", (c,))
        return cls.bind(Scope(init.weights, prefix), variant)

    @classmethod
    def bind(cls, s: Scope, variant: str) -> "GatedFfnParams":
        p = cls(*(s[n] for n in cls._NAMES), variant=variant)
        hidden = p.inner_a_w.shape[0]
        expect_in = 1 if variant == GDFN else hidden
        if p.inner_a_w.shape[1] != expect_in or p.inner_b_w.shape != p.inner_a_w.shape:
            raise ValueError(f"{variant} inner conv shape {p.inner_a_w.shape} inconsistent with width {hidden}")
        return p

    @property
    def groups(self) -> int:
        return self.inner_a_w.shape[0] if self.variant == GDFN else 1


def gated_ffn(F: Tensor, p: GatedFfnParams) -> Tensor:
    """GELU(inner_a(point_a(LN F))) * inner_b(point_b(LN F)), projected back, plus F."""
    if F.shape[0] != p.ln_scale.shape[0]:
        raise ValueError(f"feature channels {F.shape[0]} != FFN channels {p.ln_scale.shape[0]}")
    y = ad.layer_norm(F, p.ln_scale, p.ln_bias, LN_EPS, axis=0)
    a = conv(conv(y, p.point_in_a_w, p.point_in_a_b), p.inner_a_w, p.inner_a_b, groups=p.groups)
    b = conv(conv(y, p.point_in_b_w, p.point_in_b_b), p.inner_b_w, p.inner_b_b, groups=p.groups)
    return conv(ad.gelu(a) * b, p.point_out_w, p.point_out_b) + F


# ---------------------------------------------------------------------------
# channel-wise block and resampling
# ---------------------------------------------------------------------------

@dataclass
class ChannelBlockParams:
    mdta: MdtaParams
    gdfn: GatedFfnParams
    gcfn: Optional[GatedFfnParams]

    @classmethod
    def create(cls, init: ParamInit, prefix: str, channels: int, heads: int,
               expansion: float = 2.0, use_gcfn: bool = True) -> "ChannelBlockParams":
        MdtaParams.create(init, f"{prefix}mdta.", channels, heads)
        GatedFfnParams.create(init, f"{prefix}gdfn.", channels, expansion, GDFN)
        if use_gcfn:
            GatedFfnParams.create(init, f"{prefix}gcfn.", channels, expansion, GCFN)
        return cls.bind(Scope(init.weights, prefix), heads, use_gcfn)

    @classmethod
    def bind(cls, s: Scope, heads: int, use_gcfn: bool = True) -> "ChannelBlockParams":
        return cls(MdtaParams.bind(s / "mdta", heads),
                   GatedFfnParams.bind(s / "gdfn", GDFN),
                   GatedFfnParams.bind(s / "gcfn", GCFN) if use_gcfn else None)


def channel_block(F: Tensor, p: ChannelBlockParams) -> Tensor:
    """MDTA -> GDFN -> GCFN; without GCFN params this is a Restormer block."""
    F = mdta(F, p.mdta)
    F = gated_ffn(F, p.gdfn)
    if p.gcfn is not None:
        F = gated_ffn(F, p.gcfn)
    return F


def downsample(F: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    """Strided 3x3x3 conv: [C, S] -> [2C, S/2]."""
    odd = [n for n in F.shape[1:] if n % 2]
    if odd:
        raise ValueError(f"downsample needs even spatial extents, got {F.shape[1:]}")
    return conv(F, w, b, stride=2)


def upsample(F: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    """Nearest x2 in every spatial axis, then 1x1x1 conv [C] -> [C/2]."""
    if F.shape[0] % 2:
        raise ValueError(f"upsample needs an even channel count, got {F.shape[0]}")
    for ax in (1, 2, 3):
        F = ad.repeat(F, 2, ax)
    return conv(F, w, b)


def init_downsample(init: ParamInit, prefix: str, channels: int) -> None:
    init.normal(f"{prefix}w", (2 * channels, channels, 3, 3, 3))
    init.zeros(f"{prefix}b", (2 * channels,))


def init_upsample(init: ParamInit, prefix: str, channels: int) -> None:
    init.normal(f"{prefix}w", (channels // 2, channels, 1, 1, 1))
    init.zeros(f"{prefix}b", (channels // 2,))
