"""Spatial + channel-wise encoder-decoder transformer for volume denoising."""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from . import autodiff as ad
from .attention import conv
from .autodiff import Tensor
from .blocks import (
    ChannelBlockParams,
    SpatialBlockParams,
    channel_block,
    downsample,
    init_downsample,
    init_upsample,
    patch_embed,
    patch_merge,
    spatial_block,
    upsample,
)
from .params import ParamInit, Scope

ModelWeights = Dict[str, Tensor]

LEVELS = 4


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    Channel widths are C, 2C, 4C, 8C at scales 1, 1/2, 1/4, 1/8.  The spatial
    path embeds P^3 patches into ``4C`` dims at scale 1/P (=1/4) and one patch
    merge brings it to ``8C`` dims at scale 1/8, where both paths are fused.
    """

    C: int = 12
    P: int = 4
    M: int = 2
    heads_channel: Tuple[int, ...] = (1, 2, 4, 8)
    heads_spatial: Tuple[int, ...] = (2, 4)
    enc_blocks: Tuple[int, ...] = (1, 1, 1, 1)
    dec_blocks: Tuple[int, ...] = (1, 1, 1, 1)
    refine_blocks: int = 1
    spatial_blocks: Tuple[int, ...] = (1, 1)
    expansion: float = 2.0
    mlp_ratio: int = 4
    use_gcfn: bool = True

    def __post_init__(self):
        for name in ("heads_channel", "heads_spatial", "enc_blocks", "dec_blocks", "spatial_blocks"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def d_spatial(self) -> int:
        return 4 * self.C

    @property
    def divisor(self) -> int:
        """Every input extent must be a multiple of this."""
        return math.lcm(2 ** (LEVELS - 1), 2 * self.P)

    def widths(self) -> list:
        return [self.C * 2 ** i for i in range(LEVELS)]

    def validate(self) -> None:
        if self.C < 1 or self.P < 1 or self.M < 1:
            raise ValueError(f"C, P, M must be positive (got C={self.C}, P={self.P}, M={self.M})")
        for name in ("heads_channel", "enc_blocks", "dec_blocks"):
            if len(getattr(self, name)) != LEVELS:
                raise ValueError(f"{name} needs {LEVELS} entries, got {getattr(self, name)}")
        if len(self.heads_spatial) != 2 or len(self.spatial_blocks) != 2:
            raise ValueError("heads_spatial and spatial_blocks need 2 entries (two spatial levels)")
        for c, h in zip(self.widths(), self.heads_channel):
            if h < 1 or c % h:
                raise ValueError(f"channel width {c} not divisible by heads {h}")
        for d, h in zip((self.d_spatial, 2 * self.d_spatial), self.heads_spatial):
            if h < 1 or d % h:
                raise ValueError(f"spatial embed dim {d} not divisible by heads {h}")
        if 2 * self.P != 2 ** (LEVELS - 1):
            # one merge after P-patching must land on the channel path's deepest scale
            raise ValueError(f"patch size P={self.P} with one merge does not reach scale 1/{2 ** (LEVELS - 1)}")
        if self.expansion <= 0 or self.mlp_ratio < 1:
            raise ValueError("expansion factors must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _register(init: ParamInit, cfg: ModelConfig) -> None:
    C = cfg.C
    widths = cfg.widths()
    init.normal("stem.w", (C, 1, 3, 3, 3))
    init.zeros("stem.b", (C,))
    for lvl, (c, h, n) in enumerate(zip(widths, cfg.heads_channel, cfg.enc_blocks), start=1):
        for j in range(n):
            ChannelBlockParams.create(init, f"enc{lvl}.{j}.", c, h, cfg.expansion, cfg.use_gcfn)
        if lvl < LEVELS:
            init_downsample(init, f"down{lvl}.", c)

    d = cfg.d_spatial
    init.normal("embed.E", (cfg.P ** 3, d))
    for j in range(cfg.spatial_blocks[0]):
        SpatialBlockParams.create(init, f"sp1.{j}.", d, cfg.heads_spatial[0], cfg.M, cfg.mlp_ratio)
    init.normal("merge.W", (8 * d, 2 * d))
    for j in range(cfg.spatial_blocks[1]):
        SpatialBlockParams.create(init, f"sp2.{j}.", 2 * d, cfg.heads_spatial[1], cfg.M, cfg.mlp_ratio)

    top = widths[-1]
    init.normal("fuse.w", (top, top + 2 * d, 1, 1, 1))
    init.zeros("fuse.b", (top,))
    for lvl in range(LEVELS, 0, -1):
        c = widths[lvl - 1]
        if lvl < LEVELS:
            init_upsample(init, f"up{lvl}.", 2 * c)
            init.normal(f"reduce{lvl}.w", (c, 2 * c, 1, 1, 1))
            init.zeros(f"reduce{lvl}.b", (c,))
        for j in range(cfg.dec_blocks[lvl - 1]):
            ChannelBlockParams.create(init, f"dec{lvl}.{j}.", c, cfg.heads_channel[lvl - 1],
                                      cfg.expansion, cfg.use_gcfn)
    for j in range(cfg.refine_blocks):
        ChannelBlockParams.create(init, f"refine.{j}.", C, cfg.heads_channel[0], cfg.expansion, cfg.use_gcfn)
    # zero head: the untrained network returns its input unchanged
    init.zeros("head.w", (1, C, 3, 3, 3))
    init.zeros("head.b", (1,))


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelWeights:
    """Deterministic N(0, 0.02) initialisation; LN scale 1, alpha 1, zero head."""
    config.validate()
    init = ParamInit(seed, dtype)
    _register(init, config)
    return init.weights


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    init = ParamInit(dry_run=True)
    _register(init, config)
    return OrderedDict((k, v.shape) for k, v in init.weights.items())


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter inventory (cross-checked against build in tests)."""
    C, cfg = config.C, config
    k3 = 27

    def ln(c):
        return 2 * c

    def cblock(c, heads):
        hid = int(round(cfg.expansion * c))
        n = ln(c) + (3 * c * c + 3 * c) + (3 * c * k3 + 3 * c) + heads + (c * c + c)
        ffn_common = ln(c) + 2 * (hid * c + hid) + (c * hid + c)
        n += ffn_common + 2 * (hid * k3 + hid)
        if cfg.use_gcfn:
            n += ffn_common + 2 * (hid * hid * k3 + hid)
        return n

    def sblock(d, heads):
        r = cfg.mlp_ratio
        attn = 4 * (d * d + d) + heads * (2 * cfg.M - 1) ** 3
        mlp = d * r * d + r * d + r * d * d + d
        return 4 * ln(d) + 2 * attn + 2 * mlp

    widths = config.widths()
    total = C * k3 + C + C * k3 + 1  # stem + head
    for lvl, c in enumerate(widths, start=1):
        total += cfg.enc_blocks[lvl - 1] * cblock(c, cfg.heads_channel[lvl - 1])
        total += cfg.dec_blocks[lvl - 1] * cblock(c, cfg.heads_channel[lvl - 1])
        if lvl < LEVELS:
            total += 2 * c * c * k3 + 2 * c            # downsample c -> 2c
            total += c * 2 * c + c                      # upsample 2c -> c
            total += c * 2 * c + c                      # skip reduction 2c -> c
    total += cfg.refine_blocks * cblock(C, cfg.heads_channel[0])
    d = config.d_spatial
    total += cfg.P ** 3 * d + 8 * d * 2 * d
    total += cfg.spatial_blocks[0] * sblock(d, cfg.heads_spatial[0])
    total += cfg.spatial_blocks[1] * sblock(2 * d, cfg.heads_spatial[1])
    top = widths[-1]
    total += top * (top + 2 * d) + top
    return total


def count_elements(weights: ModelWeights) -> int:
    return sum(int(np.prod(t.shape)) for t in weights.values())


def check_weights(weights: ModelWeights, config: ModelConfig) -> None:
    """Raise ValueError naming the first name/shape disagreement with ``config``."""
    expect = expected_shapes(config)
    missing = [k for k in expect if k not in weights]
    extra = [k for k in weights if k not in expect]
    if missing or extra:
        raise ValueError(f"weights do not match config: missing={missing[:3]} unexpected={extra[:3]}")
    for k, shp in expect.items():
        if tuple(weights[k].shape) != tuple(shp):
            raise ValueError(f"shape mismatch for {k!r}: file has {tuple(weights[k].shape)}, config expects {shp}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _chan_blocks(F, s: Scope, prefix: str, n: int, heads: int, use_gcfn: bool):
    for j in range(n):
        F = channel_block(F, ChannelBlockParams.bind(s / f"{prefix}.{j}", heads, use_gcfn))
    return F


def check_input(shape, config: ModelConfig) -> None:
    if len(shape) != 4 or shape[0] != 1:
        raise ValueError(f"model input must be [1, D, H, W], got {tuple(shape)}")
    for ax, n in zip("DHW", shape[1:]):
        if n % config.divisor:
            raise ValueError(f"input extent {ax}={n} is not a multiple of {config.divisor}")


def forward(x: Tensor, weights: ModelWeights, config: ModelConfig) -> Tensor:
    """Denoise a [1, D, H, W] volume; returns R + x with R from the zero-init head."""
    check_input(x.shape, config)
    cfg = config
    s = Scope(weights)
    widths = cfg.widths()

    # channel-wise encoder
    F = conv(x, s["stem.w"], s["stem.b"])
    skips = []
    for lvl in range(1, LEVELS + 1):
        F = _chan_blocks(F, s, f"enc{lvl}", cfg.enc_blocks[lvl - 1], cfg.heads_channel[lvl - 1], cfg.use_gcfn)
        if lvl < LEVELS:
            skips.append(F)
            F = downsample(F, s[f"down{lvl}.w"], s[f"down{lvl}.b"])
    F_lc = F

    # spatial-wise encoder
    z = patch_embed(x, s["embed.E"], cfg.P)
    for j in range(cfg.spatial_blocks[0]):
        z = spatial_block(z, SpatialBlockParams.bind(s / f"sp1.{j}", cfg.heads_spatial[0], cfg.M))
    z = patch_merge(z, s["merge.W"])
    for j in range(cfg.spatial_blocks[1]):
        z = spatial_block(z, SpatialBlockParams.bind(s / f"sp2.{j}", cfg.heads_spatial[1], cfg.M))
    F_ls = z.permute(3, 0, 1, 2)
    if F_ls.shape[1:] != F_lc.shape[1:]:
        raise AssertionError(f"latent scale mismatch: channel {F_lc.shape[1:]} vs spatial {F_ls.shape[1:]}")

    # fused latent and channel-wise decoder
    F = conv(ad.concat([F_lc, F_ls], axis=0), s["fuse.w"], s["fuse.b"])
    for lvl in range(LEVELS, 0, -1):
        if lvl < LEVELS:
            F = upsample(F, s[f"up{lvl}.w"], s[f"up{lvl}.b"])
            F = ad.concat([F, skips[lvl - 1]], axis=0)
            F = conv(F, s[f"reduce{lvl}.w"], s[f"reduce{lvl}.b"])
        F = _chan_blocks(F, s, f"dec{lvl}", cfg.dec_blocks[lvl - 1], cfg.heads_channel[lvl - 1], cfg.use_gcfn)
    assert F.shape[0] == widths[0]
    F = _chan_blocks(F, s, "refine", cfg.refine_blocks, cfg.heads_channel[0], cfg.use_gcfn)
    R = conv(F, s["head.w"], s["head.b"])
    return R + x


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

WEIGHT_MAGIC = b"SPW1"
WEIGHT_VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(weights: ModelWeights, path) -> None:
    """Write the SPW1 container: header, then name/rank/extents/fp32 payload per entry."""
    chunks = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(weights))]
    for name, t in weights.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightFileError(f"parameter name too long: {name[:40]}...")
        data = np.asarray(t.data if isinstance(t, Tensor) else t)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, config: ModelConfig | None = None) -> ModelWeights:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {buf[:4]!r}, expected {WEIGHT_MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise WeightFileError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(buf):
            raise WeightFileError(f"{path}: truncated in entry name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise WeightFileError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        pos += nbytes
        if name in out:
            raise WeightFileError(f"{path}: duplicate entry {name!r}")
        out[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    if pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - pos} trailing bytes")
    if config is not None:
        check_weights(out, config)
    return out
