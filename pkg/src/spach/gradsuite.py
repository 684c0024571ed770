"""fp64 finite-difference suite over every op, block and a micro model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import autodiff as ad
from .attention import (
    MdtaParams,
    WindowAttnParams,
    WindowSpec,
    build_shift_mask,
    mdta,
    shifted_window_msa,
    window_msa,
)
from .autodiff import ConvSpec, Tensor, grad_check
from .blocks import (
    GCFN,
    GDFN,
    ChannelBlockParams,
    GatedFfnParams,
    SpatialBlockParams,
    channel_block,
    downsample,
    gated_ffn,
    patch_embed,
    patch_merge,
    spatial_block,
    upsample,
)
from .model import ModelConfig, build, forward
from .params import ParamInit

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    report: ad.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape))


def _w(rng, *shape):
    # weighted sum keeps the loss sensitive to every output coordinate
    return rng.normal(size=shape)


def _bundle_inputs(init: ParamInit, rng, scale=0.3) -> List[Tensor]:
    """Re-randomise every registered tensor so no gradient is trivially zero."""
    ts = list(init.weights.values())
    for t in ts:
        t.data = rng.normal(0.0, scale, size=t.shape)
    return ts


def _op_cases(seed: int) -> List[tuple]:
    rng = np.random.default_rng(seed)
    cases = []

    def add_case(name, inputs, f, tol=OP_TOL, max_coords=None):
        cases.append((name, inputs, f, tol, max_coords))

    a, b = _t(rng, 3, 4), _t(rng, 4)
    wa = _w(rng, 3, 4)
    add_case("add_broadcast", [a, b], lambda a, b: ((a + b) * wa).sum())
    add_case("mul_broadcast", [_t(rng, 2, 3), _t(rng, 1, 3)], lambda a, b: ((a * b) * _w(np.random.default_rng(1), 2, 3)).sum())
    add_case("div", [_t(rng, 3), Tensor(rng.uniform(1.0, 2.0, 3))], lambda a, b: (a / b).sum())
    add_case("sub_neg_pow", [_t(rng, 4)], lambda a: ((-a - 1.0) ** 2).sum())
    add_case("exp_sqrt", [Tensor(rng.uniform(0.5, 2.0, 5))], lambda a: (ad.sqrt(a) * ad.exp(a)).sum())
    wm = _w(rng, 2, 3, 2)
    add_case("matmul_batched", [_t(rng, 2, 3, 4), _t(rng, 4, 2)], lambda a, b: ((a @ b) * wm).sum())
    ws = _w(rng, 5)
    add_case("softmax", [_t(rng, 5)], lambda x: (ad.softmax(x, 0) * ws).sum())
    wl = _w(rng, 2, 4)
    add_case("layer_norm_last", [_t(rng, 2, 4), _t(rng, 4), _t(rng, 4)],
             lambda x, s, b: (ad.layer_norm(x, s, b, 1e-5) * wl).sum())
    wl0 = _w(rng, 3, 2, 2)
    add_case("layer_norm_axis0", [_t(rng, 3, 2, 2), _t(rng, 3), _t(rng, 3)],
             lambda x, s, b: (ad.layer_norm(x, s, b, 1e-5, axis=0) * wl0).sum())
    wg = _w(rng, 6)
    add_case("gelu", [_t(rng, 6, scale=2.0)], lambda x: (ad.gelu(x) * wg).sum())
    add_case("gelu_tail", [Tensor(np.array([-50.0, -40.0]))], lambda x: ad.gelu(x).sum())
    wr = _w(rng, 4, 3)
    add_case("reshape_permute", [_t(rng, 2, 6)], lambda x: (x.reshape(3, 4).permute(1, 0) * wr).sum())
    add_case("concat_slice", [_t(rng, 2, 3), _t(rng, 2, 2)],
             lambda a, b: (ad.concat([a, b], 1)[:, 1:4] * _w(np.random.default_rng(2), 2, 3)).sum())
    add_case("pad_reflect", [_t(rng, 3, 4)],
             lambda x: (ad.pad(x, [(1, 2), (2, 1)], "reflect") * _w(np.random.default_rng(3), 6, 7)).sum())
    add_case("pad_zero_roll", [_t(rng, 3, 4)],
             lambda x: (ad.roll(ad.pad(x, [(1, 0), (0, 1)]), (1, -2), (0, 1)) * _w(np.random.default_rng(4), 4, 5)).sum())
    add_case("take_repeat", [_t(rng, 3, 2)],
             lambda x: (ad.repeat(ad.take(x, np.array([[0, 2], [2, 1]]), 0), 2, 2) * _w(np.random.default_rng(5), 2, 2, 4)).sum())
    add_case("mean_sum", [_t(rng, 2, 3)], lambda x: (x.mean(axis=0) * x.sum(axis=1, keepdims=True)).sum())
    wc = _w(rng, 1, 3, 3, 3, 3)
    add_case("conv3d_dense", [_t(rng, 1, 2, 3, 3, 3), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)],
             lambda x, w, b: (ad.conv3d(x, w, b, ConvSpec.cubic(3)) * wc).sum())
    wd = _w(rng, 2, 4, 3, 3, 3)
    add_case("conv3d_depthwise", [_t(rng, 2, 4, 3, 3, 3), _t(rng, 4, 1, 3, 3, 3), _t(rng, 4)],
             lambda x, w, b: (ad.conv3d(x, w, b, ConvSpec.cubic(3, groups=4)) * wd).sum())
    wgp = _w(rng, 1, 4, 2, 2, 2)
    add_case("conv3d_grouped_strided", [_t(rng, 1, 4, 4, 4, 4), _t(rng, 4, 2, 3, 3, 3)],
             lambda x, w: (ad.conv3d(x, w, None, ConvSpec.cubic(3, stride=2, groups=2)) * wgp).sum())
    return cases


def _block_cases(seed: int) -> List[tuple]:
    rng = np.random.default_rng(seed)
    cases = []

    # window attention with a shift mask
    init = ParamInit(seed)
    wap = WindowAttnParams.create(init, "", 4, 2, 2)
    spec = WindowSpec(2, 1, (4, 2, 2))
    mask = build_shift_mask(spec)
    tok = _t(rng, spec.num_windows, 8, 4)
    w1 = _w(rng, *tok.shape)
    ins = _bundle_inputs(init, rng)
    cases.append(("window_msa", [tok] + ins,
                  lambda x, *_: (window_msa(x, wap, mask) * w1).sum(), OP_TOL, None))

    init = ParamInit(seed + 1)
    swp = WindowAttnParams.create(init, "", 4, 2, 2)
    grid = _t(rng, 4, 4, 2, 4)
    w2 = _w(rng, *grid.shape)
    ins = _bundle_inputs(init, rng)
    cases.append(("shifted_window_msa", [grid] + ins,
                  lambda x, *_: (shifted_window_msa(x, swp, WindowSpec(2, 1, (4, 4, 2))) * w2).sum(), OP_TOL, None))

    init = ParamInit(seed + 2)
    mp = MdtaParams.create(init, "", 4, 2)
    F = _t(rng, 4, 3, 3, 3)
    w3 = _w(rng, *F.shape)
    ins = _bundle_inputs(init, rng)
    mp.alpha.data = rng.uniform(0.5, 1.5, size=mp.alpha.shape)
    cases.append(("mdta", [F] + ins, lambda x, *_: (mdta(x, mp) * w3).sum(), OP_TOL, None))

    for variant in (GDFN, GCFN):
        init = ParamInit(seed + 3)
        gp = GatedFfnParams.create(init, "", 2, 2.0, variant)
        F = _t(rng, 2, 3, 3, 3)
        wv = _w(rng, *F.shape)
        ins = _bundle_inputs(init, rng)
        cases.append((f"gated_ffn_{variant}", [F] + ins,
                      lambda x, *_, gp=gp, wv=wv: (gated_ffn(x, gp) * wv).sum(), OP_TOL, None))

    init = ParamInit(seed + 4)
    cb = ChannelBlockParams.create(init, "", 2, 1, 2.0, True)
    F = _t(rng, 2, 2, 2, 2)
    w4 = _w(rng, *F.shape)
    ins = _bundle_inputs(init, rng)
    cb.mdta.alpha.data = np.ones(1)
    cases.append(("channel_block", [F] + ins, lambda x, *_: (channel_block(x, cb) * w4).sum(), OP_TOL, None))

    init = ParamInit(seed + 5)
    sb = SpatialBlockParams.create(init, "", 4, 2, 2, mlp_ratio=2)
    z = _t(rng, 4, 4, 4, 4)
    w5 = _w(rng, *z.shape)
    ins = _bundle_inputs(init, rng)
    for i in range(4):
        sb.norms[i][0].data = 1.0 + 0.3 * rng.normal(size=4)
    cases.append(("spatial_block", [z] + ins, lambda x, *_: (spatial_block(x, sb) * w5).sum(), OP_TOL, None))

    z3 = _t(rng, 3, 3, 3, 4)
    w5b = _w(rng, *z3.shape)
    cases.append(("spatial_block_padded", [z3] + ins, lambda x, *_: (spatial_block(x, sb) * w5b).sum(), OP_TOL, None))

    E = _t(rng, 8, 3)
    vol = _t(rng, 1, 4, 4, 2)
    w6 = _w(rng, 2, 2, 1, 3)
    cases.append(("patch_embed", [vol, E], lambda v, e: (patch_embed(v, e, 2) * w6).sum(), OP_TOL, None))
    Wm = _t(rng, 16, 4)
    zz = _t(rng, 2, 4, 2, 2)
    w7 = _w(rng, 1, 2, 1, 4)
    cases.append(("patch_merge", [zz, Wm], lambda z, m: (patch_merge(z, m) * w7).sum(), OP_TOL, None))

    F = _t(rng, 2, 4, 4, 4)
    dw, db = _t(rng, 4, 2, 3, 3, 3, scale=0.3), _t(rng, 4)
    w8 = _w(rng, 4, 2, 2, 2)
    cases.append(("downsample", [F, dw, db], lambda x, w, b: (downsample(x, w, b) * w8).sum(), OP_TOL, None))
    F = _t(rng, 4, 2, 2, 2)
    uw, ub = _t(rng, 2, 4, 1, 1, 1), _t(rng, 2)
    w9 = _w(rng, 2, 4, 4, 4)
    cases.append(("upsample", [F, uw, ub], lambda x, w, b: (upsample(x, w, b) * w9).sum(), OP_TOL, None))
    return cases


def model_case(seed: int = 0, input_coords: int = 48, param_coords: int = 2):
    """C=2 model on 8^3 with a random (non-zero) head, checked on sampled coordinates."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(C=2)
    weights = build(cfg, seed)
    weights["head.w"].data = rng.normal(0.0, 0.3, size=weights["head.w"].shape)
    weights["head.b"].data = np.array([0.1])
    for name, t in weights.items():
        if name.endswith(("bias", "_b", ".b", "bq", "bk", "bv", "bo", "b1", "b2")) and np.all(t.data == 0):
            t.data = rng.normal(0.0, 0.02, size=t.shape)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 8, 8, 8)))
    target = rng.uniform(0.0, 1.0, size=(1, 8, 8, 8))
    names = list(weights)
    inputs = [x] + [weights[n] for n in names]

    def f(xx, *_):
        y = forward(xx, weights, cfg)
        d = y - target
        return ad.sqrt(d * d + 1e-2).mean()

    limits = [input_coords] + [param_coords] * len(names)
    return ("spach_model_micro", inputs, f, MODEL_TOL, limits)


def run_suite(seed: int = 0, include_model: bool = True,
              progress: Callable[[SuiteResult], None] | None = None) -> List[SuiteResult]:
    cases = _op_cases(seed) + _block_cases(seed)
    if include_model:
        cases.append(model_case(seed))
    results = []
    for name, inputs, f, tol, max_coords in cases:
        t0 = time.perf_counter()
        rep = grad_check(f, inputs, tol, max_coords=max_coords, seed=seed)
        res = SuiteResult(name, rep, time.perf_counter() - t0)
        results.append(res)
        if progress is not None:
            progress(res)
    return results
