import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spach import autodiff as ad
from spach.autodiff import Tensor
from spach.model import (
    ModelConfig,
    WeightFileError,
    build,
    count_elements,
    expected_shapes,
    forward,
    load_weights,
    param_count,
    save_weights,
)

MICRO = ModelConfig(C=2)
SWEEP = (6, 12, 24, 36, 48)


def with_random_head(weights, seed=0):
    rng = np.random.default_rng(seed)
    weights["head.w"].data = rng.normal(0.0, 0.3, size=weights["head.w"].shape).astype(weights["head.w"].dtype)
    return weights


def test_build_deterministic():
    a, b = build(MICRO, seed=3), build(MICRO, seed=3)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = build(MICRO, seed=4)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_build_initialisation_rules():
    w = build(MICRO, seed=0)
    assert not w["head.w"].data.any() and not w["head.b"].data.any()
    assert np.all(w["enc1.0.mdta.alpha"].data == 1.0)
    assert np.all(w["enc1.0.mdta.ln_scale"].data == 1.0)
    big = build(ModelConfig(C=6), seed=0)["enc4.0.gcfn.inner_a_w"].data
    assert abs(big.std() - 0.02) < 1e-3 and abs(big.mean()) < 1e-3


@given(st.sampled_from([8, 16]), st.sampled_from([8, 16]), st.sampled_from([8, 24]), st.integers(0, 50))
@settings(max_examples=6, deadline=None)
def test_identity_at_init(d, h, w, seed):
    weights = build(MICRO, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 5, size=(1, d, h, w))
    assert np.array_equal(forward(Tensor(x), weights, MICRO).data, x)


def test_identity_at_init_fp32():
    weights = build(ModelConfig(C=4), seed=1, dtype=np.float32)
    x = np.random.default_rng(1).uniform(0, 5, size=(1, 16, 16, 16)).astype(np.float32)
    y = forward(Tensor(x), weights, ModelConfig(C=4)).data
    assert y.dtype == np.float32 and np.array_equal(y, x)


@pytest.mark.parametrize("n", [16, 24])
def test_forward_shape(n):
    weights = with_random_head(build(MICRO, seed=0))
    x = np.random.default_rng(0).normal(size=(1, n, n, n))
    y = forward(Tensor(x), weights, MICRO).data
    assert y.shape == x.shape and np.all(np.isfinite(y)) and not np.array_equal(y, x)


def test_forward_deterministic():
    weights = with_random_head(build(MICRO, seed=2))
    x = Tensor(np.random.default_rng(2).normal(size=(1, 8, 8, 16)))
    assert np.array_equal(forward(x, weights, MICRO).data, forward(x, weights, MICRO).data)


def test_forward_divisibility_error_names_axis():
    with pytest.raises(ValueError, match="H=12"):
        forward(Tensor(np.zeros((1, 8, 12, 8))), build(MICRO), MICRO)


def test_latent_scales_align():
    shapes = expected_shapes(ModelConfig(C=6))
    # spatial path lands on 2 * d_spatial = 8C channels, the channel path's deepest width
    assert shapes["merge.W"] == (8 * 24, 2 * 24)
    assert shapes["fuse.w"] == (48, 48 + 48, 1, 1, 1)
    with pytest.raises(ValueError):
        ModelConfig(P=2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(C=6, heads_channel=(4, 2, 4, 8))
    with pytest.raises(ValueError):
        ModelConfig(enc_blocks=(1, 1, 1))


# ---------------------------------------------------------------------------
# parameter inventory
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("cfg", [
    ModelConfig(C=2),
    ModelConfig(C=6),
    ModelConfig(C=4, use_gcfn=False),
    ModelConfig(C=4, enc_blocks=(2, 1, 0, 1), dec_blocks=(0, 1, 2, 1), refine_blocks=2, spatial_blocks=(2, 0)),
    ModelConfig(C=4, M=3, expansion=2.5, mlp_ratio=2, heads_spatial=(4, 8), heads_channel=(2, 2, 4, 4)),
])
def test_param_count_matches_build(cfg):
    assert param_count(cfg) == count_elements(build(cfg, seed=0))


def test_param_count_matches_inventory_large():
    for c in SWEEP:
        cfg = ModelConfig(C=c)
        assert param_count(cfg) == sum(int(np.prod(s)) for s in expected_shapes(cfg).values())


def test_param_count_ordering_and_growth():
    counts = {c: param_count(ModelConfig(C=c)) for c in SWEEP}
    values = [counts[c] for c in SWEEP]
    assert all(a < b for a, b in zip(values, values[1:]))
    for c in (6, 12, 24):
        assert 2 < counts[2 * c] / counts[c] < 4


def test_gcfn_adds_parameters():
    assert param_count(ModelConfig(C=6)) > param_count(ModelConfig(C=6, use_gcfn=False))


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def test_weights_roundtrip(tmp_path):
    w = build(ModelConfig(C=2), seed=5, dtype=np.float32)
    save_weights(w, tmp_path / "w.spw")
    back = load_weights(tmp_path / "w.spw", ModelConfig(C=2))
    assert list(back) == list(w)
    assert all(np.array_equal(back[k].data, w[k].data) and back[k].data.dtype == np.float32 for k in w)
    save_weights(back, tmp_path / "w2.spw")
    assert (tmp_path / "w.spw").read_bytes() == (tmp_path / "w2.spw").read_bytes()


def test_weights_layout(tmp_path):
    w = {"ab": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)), "c": Tensor(np.ones(1, dtype=np.float32))}
    save_weights(w, tmp_path / "w.spw")
    raw = (tmp_path / "w.spw").read_bytes()
    expect = (b"SPW1" + struct.pack("<II", 1, 2)
              + struct.pack("<H", 2) + b"ab" + struct.pack("<B2I", 2, 2, 3) + np.arange(6, dtype="<f4").tobytes()
              + struct.pack("<H", 1) + b"c" + struct.pack("<BI", 1, 1) + np.ones(1, dtype="<f4").tobytes())
    assert raw == expect


def test_weights_corruption(tmp_path):
    w = build(ModelConfig(C=2), seed=0, dtype=np.float32)
    p = tmp_path / "w.spw"
    save_weights(w, p)
    raw = p.read_bytes()
    cases = {
        "magic": b"XPW1" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 9) + raw[8:],
        "truncated": raw[:-3],
        "trailing": raw + b"\0",
    }
    for what, data in cases.items():
        p.write_bytes(data)
        with pytest.raises(WeightFileError):
            load_weights(p)


def test_weights_duplicate_name(tmp_path):
    one = {"x": Tensor(np.ones(2, dtype=np.float32))}
    save_weights(one, tmp_path / "a.spw")
    raw = (tmp_path / "a.spw").read_bytes()
    entry = raw[12:]
    (tmp_path / "b.spw").write_bytes(b"SPW1" + struct.pack("<II", 1, 2) + entry + entry)
    with pytest.raises(WeightFileError, match="duplicate"):
        load_weights(tmp_path / "b.spw")


def test_weights_cross_config_rejected(tmp_path):
    save_weights(build(ModelConfig(C=2), dtype=np.float32), tmp_path / "w.spw")
    with pytest.raises(ValueError, match="shape mismatch"):
        load_weights(tmp_path / "w.spw", ModelConfig(C=4))
    with pytest.raises(ValueError, match="missing"):
        load_weights(tmp_path / "w.spw", ModelConfig(C=2, refine_blocks=2))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_no_dead_parameters():
    # 16^3 so the deepest spatial grid holds a real 2^3 window (at 8^3 it is a
    # single token, whose q/k/bias gradients are zero by construction)
    rng = np.random.default_rng(0)
    weights = build(MICRO, seed=0)
    for name, t in weights.items():
        base = 1.0 if name.endswith(("alpha", "ln_scale", ".scale")) else 0.0
        t.data = base + rng.normal(0.0, 0.05, size=t.shape)
    x = Tensor(rng.uniform(0, 1, size=(1, 16, 16, 16)))
    target = rng.uniform(0, 1, size=(1, 16, 16, 16))
    d = forward(x, weights, MICRO) - target
    ad.sqrt(d * d + 1e-2).mean().backward()
    scale = max(np.abs(t.grad).max() for t in weights.values())
    for name, t in weights.items():
        g = np.abs(t.grad).max()
        if name.endswith(".bk"):
            # a key bias shifts every logit of a query row equally; softmax cancels it
            # and only rounding (~1e-25 of the largest gradient here) is left
            assert g < 1e-20 * scale, name
        else:
            assert g > 1e-18 * scale, f"{name} receives no gradient"


def test_micro_model_finite_differences():
    from spach.autodiff import grad_check
    from spach.gradsuite import MODEL_TOL, model_case

    name, inputs, f, tol, limits = model_case(seed=1, input_coords=16, param_coords=1)
    assert tol == MODEL_TOL == 1e-3
    rep = grad_check(f, inputs, tol, max_coords=limits, seed=1)
    assert rep.passed, rep
