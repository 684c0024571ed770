import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bias_index, mdta_oracle, shifted_region_oracle, window_msa_oracle
from spach.attention import (
    MASK_VALUE,
    MdtaParams,
    WindowAttnParams,
    WindowSpec,
    build_shift_mask,
    cyclic_shift,
    effective_window,
    mdta,
    relative_position_index,
    shifted_window_msa,
    window_msa,
    window_partition,
    window_reverse,
)
from spach.autodiff import Tensor, grad_check
from spach.autodiff import tensor as tensor_mod
from spach.params import ParamInit


def random_window_params(seed, d, heads, M, scale=0.5):
    init = ParamInit(seed)
    p = WindowAttnParams.create(init, "a.", d, heads, M)
    rng = np.random.default_rng(seed + 1000)
    for t in init.weights.values():
        t.data = rng.normal(0.0, scale, size=t.shape)
    return p


def random_mdta_params(seed, channels, heads, scale=0.5):
    init = ParamInit(seed)
    p = MdtaParams.create(init, "m.", channels, heads)
    rng = np.random.default_rng(seed + 2000)
    for name, t in init.weights.items():
        t.data = rng.normal(0.0, scale, size=t.shape)
    p.alpha.data = rng.uniform(0.5, 2.0, size=p.alpha.shape)
    return p


# ---------------------------------------------------------------------------
# partition / shift / mask
# ---------------------------------------------------------------------------

def test_partition_single_window_z_major():
    x = np.arange(8.0).reshape(2, 2, 2, 1)
    w = window_partition(Tensor(x), 2).data
    assert w.shape == (1, 8, 1)
    assert w[0, :, 0].tolist() == list(range(8))


def test_partition_counts():
    assert window_partition(Tensor(np.zeros((4, 4, 4, 3))), 2).shape == (8, 8, 3)


def test_partition_window_contents():
    # window 1 (z-major over window grid) is the block with x offset 2
    x = np.arange(64.0).reshape(4, 4, 4, 1)
    w = window_partition(Tensor(x), 2).data
    assert np.array_equal(w[1, :, 0], x[0:2, 0:2, 2:4, 0].ravel())


def test_partition_rejects_indivisible():
    with pytest.raises(ValueError):
        window_partition(Tensor(np.zeros((3, 4, 4, 1))), 2)
    with pytest.raises(ValueError):
        WindowSpec(2, 0, (3, 4, 4))


@given(st.sampled_from([1, 2, 3]), st.integers(1, 3), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_partition_reverse_roundtrip(M, k, seed):
    grid = (M * k, M * (k % 2 + 1), M)
    x = np.random.default_rng(seed).normal(size=grid + (3,))
    back = window_reverse(window_partition(Tensor(x), M), M, grid).data
    assert np.array_equal(back, x)


def test_cyclic_shift_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1)
    assert cyclic_shift(Tensor(x), (1, 0, 0)).data.ravel().tolist() == [4.0, 1.0, 2.0, 3.0]
    y = np.random.default_rng(0).normal(size=(4, 4, 4, 2))
    assert np.array_equal(cyclic_shift(Tensor(y), 0).data, y)


@given(st.integers(-5, 5), st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_cyclic_shift_roundtrip(a, b, c, seed):
    x = np.random.default_rng(seed).normal(size=(4, 3, 2, 2))
    back = cyclic_shift(cyclic_shift(Tensor(x), (a, b, c)), (-a, -b, -c)).data
    assert np.array_equal(back, x)


def test_mask_zero_without_shift():
    assert not build_shift_mask(WindowSpec(2, 0, (4, 4, 4))).any()


def test_mask_1d_restriction():
    # 4 x 2 x 2 grid, M=2: y and x are split by the shift as well, so compare
    # only tokens that share their y and x position
    spec = WindowSpec(2, 1, (4, 2, 2))
    mask = build_shift_mask(spec)
    # z-pairs inside the last window along z (rolled rows 2, 3) come from regions 1 and 2
    tokens = [(z, 0, 0) for z in range(2)]  # window-local coords along z at y=x=0
    idx = [a * 4 + b * 2 + c for a, b, c in tokens]
    last = mask[-1][np.ix_(idx, idx)]
    assert last[0, 0] == 0 and last[1, 1] == 0
    assert last[0, 1] == MASK_VALUE and last[1, 0] == MASK_VALUE
    # the first z-window (rows 0, 1) is a single region along z
    first = mask[0][np.ix_(idx, idx)]
    assert (first == 0).all()


def _labels_by_enumeration(n, M, s):
    # pre-shift region of every rolled row, written out by hand
    out = []
    for r in range(n):
        if r < n - M:
            out.append(0)
        elif r < n - s:
            out.append(1)
        else:
            out.append(2)
    return out


def test_mask_3d_corner_window():
    spec = WindowSpec(2, 1, (4, 4, 4))
    mask = build_shift_mask(spec)
    lab1 = _labels_by_enumeration(4, 2, 1)
    # last window (z-major) covers rolled rows 2..3 on all axes
    coords = [(2 + a, 2 + b, 2 + c) for a in range(2) for b in range(2) for c in range(2)]
    labels = [(lab1[z], lab1[y], lab1[x]) for z, y, x in coords]
    assert len(set(labels)) == 8
    for i in range(8):
        for j in range(8):
            assert mask[-1, i, j] == (0.0 if labels[i] == labels[j] else MASK_VALUE)
    # interior window (rows 0..1 on every axis) is one region
    assert not mask[0].any()


def test_relative_position_index_formula():
    idx = relative_position_index(2)
    assert idx.shape == (8, 8)
    coords = [(a, b, c) for a in range(2) for b in range(2) for c in range(2)]
    for i, ci in enumerate(coords):
        for j, cj in enumerate(coords):
            assert idx[i, j] == bias_index(ci, cj, 2)
    assert idx.min() == 0 and idx.max() == 3 ** 3 - 1
    assert idx[0, 0] == 13  # zero offset sits in the middle of the table


def test_effective_window_small_grid():
    assert effective_window((2, 2, 2), 2) == (2, 0)
    assert effective_window((1, 1, 1), 2) == (1, 0)
    assert effective_window((4, 4, 4), 2) == (2, 1)


# ---------------------------------------------------------------------------
# window MSA
# ---------------------------------------------------------------------------

def test_window_msa_single_token():
    p = random_window_params(0, 4, 2, 1)
    tok = np.random.default_rng(1).normal(size=(3, 1, 4))
    out = window_msa(Tensor(tok), p).data
    expect = (tok @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    assert np.abs(out - expect).max() < 1e-12


def test_window_msa_uniform_attention():
    p = random_window_params(1, 6, 3, 2)
    for t in (p.wq, p.wk, p.bq, p.bk, p.bias_table):
        t.data = np.zeros_like(t.data)
    tok = np.random.default_rng(2).normal(size=(2, 8, 6))
    out = window_msa(Tensor(tok), p).data
    mean = tok.mean(axis=1, keepdims=True)
    expect = (mean @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    assert np.abs(out - expect).max() < 1e-12


def test_window_msa_head_divisibility():
    with pytest.raises(ValueError):
        WindowAttnParams.create(ParamInit(0), "a.", 6, 4, 2)


@pytest.mark.parametrize("seed", range(20))
def test_window_msa_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    d, heads = (6, 2) if seed % 2 else (8, 4)
    p = random_window_params(seed, d, heads, 2)
    tok = rng.normal(size=(3, 8, d))
    mask = np.where(rng.random((3, 8, 8)) < 0.3, MASK_VALUE, 0.0) if seed % 3 == 0 else None
    assert np.abs(window_msa(Tensor(tok), p, mask).data - window_msa_oracle(tok, p, mask)).max() < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_window_msa_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = random_window_params(seed, 6, 2, 2)
    tok = rng.normal(size=(2, 8, 6))
    mask = np.where(rng.random((2, 8, 8)) < 0.3, MASK_VALUE, 0.0)
    perm = rng.permutation(8)
    rel = relative_position_index(2)
    out = window_msa(Tensor(tok), p, mask, rel).data
    out_p = window_msa(Tensor(tok[:, perm]), p, mask[:, perm][:, :, perm], rel[perm][:, perm]).data
    assert np.abs(out_p - out[:, perm]).max() < 1e-10


def test_shifted_shape_and_zero_shift():
    p = random_window_params(3, 6, 2, 2)
    x = np.random.default_rng(3).normal(size=(4, 4, 4, 6))
    y = shifted_window_msa(Tensor(x), p, WindowSpec(2, 1, (4, 4, 4))).data
    assert y.shape == x.shape
    plain = window_reverse(window_msa(window_partition(Tensor(x), 2), p), 2, (4, 4, 4)).data
    assert np.array_equal(shifted_window_msa(Tensor(x), p, WindowSpec(2, 0, (4, 4, 4))).data, plain)


@pytest.mark.parametrize("seed", range(20))
def test_shifted_matches_region_brute_force(seed):
    rng = np.random.default_rng(seed)
    grid = [(4, 4, 4), (4, 6, 2), (6, 4, 4)][seed % 3]
    p = random_window_params(seed, 6, 2, 2)
    x = rng.normal(size=grid + (6,))
    y = shifted_window_msa(Tensor(x), p, WindowSpec(2, 1, grid)).data
    assert np.abs(y - shifted_region_oracle(x, p, 2, 1)).max() < 1e-6


def test_shift_mask_suppression_bound():
    grid, M, s = (4, 4, 4), 2, 1
    lab = np.zeros(grid, dtype=int)
    for ax in range(3):
        # region of every original position along this axis, via its rolled row
        rows = [(i - s) % grid[ax] for i in range(grid[ax])]
        per = [0 if r < grid[ax] - M else (1 if r < grid[ax] - s else 2) for r in rows]
        shape = [1, 1, 1]
        shape[ax] = grid[ax]
        lab = lab * 3 + np.array(per).reshape(shape)
    d = 27
    x = np.eye(d)[lab]  # one-hot region indicator channels
    p = random_window_params(0, d, 3, M)
    for t in (p.wq, p.wk, p.bq, p.bk, p.bv, p.bo, p.bias_table):
        t.data = np.zeros_like(t.data)
    p.wv.data = np.eye(d)
    p.wo.data = np.eye(d)
    y, attn = shifted_window_msa(Tensor(x), p, WindowSpec(M, s, grid), return_attn=True)
    own = np.take_along_axis(y.data, lab[..., None], axis=-1)[..., 0]
    foreign = y.data.sum(-1) - own
    bound = math.exp(-100) * M ** 3
    assert foreign.max() < bound
    assert np.all(foreign >= 0)
    assert np.abs(own - 1).max() < bound


def test_window_attention_gradients():
    rng = np.random.default_rng(5)
    p = random_window_params(5, 4, 2, 2, scale=0.3)
    x = Tensor(rng.normal(size=(4, 4, 2, 4)))
    w = rng.normal(size=(4, 4, 2, 4))
    spec = WindowSpec(2, 1, (4, 4, 2))
    params = [x, p.wq, p.bq, p.wk, p.wv, p.bv, p.wo, p.bo, p.bias_table]
    rep = grad_check(lambda *_: (shifted_window_msa(x, p, spec) * w).sum(), params, tol=1e-4)
    assert rep.passed, rep


# ---------------------------------------------------------------------------
# MDTA
# ---------------------------------------------------------------------------

def test_mdta_zero_input():
    p = random_mdta_params(0, 4, 2)
    for t in (p.point_qkv_b, p.depth_qkv_b, p.point_out_b, p.ln_bias):
        t.data = np.zeros_like(t.data)
    out = mdta(Tensor(np.zeros((4, 3, 3, 3))), p).data
    assert np.array_equal(out, np.zeros((4, 3, 3, 3)))


def test_mdta_one_channel_per_head():
    p = random_mdta_params(1, 3, 3)
    F = np.random.default_rng(1).normal(size=(3, 2, 3, 4))
    out, attn = mdta(Tensor(F), p, return_attn=True)
    assert attn.shape == (3, 1, 1) and np.array_equal(attn.data, np.ones((3, 1, 1)))
    _, A = mdta_oracle(F, p)
    assert np.array_equal(A, np.ones((3, 1, 1)))


@pytest.mark.parametrize("seed", range(20))
def test_mdta_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    heads = (1, 2, 4, 8)[seed % 4]
    p = random_mdta_params(seed, 8, heads)
    F = rng.normal(size=(8, 4, 4, 4))
    out, attn = mdta(Tensor(F), p, return_attn=True)
    ref, A = mdta_oracle(F, p)
    assert np.abs(out.data - ref).max() < 1e-10
    assert np.abs(attn.data - A).max() < 1e-10


def test_mdta_rows_sum_to_one():
    p = random_mdta_params(3, 8, 2)
    _, attn = mdta(Tensor(np.random.default_rng(3).normal(size=(8, 4, 4, 4))), p, return_attn=True)
    assert attn.shape == (2, 4, 4)
    assert np.abs(attn.data.sum(-1) - 1).max() < 1e-12


def test_mdta_never_allocates_voxel_squared(monkeypatch):
    sizes = []
    orig = tensor_mod.Tensor.__init__

    def spy(self, data, *a, **k):
        orig(self, data, *a, **k)
        sizes.append(self.data.size)

    monkeypatch.setattr(tensor_mod.Tensor, "__init__", spy)
    C, vox = 4, 8 ** 3
    p = random_mdta_params(4, C, 2)
    mdta(Tensor(np.random.default_rng(4).normal(size=(C, 8, 8, 8))), p).sum().backward()
    assert len(sizes) > 20 and max(sizes) < vox * vox // 8
    assert max(sizes) <= 3 * C * vox


def test_mdta_head_divisibility():
    with pytest.raises(ValueError):
        MdtaParams.create(ParamInit(0), "m.", 6, 4)
