import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spach.autodiff import Tensor
from spach.data import Volume
from spach.model import ModelConfig
from spach.train import (
    CSV_HEADER,
    TrainConfig,
    TrainState,
    adamw_step,
    charbonnier,
    cosine_lr,
    crop_cubes,
    format_config,
    load_checkpoint,
    parse_config,
    state_path,
    train,
)

# ---------------------------------------------------------------------------
# Charbonnier
# ---------------------------------------------------------------------------


def test_charbonnier_equal_is_eps():
    assert charbonnier(Tensor(np.array([0.7])), np.array([0.7]), eps=1e-3).item() == 1e-3
    # summing twelve equal values before dividing rounds in the last place
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert abs(charbonnier(Tensor(x), x, eps=1e-3).item() - 1e-3) <= 4 * np.spacing(1e-3)


def test_charbonnier_large_difference():
    x = np.zeros(5)
    assert abs(charbonnier(Tensor(x + 1.0), x, eps=1e-3).item() - 1.0000005) < 1e-12


@pytest.mark.parametrize("d", [-5e-4, -2e-4, 2e-4, 1e-3, 3e-3])
def test_charbonnier_gradient_near_zero(d):
    eps, h = 1e-3, 1e-8
    t = Tensor(np.array([d]), requires_grad=True)
    charbonnier(t, np.zeros(1), eps).backward()

    def f(v):
        return math.sqrt(v * v + eps * eps)

    numeric = (f(d + h) - f(d - h)) / (2 * h)
    assert abs(t.grad[0] - numeric) / abs(numeric) < 1e-8


@given(st.integers(1, 40), st.floats(1e-6, 1.0), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_charbonnier_gradient_bound(n, eps, seed):
    rng = np.random.default_rng(seed)
    t = Tensor(rng.normal(0, 10, size=n), requires_grad=True)
    charbonnier(t, rng.normal(size=n), eps).backward()
    assert np.all(np.abs(t.grad) <= 1.0 / n)


def test_charbonnier_errors():
    with pytest.raises(ValueError, match="shape"):
        charbonnier(Tensor(np.zeros(3)), np.zeros(4))
    with pytest.raises(ValueError):
        charbonnier(Tensor(np.zeros(3)), np.zeros(3), eps=0.0)


# ---------------------------------------------------------------------------
# cosine schedule
# ---------------------------------------------------------------------------

def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 1000, 1e-5, 1e-8) == 1e-5
    assert cosine_lr(1000, 1000, 1e-5, 1e-8) == 1e-8
    assert abs(cosine_lr(500, 1000, 1e-5, 1e-8) - 5.005e-6) < 1e-20


def test_cosine_monotone():
    lrs = [cosine_lr(s, 1000, 1e-5, 1e-8) for s in range(1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_step_range():
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-5, 1e-8)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    w = {"a": Tensor(np.array([1.0, -2.0]))}
    w["a"].grad = np.zeros(2)
    adamw_step(w, TrainState(), 1e-2, weight_decay=0.0)
    assert np.array_equal(w["a"].data, [1.0, -2.0])


def test_adamw_unit_step():
    w = {"a": Tensor(np.array([3.0]))}
    st_ = TrainState()
    for i in range(5):
        w["a"].grad = np.ones(1)
        adamw_step(w, st_, 0.25, beta1=0.0, beta2=0.0, eps=0.0, weight_decay=0.0)
        assert w["a"].data[0] == 3.0 - 0.25 * (i + 1)


def _reference_adamw(w0, grads_fn, lr, b1, b2, eps, wd, steps):
    # plain Python floats, element by element
    w = list(w0)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t in range(1, steps + 1):
        g = grads_fn(w)
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            w[i] = w[i] - lr * (mh / (math.sqrt(vh) + eps) + wd * w[i])
    return w


def test_adamw_matches_reference_loop():
    a = [1.0, 3.0, 0.5]
    c = [0.2, -1.0, 2.0]

    def grads(w):
        return [a[i] * (w[i] - c[i]) for i in range(3)]

    w0 = [1.5, 0.7, -0.4]
    expect = _reference_adamw(w0, grads, 0.05, 0.9, 0.999, 1e-8, 0.01, 10)
    w = {"p": Tensor(np.array(w0))}
    st_ = TrainState()
    for _ in range(10):
        w["p"].grad = np.array(grads(list(w["p"].data)))
        adamw_step(w, st_, 0.05, 0.9, 0.999, 1e-8, 0.01)
    assert np.abs(w["p"].data - expect).max() < 1e-12


def test_adamw_descends_quadratic():
    rng = np.random.default_rng(0)
    a, c = rng.uniform(0.5, 2.0, size=6), rng.normal(size=6)
    w = {"p": Tensor(c + 1.0 + rng.uniform(size=6), requires_grad=True)}
    st_ = TrainState()
    losses = []
    for _ in range(100):
        w["p"].grad = None
        d = w["p"] - Tensor(c)
        loss = (Tensor(a) * d * d).sum() * 0.5
        loss.backward()
        losses.append(loss.item())
        adamw_step(w, st_, 1e-3, weight_decay=0.0)
    assert all(x > y for x, y in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def _pair():
    rng = np.random.default_rng(0)
    a = Volume(rng.normal(size=(10, 12, 9)))
    return a, Volume(a.data * 2.0)


def test_crop_cubes():
    a, b = _pair()
    assert crop_cubes(a, b, 4, 0, seed=0) == []
    crops = crop_cubes(a, b, 4, 6, seed=1)
    assert len(crops) == 6
    for x, y in crops:
        assert x.dims == (4, 4, 4) and np.array_equal(y.data, 2.0 * x.data)
    again = crop_cubes(a, b, 4, 6, seed=1)
    assert all(np.array_equal(p[0].data, q[0].data) for p, q in zip(crops, again))


def test_crop_cubes_errors():
    a, b = _pair()
    with pytest.raises(ValueError):
        crop_cubes(a, b, 10, 1, seed=0)
    with pytest.raises(ValueError):
        crop_cubes(a, Volume(np.zeros((4, 4, 4))), 2, 1, seed=0)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_parse_config():
    cfg, mcfg = parse_config("# comment\nepochs = 3\nlr_init=2e-3  # inline\nC = 4\nuse_gcfn = false\n"
                             "enc_blocks = 1,1,1,1\n")
    assert cfg.epochs == 3 and cfg.lr_init == 2e-3 and cfg.lr_final == 1e-8
    assert mcfg.C == 4 and mcfg.use_gcfn is False and mcfg.enc_blocks == (1, 1, 1, 1)


def test_parse_config_errors():
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config("epoch = 3\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_config("epochs 3\n")
    with pytest.raises(ValueError):
        parse_config("use_gcfn = maybe\n")


def test_config_format_roundtrip():
    cfg, mcfg = TrainConfig(epochs=7, seed=3), ModelConfig(C=4, M=3, use_gcfn=False)
    assert parse_config(format_config(cfg, mcfg)) == (cfg, mcfg)


def test_config_validation():
    with pytest.raises(ValueError, match="lr_final"):
        TrainConfig(lr_init=1e-8, lr_final=1e-5).validate()
    with pytest.raises(ValueError, match="divisor"):
        TrainConfig(crop=12).validate(ModelConfig())
    with pytest.raises(ValueError):
        TrainConfig(crop=64).validate()
    with pytest.raises(ValueError):
        TrainConfig(dose_fraction=0.0).validate()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def tiny(out_dir, **kw):
    base = dict(epochs=2, steps_per_epoch=2, n_train=2, n_val=1, phantom_dim=24, crop=16,
                lr_init=1e-3, lr_final=1e-5, out_dir=str(out_dir))
    base.update(kw)
    return TrainConfig(**base)


def test_train_outputs(tmp_path):
    res = train(tiny(tmp_path), ModelConfig(C=2))
    assert len(res.step_losses) == 4 and res.state.step == 4
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_HEADER == ["step", "epoch", "lr", "train_loss", "val_psnr", "val_ssim"]
    assert [r[:2] for r in rows[1:]] == [["2", "1"], ["4", "2"]]
    assert [p.name for p in res.checkpoints] == ["ckpt_000002.spw", "ckpt_000004.spw"]
    assert state_path(res.checkpoints[-1]).exists()
    w, st_ = load_checkpoint(res.checkpoints[-1], ModelConfig(C=2))
    assert st_.step == 4
    assert all(np.array_equal(w[k].data, res.weights[k].data) for k in w)
    assert all(st_.m[k].shape == w[k].shape for k in st_.m)


def test_train_is_reproducible(tmp_path):
    a = train(tiny(tmp_path / "a"), ModelConfig(C=2), write_files=False)
    b = train(tiny(tmp_path / "b"), ModelConfig(C=2), write_files=False)
    assert a.step_losses == b.step_losses
    assert all(np.array_equal(a.weights[k].data, b.weights[k].data) for k in a.weights)


def test_resume_is_bit_exact(tmp_path):
    mcfg = ModelConfig(C=2)
    full = train(tiny(tmp_path / "full"), mcfg)
    part = train(tiny(tmp_path / "part"), mcfg, stop_after_epochs=1)
    rest = train(tiny(tmp_path / "part"), mcfg, resume=str(part.checkpoints[-1]))
    assert part.step_losses + rest.step_losses == full.step_losses
    assert all(np.array_equal(full.weights[k].data, rest.weights[k].data) for k in full.weights)
    assert (tmp_path / "full" / "ckpt_000004.spw").read_bytes() == (tmp_path / "part" / "ckpt_000004.spw").read_bytes()
