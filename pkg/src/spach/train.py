"""Charbonnier/AdamW/cosine training on synthetic low-dose/normal-dose pairs."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import PhantomSpec, Volume, dose_reduce, generate_phantom
from .metrics import psnr, ssim
from .model import ModelConfig, build, forward, load_weights, save_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation and data settings.

    Defaults for the schedule and epochs are the published ones (1e-5 -> 1e-8,
    300 epochs); desk-scale runs override them from a config file.
    """

    epochs: int = 300
    steps_per_epoch: int = 20
    lr_init: float = 1e-5
    lr_final: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    charbonnier_eps: float = 1e-3
    crop: int = 16
    batch_size: int = 1
    seed: int = 0
    dose_fraction: float = 0.25
    # 0 means the noise-free phantom is the label; otherwise the label's dose fraction
    label_fraction: float = 0.0
    count_scale: float = 100.0
    n_train: int = 16
    n_val: int = 10
    phantom_dim: int = 32
    checkpoint_every: int = 1
    out_dir: str = "runs/default"

    def validate(self, model: Optional[ModelConfig] = None) -> None:
        if self.lr_final > self.lr_init:
            raise ValueError(f"lr_final {self.lr_final} exceeds lr_init {self.lr_init}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be positive")
        if self.crop > self.phantom_dim:
            raise ValueError(f"crop {self.crop} larger than phantom dim {self.phantom_dim}")
        if model is not None and self.crop % model.divisor:
            raise ValueError(f"crop {self.crop} not a multiple of the model divisor {model.divisor}")
        if not 0 < self.dose_fraction <= 1:
            raise ValueError(f"dose_fraction must be in (0, 1], got {self.dose_fraction}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 0.0
    best_val_psnr: float = -math.inf


# ---------------------------------------------------------------------------
# loss / schedule / optimiser
# ---------------------------------------------------------------------------

def charbonnier(pred: Tensor, target, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2))."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"charbonnier shape mismatch: {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise ValueError("charbonnier eps must be positive")
    diff = pred - target
    return ad.sqrt(diff * diff + eps * eps).mean()


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(weights: Dict[str, Tensor], state: TrainState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place; params without grad are skipped."""
    state.step += 1
    state.lr = lr
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in weights.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)).astype(p.dtype)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def crop_cubes(inp: Volume, label: Volume, size: int, count: int, seed) -> List[Tuple[Volume, Volume]]:
    """``count`` aligned random cubes; identical corners for input and label."""
    if inp.dims != label.dims:
        raise ValueError(f"input dims {inp.dims} != label dims {label.dims}")
    if any(size > n for n in inp.dims):
        raise ValueError(f"crop size {size} exceeds volume dims {inp.dims}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        corner = [int(rng.integers(0, n - size + 1)) for n in inp.dims]
        out.append((inp.crop(corner, (size,) * 3), label.crop(corner, (size,) * 3)))
    return out


def center_crop(v: Volume, size: int) -> Volume:
    corner = [(n - size) // 2 for n in v.dims]
    return v.crop(corner, (size,) * 3)


def make_pairs(cfg: TrainConfig, split: int, n: int) -> List[Tuple[Volume, Volume]]:
    """Low-dose input / label pairs for split 0 (train) or 1 (held out)."""
    pairs = []
    for i in range(n):
        spec = PhantomSpec(seed=_seed(cfg.seed, split, i), dims=(cfg.phantom_dim,) * 3)
        clean = generate_phantom(spec).volume
        low = dose_reduce(clean, cfg.dose_fraction, cfg.count_scale, _seed(cfg.seed, split, i, 1))
        if cfg.label_fraction > 0:
            label = dose_reduce(clean, cfg.label_fraction, cfg.count_scale, _seed(cfg.seed, split, i, 2))
        else:
            label = clean
        pairs.append((low, label))
    return pairs


def _as_input(v: Volume, dtype) -> Tensor:
    return Tensor(v.data.astype(dtype)[None])


def denoise(v: Volume, weights, config: ModelConfig) -> Volume:
    dtype = next(iter(weights.values())).dtype
    with no_grad():
        out = forward(_as_input(v, dtype), weights, config)
    return Volume(out.data[0], v.voxel_size)


def evaluate(weights, config: ModelConfig, pairs, crop: int) -> dict:
    """Mean PSNR/SSIM of denoised and noisy centre crops against their labels."""
    rows = []
    for low, label in pairs:
        x, y = center_crop(low, crop), center_crop(label, crop)
        d = denoise(x, weights, config)
        rows.append((psnr(d, y), ssim(d, y), psnr(x, y), ssim(x, y)))
    a = np.asarray(rows)
    return {"psnr": float(a[:, 0].mean()), "ssim": float(a[:, 1].mean()),
            "noisy_psnr": float(a[:, 2].mean()), "noisy_ssim": float(a[:, 3].mean())}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, weights, state: TrainState) -> None:
    path = Path(path)
    save_weights(weights, path)
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    entries["__step__"] = np.array([state.step], dtype=np.float32)
    entries["__best_val_psnr__"] = np.array([state.best_val_psnr], dtype=np.float32)
    for name in weights:
        if name in state.m:
            entries[f"{name}.m"] = state.m[name]
            entries[f"{name}.v"] = state.v[name]
    save_weights({k: Tensor(v) for k, v in entries.items()}, state_path(path))


def state_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".state" + path.suffix)


def load_checkpoint(path, config: ModelConfig):
    weights = load_weights(path, config)
    raw = load_weights(state_path(path))
    st = TrainState(step=int(raw.pop("__step__").data[0]),
                    best_val_psnr=float(raw.pop("__best_val_psnr__").data[0]))
    for key, t in raw.items():
        name, kind = key.rsplit(".", 1)
        getattr(st, kind)[name] = np.array(t.data, dtype=np.float32)
    return weights, st


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: dict
    state: TrainState
    step_losses: List[float]
    probe_initial: float
    probe_final: float
    history: List[dict]
    checkpoints: List[Path]


CSV_HEADER = ["step", "epoch", "lr", "train_loss", "val_psnr", "val_ssim"]


def _probe_loss(weights, config, probes, eps) -> float:
    dtype = next(iter(weights.values())).dtype
    with no_grad():
        vals = [charbonnier(forward(_as_input(x, dtype), weights, config), _as_input(y, dtype), eps).item()
                for x, y in probes]
    return float(np.mean(vals))


def train(cfg: TrainConfig, model_cfg: ModelConfig, resume: Optional[str] = None,
          stop_after_epochs: Optional[int] = None, write_files: bool = True) -> TrainResult:
    """Train from scratch (or resume) in fp32; deterministic given ``cfg.seed``.

    The crops of step ``t`` are drawn from a generator seeded by (seed, t), so
    resuming needs only the weights, moments and step counter.
    """
    cfg.validate(model_cfg)
    out_dir = Path(cfg.out_dir)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_pairs = make_pairs(cfg, 0, cfg.n_train)
    val_pairs = make_pairs(cfg, 1, cfg.n_val)
    probes = [crop_cubes(lo, la, cfg.crop, 1, _seed(cfg.seed, 3, i))[0] for i, (lo, la) in enumerate(train_pairs[:4])]

    if resume:
        weights, state = load_checkpoint(resume, model_cfg)
    else:
        weights = build(model_cfg, seed=cfg.seed, dtype=np.float32)
        state = TrainState()
    probe_initial = _probe_loss(weights, model_cfg, probes, cfg.charbonnier_eps)

    csv_path = out_dir / "metrics.csv"
    if write_files and not (resume and csv_path.exists()):
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_HEADER)

    total = cfg.total_steps
    step_losses, history, ckpts = [], [], []
    first_epoch = state.step // cfg.steps_per_epoch
    last_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, first_epoch + stop_after_epochs)
    for epoch in range(first_epoch, last_epoch):
        epoch_losses = []
        for _ in range(cfg.steps_per_epoch):
            t = state.step
            rng = np.random.default_rng(_seed(cfg.seed, 2, t))
            for p in weights.values():
                p.grad = None
            batch_loss = 0.0
            for _b in range(cfg.batch_size):
                low, label = train_pairs[int(rng.integers(len(train_pairs)))]
                (x, y), = crop_cubes(low, label, cfg.crop, 1, rng)
                pred = forward(_as_input(x, np.float32), weights, model_cfg)
                loss = charbonnier(pred, _as_input(y, np.float32), cfg.charbonnier_eps) * (1.0 / cfg.batch_size)
                if not np.isfinite(loss.data).all():
                    raise FloatingPointError(f"non-finite loss at step {t}")
                loss.backward()
                batch_loss += loss.item()
            adamw_step(weights, state, cosine_lr(t, total, cfg.lr_init, cfg.lr_final),
                       cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            step_losses.append(batch_loss)
            epoch_losses.append(batch_loss)

        for p in weights.values():
            p.grad = None
        val = evaluate(weights, model_cfg, val_pairs, cfg.crop) if val_pairs else {"psnr": float("nan"), "ssim": float("nan")}
        row = {"step": state.step, "epoch": epoch + 1, "lr": state.lr, "train_loss": float(np.mean(epoch_losses)),
               "val_psnr": val["psnr"], "val_ssim": val["ssim"]}
        history.append(row)
        log.info("epoch %d step %d loss %.5f val_psnr %.3f", epoch + 1, state.step, row["train_loss"], row["val_psnr"])
        if val["psnr"] > state.best_val_psnr:
            state.best_val_psnr = float(np.float32(val["psnr"]))
        if write_files:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in CSV_HEADER])
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                ck = out_dir / f"ckpt_{state.step:06d}.spw"
                save_checkpoint(ck, weights, state)
                ckpts.append(ck)

    probe_final = _probe_loss(weights, model_cfg, probes, cfg.charbonnier_eps)
    return TrainResult(weights, state, step_losses, probe_initial, probe_final, history, ckpts)


# ---------------------------------------------------------------------------
# plain-text config
# ---------------------------------------------------------------------------

def _coerce(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        return tuple(int(s) for s in value.split(","))
    return type(default)(value.strip())


def parse_config(text: str) -> Tuple[TrainConfig, ModelConfig]:
    """``key = value`` lines, ``#`` comments; model keys share the namespace."""
    tfields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    mfields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    tdef, mdef = TrainConfig(), ModelConfig()
    tkw, mkw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in tfields:
            tkw[key] = _coerce(value, getattr(tdef, key))
        elif key in mfields:
            mkw[key] = _coerce(value, getattr(mdef, key))
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    return TrainConfig(**tkw), ModelConfig(**mkw)


def load_config(path) -> Tuple[TrainConfig, ModelConfig]:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    lines = []
    for obj in (cfg, model_cfg):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
