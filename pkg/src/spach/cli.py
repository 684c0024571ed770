"""Command-line entry point: train, denoise, eval, gradcheck, params, make-phantom."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path


from .data import PhantomSpec, VolumeFileError, dose_reduce, generate_phantom, load_rois, read_volume, \
    save_rois, write_volume
from .metrics import cnr, psnr, ssim
from .model import ModelConfig, WeightFileError, check_weights, load_weights, param_count
from .train import denoise, load_config, train

DEFAULT_SWEEP = (6, 12, 24, 36, 48)
REFERENCE_LABEL = "reference"


def infer_config(weights) -> ModelConfig:
    """Recover the architecture from parameter names and shapes.

    Settings that no stored weight depends on (heads of an empty level, say)
    fall back to their defaults.
    """
    default = ModelConfig()

    def count(prefix):
        idx = {k[len(prefix):].split(".", 1)[0] for k in weights if k.startswith(prefix)}
        return len(idx)

    def first(names, fallback):
        for n in names:
            if n in weights:
                return weights[n].shape
        return fallback

    try:
        C = weights["stem.w"].shape[0]
        E = weights["embed.E"].shape
        P = round(E[0] ** (1 / 3))
        tables = [first([f"sp{i}.0.attn_w.bias_table"], None) for i in (1, 2)]
        known = [t for t in tables if t is not None]
        M = (round(known[0][1] ** (1 / 3)) + 1) // 2 if known else default.M
        heads_spatial = tuple(t[0] if t is not None else h for t, h in zip(tables, default.heads_spatial))
        heads_channel = tuple(first([f"{part}{lvl}.0.mdta.alpha" for part in ("enc", "dec")],
                                    (default.heads_channel[lvl - 1],))[0] for lvl in range(1, 5))
        ffn_names = [k for k in weights if k.endswith(("gdfn.point_in_a_w", "gcfn.point_in_a_w"))]
        if ffn_names:
            # hidden width over the block's own width
            w = weights[ffn_names[0]].shape
            expansion = w[0] / w[1]
        else:
            expansion = default.expansion
        mlp = first(["sp1.0.mlp_w.w1", "sp2.0.mlp_w.w1"], None)
        mlp_ratio = mlp[1] // mlp[0] if mlp is not None else default.mlp_ratio
        cfg = ModelConfig(
            C=C, P=P, M=M,
            heads_channel=heads_channel,
            heads_spatial=heads_spatial,
            enc_blocks=tuple(count(f"enc{lvl}.") for lvl in range(1, 5)),
            dec_blocks=tuple(count(f"dec{lvl}.") for lvl in range(1, 5)),
            refine_blocks=count("refine."),
            spatial_blocks=(count("sp1."), count("sp2.")),
            expansion=expansion,
            mlp_ratio=mlp_ratio,
            use_gcfn=any(".gcfn." in k for k in weights),
        )
    except KeyError as e:
        raise ValueError(f"cannot infer model config from weights: missing {e}") from None
    check_weights(weights, cfg)
    return cfg


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, model_cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    res = train(cfg, model_cfg, resume=args.resume, stop_after_epochs=args.epochs)
    last = res.history[-1] if res.history else {}
    print(f"steps={res.state.step} probe_loss {res.probe_initial:.6f} -> {res.probe_final:.6f}")
    if last:
        print(f"val_psnr={last['val_psnr']:.3f} val_ssim={last['val_ssim']:.4f}")
    if res.checkpoints:
        print(f"checkpoint {res.checkpoints[-1]}")
    return 0


def cmd_denoise(args) -> int:
    weights = load_weights(args.weights)
    if args.config:
        _, model_cfg = load_config(args.config)
        check_weights(weights, model_cfg)
    else:
        model_cfg = infer_config(weights)
    vol = read_volume(args.inp)
    write_volume(denoise(vol, weights, model_cfg), args.out)
    return 0


def cmd_eval(args) -> int:
    pred, ref = read_volume(args.pred), read_volume(args.ref)
    print(f"{'metric':<24}{'value':>12}")
    print(f"{'PSNR (dB)':<24}{_fmt(psnr(pred, ref)):>12}")
    print(f"{'SSIM':<24}{ssim(pred, ref):>12.6f}")
    if args.rois:
        rois = load_rois(args.rois)
        refs = [r for r in rois if r.label == REFERENCE_LABEL]
        if len(refs) != 1:
            raise ValueError(f"ROI file needs exactly one ROI labelled {REFERENCE_LABEL!r}, found {len(refs)}")
        for roi in rois:
            if roi is not refs[0]:
                name = f"CNR {roi.label or 'tumor'}"
                print(f"{name:<24}{cnr(pred, roi, refs[0]):>12.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<26} rel_err={r.report.max_rel_error:.3e} "
              f"tol={r.report.tol:.0e} ({r.seconds:.1f}s)", flush=True)

    results = run_suite(seed=args.seed, include_model=not args.no_model, progress=show)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_params(args) -> int:
    base = load_config(args.config)[1] if args.config else ModelConfig()
    for c in args.C or DEFAULT_SWEEP:
        cfg = ModelConfig(**{**base.to_dict(), "C": c})
        print(f"C={c:<4d} params={param_count(cfg)}")
    return 0


def cmd_make_phantom(args) -> int:
    spec = PhantomSpec(seed=args.seed, dims=(args.dim,) * 3)
    ph = generate_phantom(spec)
    write_volume(ph.volume, args.clean)
    if args.low:
        write_volume(dose_reduce(ph.volume, args.fraction, args.count_scale, args.seed + 1), args.low)
    if args.rois:
        save_rois(ph.rois, args.rois)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spach", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic phantoms")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.add_argument("--resume", help="checkpoint (.spw) to resume from")
    p.add_argument("--epochs", type=int, help="stop after this many more epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise an SPV volume")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="config file; inferred from the weights when omitted")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM/CNR of a prediction against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--rois", help=f"ROI JSON; one ROI labelled {REFERENCE_LABEL!r}, the rest are tumours")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="fp64 finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-model", action="store_true", help="skip the full-model case")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts over base widths C")
    p.add_argument("--C", type=int, nargs="+", help=f"base widths (default {' '.join(map(str, DEFAULT_SWEEP))})")
    p.add_argument("--config", help="config file supplying the other architecture settings")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("make-phantom", help="write a synthetic phantom, its low-dose copy and ROIs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--clean", required=True)
    p.add_argument("--low")
    p.add_argument("--rois")
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--count-scale", type=float, default=100.0)
    p.set_defaults(func=cmd_make_phantom)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, VolumeFileError, WeightFileError, OSError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
