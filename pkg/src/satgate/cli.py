"""Command-line front end: reproducible data generation, training, and analysis.

Exit codes: 0 on success, 1 on usage errors (bad flags/values), 2 on
runtime failures. Every command is deterministic given its flags; all file
outputs (tensor files, checkpoints, CSVs, PGMs) are byte-identical across
repeated runs with the same flags.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .gate import GateVariant
from .networks import build_model, count_params, reference_spec, FAMILIES
from .training import TrainConfig, evaluate, make_optimizer, train
from .metrics import binarize, export_gray_image, sparsity_report
from .ops import sigmoid
from .tensor import no_grad
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    load_tensor,
    save_checkpoint,
    save_dataset,
)
from .gradcheck import CHECK_NAMES, run_checks

VARIANTS = ("org", "st", "at", "sat")


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="satgate",
                     description="Gated-skip-connection segmentation networks: "
                                 "data, training, and analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{gen-data,train,eval,params,"
                                        "sparsity,attention,gradcheck}")

    p = sub.add_parser("gen-data", help="write a synthetic image/mask dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rank", type=int, choices=(2, 3), default=2)
    p.add_argument("--extent", type=int, default=32,
                   help="spatial extent per axis (default 32)")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.3,
                   help="additive Gaussian noise sigma")
    p.add_argument("--contrast", type=float, default=1.0,
                   help="foreground minus background mean")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    p.add_argument("--arch", required=True, choices=FAMILIES)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--loss", choices=("dice", "bce"), default="dice")
    p.add_argument("--opt", choices=("adadelta", "sgd"), default="adadelta")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", required=True, help="history CSV path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="per-sample metrics CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("params", help="parameter counts for the reference models")
    p.add_argument("--arch", required=True, choices=FAMILIES)
    p.add_argument("--variant", choices=VARIANTS, default="sat")
    p.add_argument("--compare", action="store_true",
                   help="tabulate all four variants and the savings")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("sparsity", help="channels-off report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_sparsity)

    p = sub.add_parser("attention",
                       help="export gate maps and predictions for one input")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="image tensor file")
    p.add_argument("--out", required=True, help="output directory for PGM files")
    p.set_defaults(func=_cmd_attention)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", choices=CHECK_NAMES, default=None,
                   help="run a single check instead of the full suite")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure, not a usage error
        print(f"satgate: error: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(spatial_rank=args.rank, extent=args.extent,
                         n_samples=args.samples, noise_sigma=args.noise,
                         contrast=args.contrast, seed=args.seed)
    samples = generate_synthetic(spec)
    save_dataset(samples, args.out, spec)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _split(samples):
    """Deterministic 80/20 train/validation split (in file order)."""
    n_val = max(1, len(samples) // 5)
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split train/validation")
    return samples[:-n_val], samples[-n_val:]


def _cmd_train(args) -> int:
    samples = load_dataset(args.data)
    train_set, val_set = _split(samples)
    variant = GateVariant.parse(args.variant)
    spec = reference_spec(args.arch, variant,
                          spatial_rank=samples[0].image.ndim - 1)
    model = build_model(spec, args.seed)
    cfg = TrainConfig(optimizer=args.opt, loss=args.loss, epochs=args.epochs,
                      batch_size=args.batch, seed=args.seed)
    optimizer = make_optimizer(cfg, model.parameters())
    rng = np.random.default_rng(cfg.seed)
    history = train(model, train_set, val_set, cfg, optimizer=optimizer,
                    rng=rng, log=lambda msg: print(msg))
    save_checkpoint(args.out, model, optimizer=optimizer, rng=rng,
                    next_epoch=args.epochs)
    history.to_csv(args.history)
    last = history.rows[-1]
    print(f"final: val_dice {last['val_dice']:.4f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    per_sample, means = evaluate(bundle.model, samples)
    lines = ["sample,dice,fpr,fnr"]
    for i, row in enumerate(per_sample):
        lines.append(f"{i},{row['dice']!r},{row['fpr']!r},{row['fnr']!r}")
    stds = {k: float(np.std([r[k] for r in per_sample]))
            for k in ("dice", "fpr", "fnr")}
    lines.append(f"mean,{means['dice']!r},{means['fpr']!r},{means['fnr']!r}")
    lines.append(f"std,{stds['dice']!r},{stds['fpr']!r},{stds['fnr']!r}")
    _write_text(args.report, "\n".join(lines) + "\n")
    for key in ("dice", "fpr", "fnr"):
        print(f"{key} {means[key]:.3f}±{stds[key]:.3f}")
    return 0


def _cmd_params(args) -> int:
    if args.compare:
        totals = {}
        for name in VARIANTS:
            spec = reference_spec(args.arch, GateVariant.parse(name))
            totals[name] = count_params(build_model(spec, seed=0))["total"]
        org = totals["org"]
        print(f"{args.arch}: trainable parameters by skip-gate variant")
        print(f"{'variant':<8}{'params':>10}{'vs org':>10}")
        for name in VARIANTS:
            pct = 100.0 * (org - totals[name]) / org
            print(f"{name:<8}{totals[name]:>10}{pct:>9.2f}%")
        return 0
    spec = reference_spec(args.arch, GateVariant.parse(args.variant))
    counts = count_params(build_model(spec, seed=0))
    print(f"{args.arch} ({args.variant}): {counts['total']} trainable parameters")
    for layer, n in counts["per_layer"].items():
        print(f"  {layer:<24}{n:>8}")
    return 0


def _cmd_sparsity(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    report = sparsity_report(bundle.model)
    for entry in report:
        hist = " ".join(str(h) for h in entry["histogram"])
        print(f"{entry['gate']}: {entry['channels']} channels, "
              f"{100.0 * entry['channels_off']:.1f}% off, hist [{hist}]")
    return 0


def _cmd_attention(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.model
    rank = model.spec.spatial_rank
    image = load_tensor(args.input)
    if image.ndim == rank:
        image = image[..., np.newaxis]
    if image.ndim != rank + 1:
        raise ValueError(f"input must be [spatial..., channel], "
                         f"got shape {image.shape}")
    x = image[..., np.newaxis]  # batch of one
    capture: dict = {}
    with no_grad():
        logits = model.forward(x, training=False, capture=capture)
        probs = sigmoid(logits).data
    os.makedirs(args.out, exist_ok=True)
    written = []
    for gate in model.gates:
        f_a = capture.get(f"{gate.name}.f_a")
        if f_a is not None:
            path = os.path.join(args.out, f"{gate.name}.f_a.pgm")
            written += export_gray_image(f_a.data[..., 0, 0], path)
        f_s = capture[f"{gate.name}.f_s"]
        grid = _channel_grid(f_s.data[..., 0])
        path = os.path.join(args.out, f"{gate.name}.f_s_grid.pgm")
        written += export_gray_image(grid, path)
    pred = binarize(probs)[..., 0, 0]
    written += export_gray_image(pred, os.path.join(args.out, "pred.pgm"))
    mask_path = _sibling_mask(args.input)
    if mask_path is not None:
        gt = load_tensor(mask_path)[..., 0]
        written += export_gray_image(gt, os.path.join(args.out, "ground_truth.pgm"))
    else:
        print("no msk_* file next to the input; skipping ground truth",
              file=sys.stderr)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_checks(seed=args.seed, only=args.op)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<12} worst rel err {r.worst_rel:.3e}  {status}")
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed", file=sys.stderr)
        return 2
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# helpers


def _write_text(path: str, text: str) -> None:
    from .data import _atomic_write

    _atomic_write(path, text.encode("utf-8"))


def _norm01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(a)), float(np.max(a))
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def _channel_grid(f_s: np.ndarray) -> np.ndarray:
    """Tile [spatial..., C] channels into one [0,1] 2-D mosaic.

    Rank-3 maps contribute their central slice along the first axis. The
    whole mosaic is min-max normalized as one image so channel brightness
    stays comparable.
    """
    if f_s.ndim == 4:  # [D, H, W, C] -> central depth slice
        f_s = f_s[f_s.shape[0] // 2]
    rows_px, cols_px, channels = f_s.shape
    cols = int(np.ceil(np.sqrt(channels)))
    rows = int(np.ceil(channels / cols))
    canvas = np.zeros((rows * rows_px, cols * cols_px))
    norm = _norm01(f_s)
    for ch in range(channels):
        r, c = divmod(ch, cols)
        canvas[r * rows_px:(r + 1) * rows_px,
               c * cols_px:(c + 1) * cols_px] = norm[..., ch]
    return canvas


def _sibling_mask(image_path: str):
    base = os.path.basename(image_path)
    if not base.startswith("img_"):
        return None
    candidate = os.path.join(os.path.dirname(image_path), "msk_" + base[4:])
    return candidate if os.path.exists(candidate) else None


if __name__ == "__main__":
    sys.exit(main())
