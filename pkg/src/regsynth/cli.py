"""Command-line front end.

Exit code contract: 0 on success, 1 for anything the user can fix
(bad flags, bad config, broken files), 2 for a runtime abort such as a
non-finite training loss.  argparse normally exits 2 on usage errors,
which would collide with the abort code, so the parser is overridden to
exit 1 and list the valid flags.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (
    BoundsError,
    CorruptionError,
    EmptyMaskError,
    FormatError,
    NonFiniteLossError,
    ParameterError,
    ValidationError,
)
from .experiments import run_ablation
from .metrics import evaluate_dataset
from .phantom import PhantomConfig, write_dataset
from .report import (
    render_ablation_chart,
    render_loss_curves,
    render_metric_distributions,
)
from .trainer import (
    VARIANTS,
    infer,
    load_checkpoint,
    parse_config,
    run_directory,
    train,
)
from .volumes import load_volume, save_volume

_USER_ERRORS = (
    ParameterError,
    ValidationError,
    FormatError,
    CorruptionError,
    EmptyMaskError,
    BoundsError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    PermissionError,
)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 (not argparse's 2) and list the valid flags."""

    def error(self, message):
        flags = sorted(
            {opt for action in self._actions for opt in action.option_strings}
        )
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        if flags:
            print(f"valid flags: {' '.join(flags)}", file=sys.stderr)
        raise SystemExit(1)

    def parse_args(self, args=None, namespace=None):
        namespace, extras = self.parse_known_args(args, namespace)
        if extras:
            # leftovers surface here even when a subcommand consumed the
            # rest of argv; report them against that subcommand's flags
            reporter = getattr(namespace, "subparser", None) or self
            reporter.error(f"unrecognized arguments: {' '.join(extras)}")
        return namespace


def _parse_dims(text: str) -> tuple:
    parts = text.split(",")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise ParameterError(f"--dims expects an int or D,H,W triple, got {text!r}")
    if len(values) == 1:
        values = values * 3
    if len(values) != 3:
        raise ParameterError(f"--dims expects 1 or 3 integers, got {len(values)}")
    return values


def _cmd_gen_phantoms(args) -> int:
    cfg = PhantomConfig(
        dims=_parse_dims(args.dims),
        misalign_amplitude=args.amplitude,
        misalign_sigma=args.sigma,
    )
    cases = write_dataset(args.out, cfg, args.count, args.seed)
    print(f"wrote {len(cases)} phantom pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    # echo the resolved config so logs capture the effective run settings
    sys.stdout.write(cfg.canonical_text())
    run_dir = run_directory(args.config)
    ckpt = train(cfg, run_dir)
    figure = render_loss_curves(run_dir / "losses.csv")
    print(f"checkpoint: {ckpt}")
    print(f"loss curves: {figure}")
    return 0


def _cmd_synthesize(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    result = infer(checkpoint, load_volume(args.input))
    out_path = Path(args.output)
    if out_path.parent and not out_path.parent.is_dir():
        out_path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(result.volume, out_path)
    if any(hi for _, hi in result.padding):
        meta = out_path.with_name(out_path.name + ".meta.json")
        meta.write_text(json.dumps({"padding": result.padding}) + "\n")
        print(f"padding metadata: {meta}")
    print(f"synthesized: {out_path}")
    return 0


def _cmd_evaluate(args) -> int:
    _, summary = evaluate_dataset(
        args.pred, args.ref, out_dir=args.out, mask_dir=args.mask
    )
    figure = render_metric_distributions(Path(args.out) / "metrics.csv")
    print(
        f"cases: {summary.count}  "
        f"MAE {summary.mae_mean:.3f} ± {summary.mae_std:.3f}  "
        f"PSNR {summary.psnr_mean:.2f} ± {summary.psnr_std:.2f}  "
        f"SSIM {summary.ssim_mean:.4f} ± {summary.ssim_std:.4f}"
    )
    print(f"metric figures: {figure}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    if not variants:
        raise ParameterError("--variants lists no variant names")
    out_root = run_directory(args.config).with_name(Path(args.config).stem + "_ablation")
    csv_path = run_ablation(cfg, out_root, variants)
    figure = render_ablation_chart(csv_path)
    print(f"ablation table: {csv_path}")
    print(f"ablation chart: {figure}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="regsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-phantoms", help="write a paired phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of pairs")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--dims", default="64", help="volume dims: int or D,H,W")
    p.add_argument("--amplitude", type=float, default=3.0, help="misalignment amplitude (voxels)")
    p.add_argument("--sigma", type=float, default=8.0, help="misalignment smoothness (voxels)")
    p.set_defaults(func=_cmd_gen_phantoms, subparser=p)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True, help="config file path")
    p.set_defaults(func=_cmd_train, subparser=p)

    p = sub.add_parser("synthesize", help="translate one source volume")
    p.add_argument("--checkpoint", required=True, help="ckpt_final.bin path")
    p.add_argument("--input", required=True, help="source MIVOL file")
    p.add_argument("--output", required=True, help="prediction MIVOL path")
    p.set_defaults(func=_cmd_synthesize, subparser=p)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True, help="directory of {case}_pred.mivol files")
    p.add_argument("--ref", required=True, help="phantom dataset directory with aligned targets")
    p.add_argument("--mask", default=None, help="mask directory (default: beside the references)")
    p.add_argument("--out", required=True, help="directory for metrics.csv and figures")
    p.set_defaults(func=_cmd_evaluate, subparser=p)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--config", required=True, help="config file path")
    p.add_argument(
        "--variants",
        default=",".join(VARIANTS),
        help="comma-separated variant names (BASELINE adds the paired-L1 reference)",
    )
    p.set_defaults(func=_cmd_ablate, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; _Parser.error raised 1
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
