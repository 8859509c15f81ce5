"""Experiment drivers: dataset splits, checkpoint scoring, ablations.

These glue the trainer, phantom generator, and metrics into the
reproducible runs the command line exposes.  Every function is
deterministic given its seed arguments.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .metrics import evaluate_dataset
from .phantom import PhantomConfig, load_dataset, write_dataset
from .registration import predict_field
from .seeding import derive_seed
from .trainer import (
    BASELINE,
    VARIANTS,
    TrainConfig,
    infer,
    load_checkpoint,
    load_regnet,
    train,
    train_baseline,
)
from .volumes import normalize_intensity, save_volume

SPLIT_NAMES = ("train", "val", "test")
ABLATION_CSV_HEADER = "variant,mae_mean,mae_std,psnr_mean,psnr_std,ssim_mean,ssim_std"


def prepare_splits(
    root,
    cfg: PhantomConfig,
    counts: tuple = (40, 5, 10),
    seed: int = 7,
) -> dict:
    """Write train/val/test phantom datasets under ``root``.

    Each split draws from its own seed substream, so the splits are
    disjoint in content and any one split is reproducible on its own.
    """
    if len(counts) != 3 or any(c < 1 for c in counts):
        raise ParameterError(f"counts must be three positive ints, got {counts}")
    root = Path(root)
    written = {}
    for name, count in zip(SPLIT_NAMES, counts):
        write_dataset(root / name, cfg, count=count, seed=derive_seed(seed, f"split-{name}"))
        written[name] = count
    return written


def synthesize_dataset(checkpoint, src_dir, out_dir) -> list:
    """Run inference over every case in a dataset; writes ``{case}_pred.mivol``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for pair in load_dataset(src_dir):
        result = infer(checkpoint, pair.source)
        path = out_dir / f"{pair.case_id}_pred.mivol"
        save_volume(result.volume, path)
        paths.append(path)
    return paths


def evaluate_checkpoint(checkpoint_path, test_dir, out_dir) -> tuple:
    """Synthesize the test split and score it; returns (cases, summary)."""
    checkpoint = load_checkpoint(checkpoint_path)
    out_dir = Path(out_dir)
    pred_dir = out_dir / "preds"
    synthesize_dataset(checkpoint, test_dir, pred_dir)
    return evaluate_dataset(pred_dir, test_dir, out_dir=out_dir)


def mean_displacement_over_mask(checkpoint_path, dataset_dir, axis: int = 2) -> float:
    """Mean predicted displacement component inside the body mask.

    Uses the trained registration network on each source/misaligned-target
    pair; ``axis`` indexes (dz, dy, dx), so the default reports dx.
    """
    if axis not in (0, 1, 2):
        raise ParameterError(f"axis must be 0, 1, or 2, got {axis}")
    checkpoint = load_checkpoint(checkpoint_path)
    regnet = load_regnet(checkpoint_path)
    lo, hi = checkpoint.hu_window
    means = []
    for pair in load_dataset(dataset_dir):
        src = normalize_intensity(pair.source, lo, hi)
        tgt = normalize_intensity(pair.target_misaligned, lo, hi)
        field = predict_field(regnet, src, tgt)
        component = field.displacements[axis]
        sel = pair.mask.voxels.astype(bool)
        means.append(float(component[sel].mean()))
    if not means:
        raise ParameterError(f"no cases found in {dataset_dir}")
    return float(np.mean(means))


def _variant_slug(variant: str) -> str:
    return variant.lower().replace("+", "_")


def run_ablation(
    cfg: TrainConfig,
    out_root,
    variants: tuple = VARIANTS,
    test_dir=None,
) -> Path:
    """Train and score each variant on shared data and seed.

    ``variants`` may also include ``BASELINE`` to add the paired-L1
    reference row.  Writes ``ablation.csv`` under ``out_root`` and returns
    its path; per-variant runs live in ``<out_root>/<variant>_run/``.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    if test_dir is None:
        test_dir = Path(cfg.data_dir) / "test"
    rows = []
    for variant in variants:
        if variant not in VARIANTS and variant != BASELINE:
            raise ParameterError(
                f"unknown variant {variant!r}; expected {', '.join(VARIANTS + (BASELINE,))}"
            )
        run_dir = out_root / f"{_variant_slug(variant)}_run"
        if variant == BASELINE:
            ckpt = train_baseline(cfg, run_dir)
        else:
            ckpt = train(replace(cfg, variant=variant), run_dir)
        _, summary = evaluate_checkpoint(ckpt, test_dir, run_dir)
        rows.append(
            ",".join(
                [variant]
                + [
                    repr(float(v))
                    for v in (
                        summary.mae_mean, summary.mae_std,
                        summary.psnr_mean, summary.psnr_std,
                        summary.ssim_mean, summary.ssim_std,
                    )
                ]
            )
        )
    csv_path = out_root / "ablation.csv"
    csv_path.write_text(ABLATION_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    return csv_path
