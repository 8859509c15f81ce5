"""Figure rendering for run outputs.

Every CSV the pipeline writes gets a companion PNG; the CSV stays the
source of truth and the figures are derived views.  The Agg backend keeps
rendering headless.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .errors import ParameterError

_LOSS_COLUMNS = ("adv", "self", "cycle", "anatomy", "smooth", "align", "total", "d_loss")
_METRIC_COLUMNS = ("mae_hu", "psnr_db", "ssim")


def _read_csv(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"no such CSV: {path}")
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise ParameterError(f"{path} has no data rows")
    return {key: [row[key] for row in rows] for key in rows[0]}


def render_loss_curves(losses_csv, out_png=None) -> Path:
    """Plot every loss column against the iteration counter."""
    data = _read_csv(losses_csv)
    out_png = Path(out_png) if out_png else Path(losses_csv).with_suffix(".png")
    iters = [int(v) for v in data["iter"]]
    fig, ax = plt.subplots(figsize=(8, 5))
    for name in _LOSS_COLUMNS:
        if name not in data:
            continue
        values = [float(v) for v in data[name]]
        if all(v == 0.0 for v in values):
            continue  # terms inactive for this variant
        ax.plot(iters, values, label=name, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(Path(losses_csv).parent.name or "training losses")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_metric_distributions(metrics_csv, out_png=None) -> Path:
    """Per-case scatter of each quality metric; infinite PSNR rows are
    dropped from the PSNR panel (they occur for bit-perfect predictions)."""
    data = _read_csv(metrics_csv)
    out_png = Path(out_png) if out_png else Path(metrics_csv).with_suffix(".png")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, name in zip(axes, _METRIC_COLUMNS):
        values = [float(v) for v in data[name]]
        finite = [v for v in values if math.isfinite(v)]
        ax.plot(range(len(finite)), sorted(finite), "o", markersize=4)
        label = name.upper()
        if len(finite) < len(values):
            label += f" ({len(values) - len(finite)} inf dropped)"
        ax.set_title(label, fontsize=10)
        ax.set_xlabel("case rank")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_ablation_chart(ablation_csv, out_png=None) -> Path:
    """Bar chart of masked MAE and SSIM per variant with std error bars."""
    data = _read_csv(ablation_csv)
    out_png = Path(out_png) if out_png else Path(ablation_csv).with_suffix(".png")
    variants = data["variant"]
    x = np.arange(len(variants))
    fig, (ax_mae, ax_ssim) = plt.subplots(1, 2, figsize=(10, 4))
    ax_mae.bar(
        x,
        [float(v) for v in data["mae_mean"]],
        yerr=[float(v) for v in data["mae_std"]],
        capsize=4,
        color="#4878a8",
    )
    ax_mae.set_xticks(x, variants, rotation=20, fontsize=8)
    ax_mae.set_ylabel("masked MAE (HU)")
    ax_mae.set_title("lower is better", fontsize=9)
    ax_ssim.bar(
        x,
        [float(v) for v in data["ssim_mean"]],
        yerr=[float(v) for v in data["ssim_std"]],
        capsize=4,
        color="#6aa86a",
    )
    ax_ssim.set_xticks(x, variants, rotation=20, fontsize=8)
    ax_ssim.set_ylabel("masked SSIM")
    ax_ssim.set_title("higher is better", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
