"""Synthetic paired-volume generator with known ground-truth deformation.

Each case starts from one random anatomy: an ellipsoidal body on an air
background with a handful of ellipsoidal organs and a low-amplitude smooth
texture.  Two styled renderings of that same anatomy stand in for the two
imaging modalities: each applies its own monotone piecewise-linear intensity
map, and the source rendering additionally brightens a designated subset of
organs the way contrast agent would.  The target rendering is then resampled
through a random smooth displacement field, producing the misaligned target
that plays the role of imperfectly registered ground truth.  Because the
field is known exactly, registration and synthesis claims can be scored
against it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ParameterError, ValidationError
from .registration import DeformationField, load_field, save_field, warp_volume
from .seeding import derive_seed, substream
from .volumes import (
    HU_WINDOW,
    Mask,
    Modality,
    Units,
    Volume,
    denormalize_intensity,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)

AIR_VALUE = -1.0
BODY_VALUE = -0.05


@dataclass(frozen=True)
class StyleParams:
    """Monotone piecewise-linear intensity map on normalized values."""

    knots_in: tuple
    knots_out: tuple

    def __post_init__(self):
        kin = tuple(float(k) for k in self.knots_in)
        kout = tuple(float(k) for k in self.knots_out)
        if len(kin) != len(kout) or len(kin) < 2:
            raise ParameterError("need matching knot lists with at least 2 knots")
        if any(b <= a for a, b in zip(kin, kin[1:])) or any(
            b <= a for a, b in zip(kout, kout[1:])
        ):
            raise ParameterError("knots must be strictly increasing")
        if kin[0] < -1 or kin[-1] > 1 or kout[0] < -1 or kout[-1] > 1:
            raise ParameterError("knots must lie in [-1, 1]")
        object.__setattr__(self, "knots_in", kin)
        object.__setattr__(self, "knots_out", kout)


# Source rendering spreads organ intensities apart; target compresses them.
SOURCE_STYLE = StyleParams(
    knots_in=(-1.0, -0.2, 0.0, 0.8, 1.0),
    knots_out=(-1.0, -0.25, 0.02, 0.70, 1.0),
)
TARGET_STYLE = StyleParams(
    knots_in=(-1.0, -0.2, 0.0, 0.8, 1.0),
    knots_out=(-1.0, -0.20, -0.04, 0.30, 1.0),
)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    organ_count: tuple = (3, 8)
    misalign_amplitude: float = 3.0
    misalign_sigma: float = 8.0
    hu_window: tuple = HU_WINDOW
    enhancement_offset: float = 0.25
    enhancement_fraction: float = 0.34
    texture_amplitude: float = 0.02
    spacing: tuple = (1.0, 1.0, 1.0)
    source_style: StyleParams = field(default=SOURCE_STYLE)
    target_style: StyleParams = field(default=TARGET_STYLE)
    # When set, replaces the random smooth field with a constant shift
    # (dz, dy, dx); used to build benches with a known rigid answer.
    constant_shift: tuple | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 8:
            raise ParameterError(f"dims must be three ints >= 8, got {dims}")
        lo, hi = (int(c) for c in self.organ_count)
        if not 1 <= lo <= hi:
            raise ParameterError(f"bad organ count range ({lo}, {hi})")
        if self.misalign_amplitude < 0 or self.misalign_sigma <= 0:
            raise ParameterError("amplitude must be >= 0 and sigma > 0")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "organ_count", (lo, hi))


@dataclass(frozen=True, eq=False)
class PhantomPair:
    """One generated case: two styled renderings plus ground truth."""

    case_id: str
    source: Volume
    target_aligned: Volume
    target_misaligned: Volume
    mask: Mask
    true_field: DeformationField
    labels: np.ndarray | None = None


def random_smooth_field(
    dims, amplitude: float, sigma: float, seed: int, spacing=(1.0, 1.0, 1.0)
) -> DeformationField:
    """Gaussian-smoothed random displacements rescaled so the largest voxel
    displacement magnitude equals ``amplitude`` exactly."""
    dims = tuple(int(d) for d in dims)
    if amplitude < 0:
        raise ParameterError(f"amplitude must be >= 0, got {amplitude}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3,) + dims)
    smoothed = np.stack([gaussian_filter(noise[c], sigma, mode="reflect") for c in range(3)])
    magnitude = np.sqrt((smoothed**2).sum(axis=0))
    peak = float(magnitude.max())
    if amplitude == 0.0 or peak == 0.0:
        return DeformationField(np.zeros((3,) + dims, np.float32), spacing)
    return DeformationField((smoothed * (amplitude / peak)).astype(np.float32), spacing)


def style_transform(
    volume: Volume,
    params: StyleParams,
    modality: Modality,
    labels: np.ndarray | None = None,
    enhanced_labels=(),
    enhancement_offset: float = 0.0,
) -> Volume:
    """Apply a monotone intensity map; geometry is untouched.

    With ``labels`` and a non-empty ``enhanced_labels``, voxels of those
    labels get ``enhancement_offset`` added after the map (clipped back to
    the normalized range), imitating contrast uptake.
    """
    if volume.units is not Units.NORMALIZED:
        raise ValidationError("style_transform expects normalized input")
    out = np.interp(volume.voxels.astype(np.float64), params.knots_in, params.knots_out)
    if labels is not None and len(enhanced_labels) > 0 and enhancement_offset != 0.0:
        if labels.shape != volume.dims:
            raise ParameterError(f"labels {labels.shape} vs volume {volume.dims}")
        out = out + enhancement_offset * np.isin(labels, list(enhanced_labels))
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    return Volume(out, volume.spacing, Units.NORMALIZED, modality)


def _ellipsoid(coords, center, radii) -> np.ndarray:
    terms = [
        ((coords[i] - center[i]) / radii[i]) ** 2 for i in range(3)
    ]
    return terms[0] + terms[1] + terms[2] <= 1.0


def build_label_map(cfg: PhantomConfig, rng: np.random.Generator):
    """Random body + organ ellipsoid labels: 0 air, 1 body, 2.. organs."""
    dims = np.array(cfg.dims, float)
    coords = np.meshgrid(*(np.arange(d, dtype=float) for d in cfg.dims), indexing="ij")
    center = dims / 2.0 * (1.0 + rng.uniform(-0.05, 0.05, 3))
    radii = dims * rng.uniform(0.34, 0.42, 3)
    labels = np.zeros(cfg.dims, np.uint8)
    labels[_ellipsoid(coords, center, radii)] = 1

    n_organs = int(rng.integers(cfg.organ_count[0], cfg.organ_count[1] + 1))
    for k in range(n_organs):
        organ_center = center + rng.uniform(-0.55, 0.55, 3) * radii
        organ_radii = dims * rng.uniform(0.05, 0.13, 3)
        organ = _ellipsoid(coords, organ_center, organ_radii)
        labels[organ & (labels >= 1)] = 2 + k
    return labels, n_organs


def anatomy_from_labels(
    cfg: PhantomConfig, labels: np.ndarray, n_organs: int, rng: np.random.Generator
) -> Volume:
    """Assign each label a normalized intensity and add smooth body texture."""
    values = np.empty(2 + n_organs, np.float64)
    values[0] = AIR_VALUE
    values[1] = BODY_VALUE
    for k in range(n_organs):
        values[2 + k] = 0.1 + 0.7 * (k + 0.5) / n_organs + rng.uniform(-0.02, 0.02)
    anatomy = values[labels]
    if cfg.texture_amplitude > 0:
        texture = gaussian_filter(rng.standard_normal(cfg.dims), 2.0, mode="reflect")
        texture /= max(float(np.abs(texture).max()), 1e-12)
        anatomy = anatomy + cfg.texture_amplitude * texture * (labels > 0)
    return Volume(
        np.clip(anatomy, -1.0, 1.0).astype(np.float32), cfg.spacing, Units.NORMALIZED
    )


def generate_phantom_pair(cfg: PhantomConfig, seed: int, case_id: str | None = None) -> PhantomPair:
    """Generate one case; same (cfg, seed) is bitwise reproducible."""
    rng = substream(seed, "anatomy")
    labels, n_organs = build_label_map(cfg, rng)
    anatomy = anatomy_from_labels(cfg, labels, n_organs, rng)

    organ_ids = np.arange(2, 2 + n_organs)
    enhanced = tuple(organ_ids[rng.random(n_organs) < cfg.enhancement_fraction])

    lo, hi = cfg.hu_window
    source = denormalize_intensity(
        style_transform(
            anatomy, cfg.source_style, Modality.SOURCE,
            labels=labels, enhanced_labels=enhanced,
            enhancement_offset=cfg.enhancement_offset,
        ),
        lo, hi,
    )
    target_aligned = denormalize_intensity(
        style_transform(anatomy, cfg.target_style, Modality.TARGET), lo, hi
    )

    if cfg.constant_shift is not None:
        shift = np.array(cfg.constant_shift, np.float32).reshape(3, 1, 1, 1)
        true_field = DeformationField(
            np.broadcast_to(shift, (3,) + cfg.dims), cfg.spacing
        )
    else:
        true_field = random_smooth_field(
            cfg.dims, cfg.misalign_amplitude, cfg.misalign_sigma,
            derive_seed(seed, "field"), cfg.spacing,
        )
    target_misaligned = warp_volume(target_aligned, true_field)

    # construction contract: the stored pair must satisfy the warp relation
    check = warp_volume(target_aligned, true_field)
    drift = float(np.abs(check.voxels - target_misaligned.voxels).max())
    if drift > 1e-5:
        raise ValidationError(f"misaligned target fails warp relation by {drift}")

    mask = Mask((labels > 0).astype(np.uint8), cfg.spacing)
    return PhantomPair(
        case_id or f"case{seed:05d}",
        source,
        target_aligned,
        target_misaligned,
        mask,
        true_field,
        labels,
    )


# ---------------------------------------------------------------------------
# dataset directory layout

def case_paths(directory, case_id: str) -> dict:
    directory = Path(directory)
    return {
        "source": directory / f"{case_id}_source.mivol",
        "target_aligned": directory / f"{case_id}_target_aligned.mivol",
        "target_misaligned": directory / f"{case_id}_target_misaligned.mivol",
        "mask": directory / f"{case_id}_mask.mivol",
        "field_stem": directory / f"{case_id}_field",
    }


def save_phantom_pair(pair: PhantomPair, directory) -> None:
    paths = case_paths(directory, pair.case_id)
    save_volume(pair.source, paths["source"])
    save_volume(pair.target_aligned, paths["target_aligned"])
    save_volume(pair.target_misaligned, paths["target_misaligned"])
    save_mask(pair.mask, paths["mask"])
    save_field(pair.true_field, paths["field_stem"])


def load_phantom_pair(directory, case_id: str) -> PhantomPair:
    paths = case_paths(directory, case_id)
    return PhantomPair(
        case_id,
        load_volume(paths["source"]),
        load_volume(paths["target_aligned"]),
        load_volume(paths["target_misaligned"]),
        load_mask(paths["mask"]),
        load_field(paths["field_stem"]),
    )


def write_dataset(directory, cfg: PhantomConfig, count: int, seed: int) -> list:
    """Generate ``count`` cases seeded from ``seed`` and write a manifest."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    case_ids = []
    for i in range(count):
        pair = generate_phantom_pair(cfg, derive_seed(seed, f"case{i}"), f"case{i:04d}")
        save_phantom_pair(pair, directory)
        case_ids.append(pair.case_id)
    manifest = {
        "cases": case_ids,
        "dims": list(cfg.dims),
        "seed": seed,
        "amplitude": cfg.misalign_amplitude,
        "sigma": cfg.misalign_sigma,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )
    return case_ids


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise ParameterError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


def load_dataset(directory) -> list:
    return [load_phantom_pair(directory, cid) for cid in read_manifest(directory)["cases"]]
