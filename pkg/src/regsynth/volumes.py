"""Volume data model and bit-exact on-disk container.

A :class:`Volume` is a dense 3D scalar image on a regular grid, axis order
``(z, y, x)`` with x fastest in memory, carrying physical voxel spacing, an
intensity-units tag, and a modality tag.  A :class:`Mask` is the binary
companion used to restrict losses and metrics to the body.

On-disk container (``.mivol``), designed for byte-identical round trips:

* magic ``MIVOL1\\n`` (7 bytes)
* header length, unsigned 64-bit little-endian
* UTF-8 JSON header with exactly the keys ``dims`` ``[D, H, W]``,
  ``spacing`` ``[sz, sy, sx]``, ``dtype`` (``"f32le"`` or ``"u8"``),
  ``units`` (``"HU"`` or ``"NORM"``), ``modality`` (``"SOURCE"`` or
  ``"TARGET"``), serialized with sorted keys and no whitespace so equal
  metadata always produces identical bytes
* raw little-endian payload, x fastest; float32 for volumes, one byte per
  voxel for masks

Mask files reuse the container with ``dtype "u8"`` and nominal units and
modality tags (masks have neither).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BoundsError,
    CorruptionError,
    EmptyMaskError,
    FormatError,
    ParameterError,
    ValidationError,
)

MAGIC = b"MIVOL1\n"

# Normalized volumes may exceed [-1, 1] by interpolation roundoff only.
_NORM_SLACK = 1e-5

# Default intensity window mapping HU onto [-1, 1].
HU_WINDOW = (-1000.0, 1000.0)


class Units(Enum):
    HU = "HU"
    NORMALIZED = "NORM"


class Modality(Enum):
    SOURCE = "SOURCE"
    TARGET = "TARGET"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    arr.flags.writeable = False
    return arr


def _check_grid(voxels: np.ndarray, spacing: tuple) -> tuple:
    if voxels.ndim != 3:
        raise ValidationError(f"expected a 3D array, got ndim={voxels.ndim}")
    if min(voxels.shape) < 1:
        raise ValidationError(f"all dims must be positive, got {voxels.shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing must be three positive floats, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar image with spacing, units, and modality tags."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    units: Units = Units.HU
    modality: Modality = Modality.SOURCE

    def __post_init__(self):
        arr = _frozen_array(self.voxels, np.float32)
        spacing = _check_grid(arr, self.spacing)
        if not np.isfinite(arr).all():
            raise ValidationError("voxels must be finite")
        if self.units is Units.NORMALIZED:
            lo, hi = float(arr.min()), float(arr.max())
            if lo < -1.0 - _NORM_SLACK or hi > 1.0 + _NORM_SLACK:
                raise ValidationError(
                    f"normalized voxels must lie in [-1, 1], got [{lo}, {hi}]"
                )
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels, units: Units | None = None) -> "Volume":
        """New volume on the same grid, optionally retagging units."""
        return Volume(voxels, self.spacing, units or self.units, self.modality)


@dataclass(frozen=True, eq=False)
class Mask:
    """Immutable binary companion to a Volume (1 = body, 0 = background)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.voxels)
        if not np.isin(raw, (0, 1)).all():
            raise ValidationError("mask voxels must be 0 or 1")
        arr = _frozen_array(raw, np.uint8)
        spacing = _check_grid(arr, self.spacing)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.voxels.shape)

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


def _encode_header(dims, spacing, dtype, units, modality) -> bytes:
    header = {
        "dims": [int(d) for d in dims],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "units": units,
        "modality": modality,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    return text.encode("utf-8")


def _write_container(path, dims, spacing, dtype, units, modality, payload: bytes):
    header = _encode_header(dims, spacing, dtype, units, modality)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(payload)


def _read_container(path):
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a MIVOL file")
    if len(blob) < len(MAGIC) + 8:
        raise CorruptionError(f"{path}: truncated before header length")
    hlen = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    if len(blob) < start + hlen:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    expected = {"dims", "spacing", "dtype", "units", "modality"}
    if set(header) != expected:
        raise FormatError(
            f"{path}: header keys {sorted(header)} != {sorted(expected)}"
        )
    dims = header["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d > 0 for d in dims)
    ):
        raise FormatError(f"{path}: dims must be three positive integers")
    spacing = header["spacing"]
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise FormatError(f"{path}: spacing must be three numbers")
    return header, blob[start + hlen :]


def _check_payload(path, payload, dims, itemsize):
    expected = dims[0] * dims[1] * dims[2] * itemsize
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )


def save_volume(volume: Volume, path) -> None:
    """Write a volume; equal volumes produce byte-identical files."""
    payload = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    _write_container(
        path,
        volume.dims,
        volume.spacing,
        "f32le",
        volume.units.value,
        volume.modality.value,
        payload,
    )


def load_volume(path) -> Volume:
    header, payload = _read_container(path)
    if header["dtype"] != "f32le":
        raise FormatError(f"{path}: expected dtype f32le, got {header['dtype']!r}")
    try:
        units = Units(header["units"])
        modality = Modality(header["modality"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    dims = header["dims"]
    _check_payload(path, payload, dims, 4)
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(voxels, tuple(header["spacing"]), units, modality)


def save_mask(mask: Mask, path) -> None:
    _write_container(
        path, mask.dims, mask.spacing, "u8", "HU", "SOURCE", mask.voxels.tobytes()
    )


def load_mask(path) -> Mask:
    header, payload = _read_container(path)
    if header["dtype"] != "u8":
        raise FormatError(f"{path}: expected dtype u8, got {header['dtype']!r}")
    dims = header["dims"]
    _check_payload(path, payload, dims, 1)
    voxels = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return Mask(voxels, tuple(header["spacing"]))


def normalize_intensity(volume: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Clip HU to [lo, hi] and map linearly onto [-1, 1]."""
    if volume.units is not Units.HU:
        raise ValidationError("normalize_intensity expects HU input")
    if not lo < hi:
        raise ParameterError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    clipped = np.clip(volume.voxels.astype(np.float64), lo, hi)
    out = (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)
    return volume.with_voxels(out, Units.NORMALIZED)


def denormalize_intensity(volume: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Inverse of :func:`normalize_intensity` on the same window."""
    if volume.units is not Units.NORMALIZED:
        raise ValidationError("denormalize_intensity expects normalized input")
    if not lo < hi:
        raise ParameterError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    vox = volume.voxels.astype(np.float64)
    out = ((vox + 1.0) * 0.5 * (hi - lo) + lo).astype(np.float32)
    return volume.with_voxels(out, Units.HU)


def compute_body_mask(volume: Volume, threshold: float = -500.0) -> Mask:
    """Threshold out air, keep the largest 6-connected component, and fill
    interior holes independently on each axial (fixed-z) slice."""
    if volume.units is not Units.HU:
        raise ValidationError("compute_body_mask expects HU input")
    foreground = volume.voxels > threshold
    if not foreground.any():
        raise EmptyMaskError(f"no voxels above {threshold}")
    structure = ndimage.generate_binary_structure(3, 1)
    labels, ncomp = ndimage.label(foreground, structure=structure)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    body = labels == int(counts.argmax())
    filled = np.stack([ndimage.binary_fill_holes(plane) for plane in body])
    return Mask(filled.astype(np.uint8), volume.spacing)


def extract_patch(volume: Volume, origin: tuple, size: tuple) -> Volume:
    """Copy the axis-aligned box ``origin : origin + size`` out of a volume."""
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if len(origin) != 3 or len(size) != 3:
        raise BoundsError(f"origin {origin} and size {size} must have 3 entries")
    for o, s, d in zip(origin, size, volume.dims):
        if s < 1 or o < 0 or o + s > d:
            raise BoundsError(
                f"patch origin={origin} size={size} outside dims {volume.dims}"
            )
    z, y, x = origin
    dz, dy, dx = size
    sub = volume.voxels[z : z + dz, y : y + dy, x : x + dx]
    return Volume(sub, volume.spacing, volume.units, volume.modality)
