"""Deformable registration: flow U-Net, warping, and field smoothness.

Displacement fields are dense, in voxel units, component order
``(dz, dy, dx)``.  The flow head of the network is zero-initialized, so an
untrained network predicts the identity transform; the joint training
scheme needs that so early synthesis gradients are not scrambled by a
random warp.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import grid_sample_trilinear, scaled_channels
from .errors import ParameterError, ValidationError
from .volumes import Mask, Modality, Units, Volume, load_volume, save_volume

FIELD_COMPONENT_SUFFIXES = ("_dz", "_dy", "_dx")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Dense displacement field on a voxel grid, shape (3, D, H, W)."""

    displacements: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.displacements, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValidationError(f"field must have shape (3, D, H, W), got {arr.shape}")
        if min(arr.shape[1:]) < 1:
            raise ValidationError(f"all dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("field must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "displacements", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.displacements.shape[1:])


def save_field(field: DeformationField, stem) -> list:
    """Write one volume container per displacement component.

    ``stem`` is a path without extension; ``<stem>_dz.mivol`` etc. are
    written.  Components are raw voxel offsets; the units tag in the
    container is nominal.
    """
    paths = []
    for i, suffix in enumerate(FIELD_COMPONENT_SUFFIXES):
        path = Path(f"{stem}{suffix}.mivol")
        save_volume(
            Volume(field.displacements[i], field.spacing, Units.HU, Modality.SOURCE),
            path,
        )
        paths.append(path)
    return paths


def load_field(stem) -> DeformationField:
    components = [
        load_volume(Path(f"{stem}{suffix}.mivol")) for suffix in FIELD_COMPONENT_SUFFIXES
    ]
    spacing = components[0].spacing
    for c in components[1:]:
        if c.dims != components[0].dims or c.spacing != spacing:
            raise ValidationError("field components disagree on grid")
    return DeformationField(np.stack([c.voxels for c in components]), spacing)


class RegNet(nn.Module):
    """U-Net from a stacked source/target pair to a displacement field.

    Four stride-2 encoder levels, mirrored decoder with skip connections,
    and a final 3-channel conv head.  Spatial dims must be multiples of 16.
    """

    def __init__(self, base_channels=(16, 32, 32, 32), channel_scale: float = 1.0):
        super().__init__()
        c0, c1, c2, c3 = scaled_channels(base_channels, channel_scale)

        def block(cin, cout, stride=1):
            return nn.Sequential(
                nn.Conv3d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2)
            )

        self.enc0 = block(2, c0, 2)
        self.enc1 = block(c0, c1, 2)
        self.enc2 = block(c1, c2, 2)
        self.enc3 = block(c2, c3, 2)
        self.dec0 = block(c3, c2)
        self.dec1 = block(c2 + c2, c1)
        self.dec2 = block(c1 + c1, c0)
        self.dec3 = block(c0 + c0, c0)
        self.dec4 = block(c0 + 2, c0)
        self.flow = nn.Conv3d(c0, 3, 3, 1, 1)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if source.shape != target.shape:
            raise ParameterError(
                f"source {tuple(source.shape)} and target {tuple(target.shape)} differ"
            )
        if any(s % 16 for s in source.shape[2:]):
            raise ParameterError(
                f"spatial dims must be multiples of 16, got {tuple(source.shape[2:])}"
            )
        x = torch.cat([source, target], dim=1)
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        y = self.dec0(e3)
        y = self.dec1(torch.cat([self._up(y), e2], dim=1))
        y = self.dec2(torch.cat([self._up(y), e1], dim=1))
        y = self.dec3(torch.cat([self._up(y), e0], dim=1))
        y = self.dec4(torch.cat([self._up(y), x], dim=1))
        return self.flow(y)


def warp(x: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Tensor-level warp; see :func:`regsynth.blocks.grid_sample_trilinear`."""
    return grid_sample_trilinear(x, field)


def _volume_to_tensor(volume: Volume) -> torch.Tensor:
    return torch.from_numpy(np.array(volume.voxels)).unsqueeze(0).unsqueeze(0)


def warp_volume(volume: Volume, field: DeformationField) -> Volume:
    """Resample a volume through a displacement field on the same grid."""
    if volume.dims != field.dims:
        raise ParameterError(f"volume {volume.dims} vs field {field.dims}")
    x = _volume_to_tensor(volume)
    disp = torch.from_numpy(np.array(field.displacements)).unsqueeze(0)
    with torch.no_grad():
        out = grid_sample_trilinear(x, disp)
    return volume.with_voxels(out[0, 0].numpy())


def predict_field(model: RegNet, source: Volume, target: Volume) -> DeformationField:
    """Run the registration network on a normalized volume pair."""
    if source.units is not Units.NORMALIZED or target.units is not Units.NORMALIZED:
        raise ValidationError("predict_field expects normalized volumes")
    if source.dims != target.dims:
        raise ParameterError(f"dims differ: {source.dims} vs {target.dims}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        flow = model(_volume_to_tensor(source), _volume_to_tensor(target))
    if was_training:
        model.train()
    return DeformationField(flow[0].numpy(), source.spacing)


def smoothness_loss(field: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference of the field over voxels, components,
    and the three grid directions; the difference past the last slice of a
    direction counts as zero.  Constant fields score exactly zero and the
    loss scales quadratically with field amplitude.
    """
    if field.ndim == 4:
        field = field.unsqueeze(0)
    if field.ndim != 5 or field.shape[1] != 3:
        raise ParameterError(f"expected field (N, 3, D, H, W), got {tuple(field.shape)}")
    total = field.new_zeros(())
    for axis in (2, 3, 4):
        if field.shape[axis] < 2:
            continue
        diff = field.narrow(axis, 1, field.shape[axis] - 1) - field.narrow(
            axis, 0, field.shape[axis] - 1
        )
        total = total + diff.square().sum()
    return total / field.numel()
