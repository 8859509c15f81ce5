"""Shared neural building blocks and the trilinear resampler.

Everything here works on plain 5D tensors ``(N, C, D, H, W)``.  The
resampler takes displacements in voxel units and is written so that a zero
field reproduces its input exactly and integer fields reduce to index
shifts; interpolation-based consistency checks elsewhere rely on that.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError


class ConvINReLU(nn.Module):
    """3x3x3 conv (pad 1) -> instance norm with affine -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 3, stride, 1)
        self.norm = nn.InstanceNorm3d(out_channels, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class StyleInstanceNorm3d(nn.Module):
    """Instance norm whose scale and shift are predicted from a style vector.

    The affine map starts near identity: scale is ``1 + gamma`` with gamma
    initially small, shift starts at the linear layer's bias.
    """

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm3d(channels, affine=False)
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, style):
        gamma, beta = self.affine(style).chunk(2, dim=1)
        gamma = gamma[:, :, None, None, None]
        beta = beta[:, :, None, None, None]
        return (1.0 + gamma) * self.norm(x) + beta


class ResidualBlock(nn.Module):
    """Two-conv residual block; pass ``style_dim`` to make the norms
    style-driven, otherwise they are plain affine instance norms."""

    def __init__(self, channels: int, style_dim: int | None = None):
        super().__init__()
        self.style_dim = style_dim
        self.conv1 = nn.Conv3d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv3d(channels, channels, 3, 1, 1)
        if style_dim is None:
            self.norm1 = nn.InstanceNorm3d(channels, affine=True)
            self.norm2 = nn.InstanceNorm3d(channels, affine=True)
        else:
            self.norm1 = StyleInstanceNorm3d(channels, style_dim)
            self.norm2 = StyleInstanceNorm3d(channels, style_dim)

    def forward(self, x, style=None):
        if self.style_dim is None:
            if style is not None:
                raise ParameterError("block was built without style modulation")
            h = F.relu(self.norm1(self.conv1(x)))
            return x + self.norm2(self.conv2(h))
        if style is None:
            raise ParameterError("style-modulated block needs a style vector")
        h = F.relu(self.norm1(self.conv1(x), style))
        return x + self.norm2(self.conv2(h), style)


class Mlp(nn.Module):
    """Three linear layers with ReLU after the first two."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, x):
        return self.net(x)


def scaled_channels(channels, scale: float) -> tuple:
    """Apply a global width multiplier, never dropping below one channel."""
    if scale <= 0:
        raise ParameterError(f"channel scale must be positive, got {scale}")
    return tuple(max(1, round(c * scale)) for c in channels)


def identity_coordinates(dims, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel-index grid, shape (3, D, H, W), order (z, y, x)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def grid_sample_trilinear(x: torch.Tensor, displacement: torch.Tensor) -> torch.Tensor:
    """Resample ``x`` at ``identity + displacement``, trilinear, clamped border.

    ``x`` is ``(N, C, D, H, W)``; ``displacement`` is ``(N, 3, D, H, W)`` in
    voxel units, component order ``(dz, dy, dx)``.  Sample positions outside
    the volume clamp to the boundary.  Gradients flow to both ``x`` and the
    displacement.  Interpolation is exact at integer positions: a zero field
    returns ``x`` unchanged and constant integer fields equal index shifts
    with edge clamping.
    """
    if x.ndim != 5 or displacement.ndim != 5:
        raise ParameterError(
            f"expected 5D tensors, got {tuple(x.shape)} and {tuple(displacement.shape)}"
        )
    if displacement.shape[1] != 3:
        raise ParameterError("displacement needs 3 channels (dz, dy, dx)")
    if x.shape[0] != displacement.shape[0] or x.shape[2:] != displacement.shape[2:]:
        raise ParameterError(
            f"grid mismatch: image {tuple(x.shape)} vs field {tuple(displacement.shape)}"
        )
    n, c, d, h, w = x.shape
    dtype = torch.promote_types(x.dtype, displacement.dtype)
    x = x.to(dtype)
    displacement = displacement.to(dtype)
    base = identity_coordinates((d, h, w), dtype, x.device)

    pos = []
    lo_idx = []
    hi_idx = []
    frac = []
    for axis, size in enumerate((d, h, w)):
        p = (base[axis] + displacement[:, axis]).clamp(0, size - 1)
        i0 = p.detach().floor().clamp(0, max(size - 2, 0)).long()
        i1 = (i0 + 1).clamp(max=size - 1)
        pos.append(p)
        lo_idx.append(i0)
        hi_idx.append(i1)
        frac.append(p - i0.to(dtype))

    flat = x.reshape(n, c, d * h * w)

    def take(iz, iy, ix):
        linear = ((iz * h + iy) * w + ix).reshape(n, 1, -1).expand(n, c, -1)
        return flat.gather(2, linear).reshape(n, c, d, h, w)

    fz, fy, fx = frac
    out = torch.zeros_like(x)
    for bz, wz in ((0, 1 - fz), (1, fz)):
        for by, wy in ((0, 1 - fy), (1, fy)):
            for bx, wx in ((0, 1 - fx), (1, fx)):
                iz = hi_idx[0] if bz else lo_idx[0]
                iy = hi_idx[1] if by else lo_idx[1]
                ix = hi_idx[2] if bx else lo_idx[2]
                out = out + take(iz, iy, ix) * (wz * wy * wx).unsqueeze(1)
    return out


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    worst_input: str
    entries_checked: int
    per_input: dict = dataclass_field(default_factory=dict)


def finite_difference_check(
    fn,
    wrt: dict,
    step: float = 1e-3,
    probes: int = 32,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` is a zero-argument callable that rebuilds its graph on each call
    and returns a scalar tensor depending on the leaf tensors in ``wrt``
    (name -> tensor with ``requires_grad=True``).  Each tensor is probed at
    up to ``probes`` entries (all entries when small, otherwise a seeded
    subset) by perturbing ``.data`` in place.  Per-entry error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; run the
    check in float64 for meaningful tolerances.
    """
    output = fn()
    if output.numel() != 1:
        raise ParameterError("fn must return a scalar")
    grads = torch.autograd.grad(output, list(wrt.values()))
    rng = np.random.default_rng(seed)

    worst = (0.0, "")
    per_input = {}
    total = 0
    for (name, tensor), grad in zip(wrt.items(), grads):
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        count = flat.numel()
        if count <= probes:
            indices = range(count)
        else:
            indices = sorted(rng.choice(count, size=probes, replace=False).tolist())
        worst_here = 0.0
        for i in indices:
            original = flat[i].item()
            flat[i] = original + step
            f_plus = fn().detach().item()
            flat[i] = original - step
            f_minus = fn().detach().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = gflat[i].item()
            scale = max(abs(numeric), abs(analytic), floor)
            worst_here = max(worst_here, abs(numeric - analytic) / scale)
            total += 1
        per_input[name] = worst_here
        if worst_here >= worst[0]:
            worst = (worst_here, name)
    return GradCheckReport(worst[0], worst[1], total, per_input)
