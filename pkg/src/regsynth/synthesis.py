"""Content/style disentangled synthesis across two imaging modalities.

One network per direction would entangle anatomy with appearance; instead
the model keeps a shared-shape content space and explicit style codes.
Per domain there are: a content encoder (three stride-2 conv blocks then
four residual blocks, so content lives at 1/8 resolution), a style encoder
(a small MLP reading that domain's learned 8-component code), a generator
(four style-modulated residual blocks, three upsampling stages, and a
single-channel tanh head), and a multi-scale patch discriminator.

The translation path source -> target is: encode content with the source
content encoder, produce the target style from the target domain code, and
decode with the target generator.  At test time only those four submodules
run; everything else exists purely for training.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ConvINReLU, Mlp, ResidualBlock, scaled_channels
from .errors import ParameterError, ValidationError
from .seeding import derive_seed
from .volumes import Modality, Units, Volume

CONTENT_CHANNELS = (32, 64, 128)
GENERATOR_UP_CHANNELS = (64, 32, 32)
DISCRIMINATOR_CHANNELS = (32, 64, 128, 256)
DOMAIN_CODE_DIM = 8
STYLE_DIM = 64


class DomainCode(nn.Module):
    """Learned per-domain code vector, exposed through ``forward`` so that
    reading it is visible to module-level tracing."""

    def __init__(self, dim: int = DOMAIN_CODE_DIM):
        super().__init__()
        if dim != DOMAIN_CODE_DIM:
            raise ParameterError(f"domain code must have {DOMAIN_CODE_DIM} components")
        self.value = nn.Parameter(torch.randn(dim))

    def forward(self) -> torch.Tensor:
        return self.value


class ContentEncoder(nn.Module):
    """Image to content latent at 1/8 resolution."""

    def __init__(self, channel_scale: float = 1.0):
        super().__init__()
        c0, c1, c2 = scaled_channels(CONTENT_CHANNELS, channel_scale)
        self.down = nn.Sequential(
            ConvINReLU(1, c0, 2), ConvINReLU(c0, c1, 2), ConvINReLU(c1, c2, 2)
        )
        self.blocks = nn.ModuleList(ResidualBlock(c2) for _ in range(4))
        self.out_channels = c2

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ParameterError(f"expected (N, 1, D, H, W), got {tuple(x.shape)}")
        if any(s % 8 for s in x.shape[2:]):
            raise ParameterError(
                f"spatial dims must be multiples of 8, got {tuple(x.shape[2:])}"
            )
        h = self.down(x)
        for block in self.blocks:
            h = block(h)
        return h


class StyleEncoder(nn.Module):
    """Domain code vector to style vector."""

    def __init__(self, style_dim: int = STYLE_DIM):
        super().__init__()
        self.net = Mlp(DOMAIN_CODE_DIM, style_dim, style_dim)
        self.style_dim = style_dim

    def forward(self, code):
        if code.ndim == 1:
            code = code.unsqueeze(0)
        return self.net(code)


class Generator(nn.Module):
    """Content latent plus style vector to a single-channel image in
    [-1, 1]; three doubling stages bring the latent back to full resolution."""

    def __init__(self, channel_scale: float = 1.0, style_dim: int | None = STYLE_DIM):
        super().__init__()
        cin = scaled_channels(CONTENT_CHANNELS, channel_scale)[-1]
        u0, u1, u2 = scaled_channels(GENERATOR_UP_CHANNELS, channel_scale)
        self.style_dim = style_dim
        self.blocks = nn.ModuleList(
            ResidualBlock(cin, style_dim) for _ in range(4)
        )
        ups = []
        for a, b in ((cin, u0), (u0, u1), (u1, u2)):
            ups.append(ConvINReLU(a, b))
        self.up_convs = nn.ModuleList(ups)
        self.head = nn.Conv3d(u2, 1, 3, 1, 1)

    def forward(self, content, style=None):
        if (style is None) != (self.style_dim is None):
            raise ParameterError("style vector does not match generator construction")
        if style is not None and style.shape[0] not in (1, content.shape[0]):
            raise ParameterError(
                f"style batch {style.shape[0]} incompatible with content batch {content.shape[0]}"
            )
        if style is not None and style.shape[0] == 1 and content.shape[0] > 1:
            style = style.expand(content.shape[0], -1)
        h = content
        for block in self.blocks:
            h = block(h, style)
        for conv in self.up_convs:
            h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        return torch.tanh(self.head(h))


class PatchDiscriminator(nn.Module):
    """Multi-scale 3D patch discriminator; no normalization layers.

    Each scale applies four stride-2 k4 convs and a final k3 conv, mapping a
    (N, 1, D, H, W) input to a realness map of spatial size D/16 x H/16 x
    W/16.  Coarser scales see 2x-downsampled input; scales whose input
    would fall under 16 voxels in any dim are skipped.
    """

    def __init__(self, channel_scale: float = 1.0, num_scales: int = 2):
        super().__init__()
        if num_scales < 1:
            raise ParameterError("need at least one discriminator scale")
        chans = scaled_channels(DISCRIMINATOR_CHANNELS, channel_scale)
        self.scales = nn.ModuleList()
        for _ in range(num_scales):
            layers = []
            cin = 1
            for cout in chans:
                layers += [nn.Conv3d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2)]
                cin = cout
            layers.append(nn.Conv3d(cin, 1, 3, 1, 1))
            self.scales.append(nn.Sequential(*layers))
        self.pool = nn.AvgPool3d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, x) -> list:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ParameterError(f"expected (N, 1, D, H, W), got {tuple(x.shape)}")
        maps = []
        for i, scale in enumerate(self.scales):
            if i > 0:
                x = self.pool(x)
            if min(x.shape[2:]) < 16:
                continue
            maps.append(scale(x))
        if not maps:
            raise ParameterError(
                f"input {tuple(x.shape)} too small for any discriminator scale"
            )
        return maps


class DisentangledSynthesizer(nn.Module):
    """The full two-domain model; submodule names are the checkpoint schema.

    ``e_c_*``: content encoders; ``e_s_*``: style encoders; ``g_*``:
    generators; ``disc_*``: discriminators; ``code_*``: domain codes.
    """

    def __init__(self, channel_scale: float = 1.0, style_dim: int = STYLE_DIM):
        super().__init__()
        self.channel_scale = channel_scale
        self.style_dim = style_dim
        self.e_c_s = ContentEncoder(channel_scale)
        self.e_c_t = ContentEncoder(channel_scale)
        self.e_s_s = StyleEncoder(style_dim)
        self.e_s_t = StyleEncoder(style_dim)
        self.g_s = Generator(channel_scale, style_dim)
        self.g_t = Generator(channel_scale, style_dim)
        self.disc_s = PatchDiscriminator(channel_scale)
        self.disc_t = PatchDiscriminator(channel_scale)
        self.code_s = DomainCode()
        self.code_t = DomainCode()

    def _pick(self, domain: Modality, source_attr, target_attr):
        if not isinstance(domain, Modality):
            raise ParameterError(f"unknown domain {domain!r}")
        return source_attr if domain is Modality.SOURCE else target_attr

    def encode_content(self, x: torch.Tensor, domain: Modality) -> torch.Tensor:
        return self._pick(domain, self.e_c_s, self.e_c_t)(x)

    def encode_style(self, domain: Modality) -> torch.Tensor:
        encoder = self._pick(domain, self.e_s_s, self.e_s_t)
        code = self._pick(domain, self.code_s, self.code_t)
        return encoder(code())

    def decode(self, content: torch.Tensor, style: torch.Tensor, domain: Modality) -> torch.Tensor:
        return self._pick(domain, self.g_s, self.g_t)(content, style)

    def discriminate(self, x: torch.Tensor, domain: Modality) -> list:
        return self._pick(domain, self.disc_s, self.disc_t)(x)

    def synthesize_s2t(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(
            self.encode_content(x, Modality.SOURCE),
            self.encode_style(Modality.TARGET),
            Modality.TARGET,
        )

    def synthesize_t2s(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(
            self.encode_content(x, Modality.TARGET),
            self.encode_style(Modality.SOURCE),
            Modality.SOURCE,
        )


class PlainSynthesizer(nn.Module):
    """Single-direction synthesizer without style disentanglement.

    The reduced training variants use one content encoder feeding one
    generator (no style modulation) plus a single target-domain
    discriminator.  Submodule names are the checkpoint schema.
    """

    def __init__(self, channel_scale: float = 1.0):
        super().__init__()
        self.channel_scale = channel_scale
        self.style_dim = None
        self.e_c_s = ContentEncoder(channel_scale)
        self.g_t = Generator(channel_scale, style_dim=None)
        self.disc_t = PatchDiscriminator(channel_scale)

    def synthesize_s2t(self, x: torch.Tensor) -> torch.Tensor:
        return self.g_t(self.e_c_s(x))

    def discriminate(self, x: torch.Tensor) -> list:
        return self.disc_t(x)


def build_synthesizer(
    channel_scale: float = 1.0, style_dim: int = STYLE_DIM, seed: int = 0
) -> DisentangledSynthesizer:
    """Construct with deterministic weight init derived from ``seed``."""
    torch.manual_seed(derive_seed(seed, "init"))
    return DisentangledSynthesizer(channel_scale, style_dim)


def build_plain_synthesizer(channel_scale: float = 1.0, seed: int = 0) -> PlainSynthesizer:
    """Construct the reduced model with the same seed derivation as the
    full one, so variant comparisons start from comparable inits."""
    torch.manual_seed(derive_seed(seed, "init"))
    return PlainSynthesizer(channel_scale)


def _volume_tensor(volume: Volume, modality: Modality) -> torch.Tensor:
    if volume.units is not Units.NORMALIZED:
        raise ValidationError("synthesis expects normalized volumes")
    if volume.modality is not modality:
        raise ValidationError(
            f"expected a {modality.value} volume, got {volume.modality.value}"
        )
    return torch.from_numpy(np.array(volume.voxels)).unsqueeze(0).unsqueeze(0)


def synthesize_s2t(model: DisentangledSynthesizer, volume: Volume) -> Volume:
    """Volume-level source-to-target translation (normalized in and out)."""
    x = _volume_tensor(volume, Modality.SOURCE)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.synthesize_s2t(x)
    if was_training:
        model.train()
    return Volume(out[0, 0].numpy(), volume.spacing, Units.NORMALIZED, Modality.TARGET)


def synthesize_t2s(model: DisentangledSynthesizer, volume: Volume) -> Volume:
    x = _volume_tensor(volume, Modality.TARGET)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.synthesize_t2s(x)
    if was_training:
        model.train()
    return Volume(out[0, 0].numpy(), volume.spacing, Units.NORMALIZED, Modality.SOURCE)


def touched_submodules(model: nn.Module, fn) -> set:
    """Run ``fn()`` with forward hooks on every submodule and report which
    direct children of ``model`` executed.  Used to prove the test-time
    path touches only the submodules it claims to."""
    touched = set()
    handles = []
    for name, module in model.named_modules():
        if not name:
            continue
        top = name.split(".", 1)[0]

        def hook(_module, _inputs, _output, top=top):
            touched.add(top)

        handles.append(module.register_forward_hook(hook))
    try:
        fn()
    finally:
        for handle in handles:
            handle.remove()
    return touched
