"""Training objectives.

The generator-side objective combines six terms:

* ``adv``: GAN realness on synthesized volumes (least-squares by default,
  non-saturating logistic behind a flag)
* ``self_recon``: each domain decoded from its own content and style must
  reproduce the input
* ``cycle``: translating, re-encoding content, and decoding back must
  reproduce the input
* ``anatomy``: content re-encoded from a translation must match the content
  of the image it was translated from
* ``smooth``: squared-gradient energy of the predicted displacement field
* ``align``: both orders of (synthesize, warp) must match the misaligned
  ground truth; the warp uses one shared predicted field

``total = adv + self_recon + cycle + w.anatomy * anatomy +
w.smooth * smooth + w.align * align``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError
from .synthesis import DisentangledSynthesizer
from .volumes import Modality

ADV_FORMS = ("lsgan", "logistic")
_LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class LossWeights:
    anatomy: float = 0.5
    smooth: float = 10.0
    align: float = 20.0


@dataclass
class LossReport:
    """One step's loss components; tensors during training, floats after
    ``detached()``.  ``d_loss`` is the discriminator-side objective and is
    not part of ``total``."""

    adv: object
    self_recon: object
    cycle: object
    anatomy: object
    smooth: object
    align: object
    total: object
    d_loss: object = 0.0

    def detached(self) -> "LossReport":
        def scalar(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return LossReport(*(scalar(getattr(self, f)) for f in (
            "adv", "self_recon", "cycle", "anatomy", "smooth", "align", "total", "d_loss"
        )))

    def is_finite(self) -> bool:
        values = self.detached()
        import math

        return all(
            math.isfinite(getattr(values, f))
            for f in ("adv", "self_recon", "cycle", "anatomy", "smooth", "align", "total", "d_loss")
        )


def mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def alignment_loss(
    warped_synthesis: torch.Tensor,
    synthesis_of_warped: torch.Tensor,
    target: torch.Tensor,
) -> torch.Tensor:
    """L1 of both consistency orders against the misaligned target."""
    return mean_l1(warped_synthesis, target) + mean_l1(synthesis_of_warped, target)


def self_reconstruction_loss(
    i_s: torch.Tensor,
    i_t: torch.Tensor,
    model: DisentangledSynthesizer,
    content_s: torch.Tensor | None = None,
    content_t: torch.Tensor | None = None,
) -> torch.Tensor:
    """Decode each domain from its own content and style back to itself.

    Precomputed content latents may be passed to avoid re-encoding; they
    must equal ``encode_content`` of the respective input.
    """
    if content_s is None:
        content_s = model.encode_content(i_s, Modality.SOURCE)
    if content_t is None:
        content_t = model.encode_content(i_t, Modality.TARGET)
    rec_s = model.decode(content_s, model.encode_style(Modality.SOURCE), Modality.SOURCE)
    rec_t = model.decode(content_t, model.encode_style(Modality.TARGET), Modality.TARGET)
    return mean_l1(rec_s, i_s) + mean_l1(rec_t, i_t)


def cycle_consistency_loss(
    i_s: torch.Tensor,
    i_t: torch.Tensor,
    o_s: torch.Tensor,
    o_t: torch.Tensor,
    model: DisentangledSynthesizer,
    recoded_t: torch.Tensor | None = None,
    recoded_s: torch.Tensor | None = None,
) -> torch.Tensor:
    """Translate, re-encode content, decode back, compare with the input.

    ``o_t`` is the translation of ``i_s`` into the target domain, ``o_s``
    the translation of ``i_t`` into the source domain.  ``recoded_t`` /
    ``recoded_s`` are optional cached ``encode_content(o_t, TARGET)`` /
    ``encode_content(o_s, SOURCE)``.
    """
    if recoded_t is None:
        recoded_t = model.encode_content(o_t, Modality.TARGET)
    if recoded_s is None:
        recoded_s = model.encode_content(o_s, Modality.SOURCE)
    back_s = model.decode(recoded_t, model.encode_style(Modality.SOURCE), Modality.SOURCE)
    back_t = model.decode(recoded_s, model.encode_style(Modality.TARGET), Modality.TARGET)
    return mean_l1(back_s, i_s) + mean_l1(back_t, i_t)


def anatomy_consistency_loss(
    i_s: torch.Tensor,
    i_t: torch.Tensor,
    o_s: torch.Tensor,
    o_t: torch.Tensor,
    model: DisentangledSynthesizer,
    content_s: torch.Tensor | None = None,
    content_t: torch.Tensor | None = None,
    recoded_t: torch.Tensor | None = None,
    recoded_s: torch.Tensor | None = None,
) -> torch.Tensor:
    """Content latents must survive translation: re-encoding a translation
    must land on the content of the image it came from."""
    if content_s is None:
        content_s = model.encode_content(i_s, Modality.SOURCE)
    if content_t is None:
        content_t = model.encode_content(i_t, Modality.TARGET)
    if recoded_t is None:
        recoded_t = model.encode_content(o_t, Modality.TARGET)
    if recoded_s is None:
        recoded_s = model.encode_content(o_s, Modality.SOURCE)
    return mean_l1(recoded_t, content_s) + mean_l1(recoded_s, content_t)


def _scale_mean(maps, fn):
    per_scale = [fn(m) for m in maps]
    return sum(per_scale) / len(per_scale)


def adversarial_loss(real_maps, fake_maps, role: str, form: str = "lsgan"):
    """GAN objective over per-domain lists of multi-scale realness maps.

    ``fake_maps`` (and for the discriminator role ``real_maps``) is a
    sequence with one entry per domain; each entry is the list of per-scale
    maps returned by ``discriminate``.  Scales are averaged, domains are
    summed.  For the discriminator role the fakes must have been detached
    before discrimination; for the generator role ``real_maps`` is unused
    and should be ``None``.
    """
    if form not in ADV_FORMS:
        raise ParameterError(f"adv form must be one of {ADV_FORMS}, got {form!r}")
    if role not in ("discriminator", "generator"):
        raise ParameterError(f"role must be discriminator or generator, got {role!r}")

    def clamp(m):
        return m.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)

    total = None
    if role == "discriminator":
        if real_maps is None or len(real_maps) != len(fake_maps):
            raise ParameterError("discriminator role needs matching real and fake maps")
        for reals, fakes in zip(real_maps, fake_maps):
            if form == "lsgan":
                term = _scale_mean(reals, lambda m: ((m - 1) ** 2).mean()) + _scale_mean(
                    fakes, lambda m: (m**2).mean()
                )
            else:
                term = _scale_mean(reals, lambda m: F.softplus(-clamp(m)).mean()) + _scale_mean(
                    fakes, lambda m: F.softplus(clamp(m)).mean()
                )
            total = term if total is None else total + term
    else:
        for fakes in fake_maps:
            if form == "lsgan":
                term = _scale_mean(fakes, lambda m: ((m - 1) ** 2).mean())
            else:
                term = _scale_mean(fakes, lambda m: F.softplus(-clamp(m)).mean())
            total = term if total is None else total + term
    if total is None:
        raise ParameterError("no maps given")
    return total


def total_loss(
    adv,
    self_recon,
    cycle,
    anatomy,
    smooth,
    align,
    weights: LossWeights = LossWeights(),
    d_loss=0.0,
) -> LossReport:
    total = (
        adv
        + self_recon
        + cycle
        + weights.anatomy * anatomy
        + weights.smooth * smooth
        + weights.align * align
    )
    return LossReport(adv, self_recon, cycle, anatomy, smooth, align, total, d_loss)
