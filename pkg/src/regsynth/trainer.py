"""Training loop wiring registration and synthesis into one objective.

One optimization step runs two updates: the discriminators see detached
fakes first, then the encoders, generators, and the registration network
take a joint step on the full objective.  Both alignment branches (warp
the synthesis vs. synthesize the warped input) consume the single field
predicted for the batch, so their gradients shape the registration
network as well as the synthesizer.

Ablation variants:

* ``BOTH+ACDS``: full two-domain disentangled model, both alignment
  branches, anatomy-consistency term active.
* ``BOTH`` / ``BEF`` / ``AFT``: single encoder-decoder path without style
  modulation; ``BEF`` keeps only the warp-after-synthesis branch, ``AFT``
  only the synthesize-after-warp branch.
* baseline (its own entry point): same backbone trained with a paired L1
  against the misaligned target plus the adversarial term; no
  registration.  Its paired L1 is logged in the ``align`` column.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import NonFiniteLossError, ParameterError
from .losses import (
    ADV_FORMS,
    LossReport,
    LossWeights,
    adversarial_loss,
    alignment_loss,
    anatomy_consistency_loss,
    cycle_consistency_loss,
    mean_l1,
    self_reconstruction_loss,
    total_loss,
)
from .phantom import load_dataset
from .registration import RegNet, smoothness_loss, warp
from .seeding import derive_seed, substream
from .synthesis import (
    DisentangledSynthesizer,
    Modality,
    PlainSynthesizer,
    build_plain_synthesizer,
    build_synthesizer,
)
from .volumes import Units, Volume, denormalize_intensity, normalize_intensity

VARIANTS = ("BEF", "AFT", "BOTH", "BOTH+ACDS")
BASELINE = "BASELINE"

CONFIG_KEYS = (
    "data_dir",
    "patch",
    "batch",
    "epochs",
    "lr",
    "poly_power",
    "lambda_anatomy",
    "lambda_smooth",
    "lambda_align",
    "channel_scale",
    "seed",
    "variant",
    "adv_form",
    "hu_lo",
    "hu_hi",
)

LOSS_CSV_HEADER = "iter,adv,self,cycle,anatomy,smooth,align,total,d_loss"
CHECKPOINT_FORMAT = "regsynth.ckpt.v1"
_MIN_PATCH_COVERAGE = 0.30
_PATCH_TRIES = 50
_VAL_EVERY_EPOCHS = 5


@dataclass(frozen=True)
class TrainConfig:
    data_dir: str
    patch: int = 32
    batch: int = 2
    epochs: int = 30
    lr: float = 2e-4
    poly_power: float = 0.9
    lambda_anatomy: float = 0.5
    lambda_smooth: float = 10.0
    lambda_align: float = 20.0
    channel_scale: float = 1.0
    seed: int = 0
    variant: str = "BOTH+ACDS"
    adv_form: str = "lsgan"
    hu_lo: float = -1000.0
    hu_hi: float = 1000.0

    def __post_init__(self):
        if not self.data_dir:
            raise ParameterError("data_dir must be set")
        if self.patch < 16 or self.patch % 16:
            raise ParameterError(f"patch must be a positive multiple of 16, got {self.patch}")
        if self.batch < 1:
            raise ParameterError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.poly_power <= 0:
            raise ParameterError(f"poly_power must be positive, got {self.poly_power}")
        for name in ("lambda_anatomy", "lambda_smooth", "lambda_align"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.channel_scale <= 0:
            raise ParameterError(f"channel_scale must be positive, got {self.channel_scale}")
        if self.variant not in VARIANTS:
            raise ParameterError(
                f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}"
            )
        if self.adv_form not in ADV_FORMS:
            raise ParameterError(
                f"adv_form must be one of {', '.join(ADV_FORMS)}, got {self.adv_form!r}"
            )
        if not self.hu_lo < self.hu_hi:
            raise ParameterError(f"need hu_lo < hu_hi, got {self.hu_lo}, {self.hu_hi}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_anatomy, self.lambda_smooth, self.lambda_align)

    @property
    def hu_window(self) -> tuple:
        return (self.hu_lo, self.hu_hi)

    def canonical_text(self) -> str:
        """The exact key=value form written to ``config.snapshot``."""
        lines = []
        for key in CONFIG_KEYS:
            value = getattr(self, key)
            lines.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


_INT_KEYS = {"patch", "batch", "epochs", "seed"}
_STR_KEYS = {"data_dir", "variant", "adv_form"}


def parse_config(path) -> TrainConfig:
    """Read a plain-text key=value config; every key must appear exactly once."""
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, text = line.partition("=")
        key, text = key.strip(), text.strip()
        if key not in CONFIG_KEYS:
            raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ParameterError(f"{path}:{lineno}: duplicate config key {key!r}")
        if key in _STR_KEYS:
            values[key] = text.strip("'\"")
        elif key in _INT_KEYS:
            try:
                values[key] = int(text)
            except ValueError:
                raise ParameterError(f"{path}:{lineno}: {key} must be an integer, got {text!r}")
        else:
            try:
                values[key] = float(text)
            except ValueError:
                raise ParameterError(f"{path}:{lineno}: {key} must be a number, got {text!r}")
    missing = [k for k in CONFIG_KEYS if k not in values]
    if missing:
        raise ParameterError(f"{path}: missing config keys: {', '.join(missing)}")
    return TrainConfig(**values)


def run_directory(config_path) -> Path:
    """Run outputs live next to the config, in ``<stem>_run/``."""
    config_path = Path(config_path)
    return config_path.parent / f"{config_path.stem}_run"


def lr_schedule(iteration: int, max_iterations: int, cfg: TrainConfig) -> float:
    """Polynomial decay from the base rate down to zero."""
    if not 0 <= iteration <= max_iterations:
        raise ParameterError(
            f"iteration {iteration} outside [0, {max_iterations}]"
        )
    return cfg.lr * (1.0 - iteration / max_iterations) ** cfg.poly_power


@dataclass
class _Case:
    """One training pair, normalized once and kept as tensors."""

    case_id: str
    source: torch.Tensor
    target_mis: torch.Tensor
    mask: np.ndarray
    source_vol: Volume
    target_aligned: Volume
    mask_obj: object


def _load_cases(directory, cfg: TrainConfig) -> list:
    pairs = load_dataset(directory)
    cases = []
    for pair in pairs:
        src = normalize_intensity(pair.source, *cfg.hu_window)
        tgt = normalize_intensity(pair.target_misaligned, *cfg.hu_window)
        cases.append(
            _Case(
                case_id=pair.case_id,
                source=torch.from_numpy(np.array(src.voxels))[None, None],
                target_mis=torch.from_numpy(np.array(tgt.voxels))[None, None],
                mask=pair.mask.voxels.astype(bool),
                source_vol=pair.source,
                target_aligned=pair.target_aligned,
                mask_obj=pair.mask,
            )
        )
    return cases


def _sample_patch_origin(rng, mask: np.ndarray, patch: int) -> tuple:
    """Random origin whose patch covers enough body; falls back to center."""
    dims = mask.shape
    if any(patch > d for d in dims):
        raise ParameterError(f"patch {patch} exceeds volume dims {dims}")
    spans = [d - patch for d in dims]
    for _ in range(_PATCH_TRIES):
        origin = tuple(int(rng.integers(0, s + 1)) for s in spans)
        window = mask[
            origin[0] : origin[0] + patch,
            origin[1] : origin[1] + patch,
            origin[2] : origin[2] + patch,
        ]
        if window.mean() >= _MIN_PATCH_COVERAGE:
            return origin
    return tuple(s // 2 for s in spans)


def _make_batch(rng, cases: list, cfg: TrainConfig) -> tuple:
    i_s, i_t = [], []
    for _ in range(cfg.batch):
        case = cases[int(rng.integers(0, len(cases)))]
        z, y, x = _sample_patch_origin(rng, case.mask, cfg.patch)
        sel = (slice(None), slice(None), slice(z, z + cfg.patch),
               slice(y, y + cfg.patch), slice(x, x + cfg.patch))
        i_s.append(case.source[sel])
        i_t.append(case.target_mis[sel])
    return torch.cat(i_s), torch.cat(i_t)


@dataclass
class TrainerState:
    """Everything train_step mutates: models, optimizers, counters."""

    model: torch.nn.Module
    regnet: RegNet | None
    opt_d: torch.optim.Optimizer
    opt_g: torch.optim.Optimizer
    iteration: int
    max_iterations: int
    objective: str  # "acds", "plain", or "baseline"


def _build_state(cfg: TrainConfig, n_cases: int, objective: str) -> TrainerState:
    if objective == "acds":
        model = build_synthesizer(cfg.channel_scale, seed=cfg.seed)
        d_params = list(model.disc_s.parameters()) + list(model.disc_t.parameters())
    else:
        model = build_plain_synthesizer(cfg.channel_scale, seed=cfg.seed)
        d_params = list(model.disc_t.parameters())
    d_ids = {id(p) for p in d_params}
    g_params = [p for p in model.parameters() if id(p) not in d_ids]
    if objective == "baseline":
        regnet = None
    else:
        torch.manual_seed(derive_seed(cfg.seed, "regnet"))
        regnet = RegNet(channel_scale=cfg.channel_scale)
        g_params += list(regnet.parameters())
    steps_per_epoch = math.ceil(n_cases / cfg.batch)
    betas = (0.5, 0.999)
    return TrainerState(
        model=model,
        regnet=regnet,
        opt_d=torch.optim.Adam(d_params, lr=cfg.lr, betas=betas),
        opt_g=torch.optim.Adam(g_params, lr=cfg.lr, betas=betas),
        iteration=0,
        max_iterations=cfg.epochs * steps_per_epoch,
        objective=objective,
    )


def _acds_step(i_s, i_t, state: TrainerState, cfg: TrainConfig) -> LossReport:
    model: DisentangledSynthesizer = state.model
    with torch.no_grad():
        fake_t = model.synthesize_s2t(i_s)
        fake_s = model.synthesize_t2s(i_t)
    d_loss = adversarial_loss(
        [model.discriminate(i_s, Modality.SOURCE), model.discriminate(i_t, Modality.TARGET)],
        [model.discriminate(fake_s, Modality.SOURCE), model.discriminate(fake_t, Modality.TARGET)],
        "discriminator",
        cfg.adv_form,
    )
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    # joint update; one field serves both alignment branches
    field = state.regnet(i_s, i_t)
    c_s = model.encode_content(i_s, Modality.SOURCE)
    c_t = model.encode_content(i_t, Modality.TARGET)
    s_s = model.encode_style(Modality.SOURCE)
    s_t = model.encode_style(Modality.TARGET)
    o_t = model.decode(c_s, s_t, Modality.TARGET)
    o_s = model.decode(c_t, s_s, Modality.SOURCE)
    warped_synth = warp(o_t, field)
    synth_of_warped = model.decode(
        model.encode_content(warp(i_s, field), Modality.SOURCE), s_t, Modality.TARGET
    )
    adv = adversarial_loss(
        None,
        [model.discriminate(o_s, Modality.SOURCE), model.discriminate(o_t, Modality.TARGET)],
        "generator",
        cfg.adv_form,
    )
    report = total_loss(
        adv=adv,
        self_recon=self_reconstruction_loss(i_s, i_t, model, c_s, c_t),
        cycle=cycle_consistency_loss(i_s, i_t, o_s, o_t, model),
        anatomy=anatomy_consistency_loss(i_s, i_t, o_s, o_t, model, c_s, c_t),
        smooth=smoothness_loss(field),
        align=alignment_loss(warped_synth, synth_of_warped, i_t),
        weights=cfg.weights,
        d_loss=d_loss,
    )
    state.opt_g.zero_grad()
    report.total.backward()
    state.opt_g.step()
    return report


def _plain_step(i_s, i_t, state: TrainerState, cfg: TrainConfig) -> LossReport:
    model: PlainSynthesizer = state.model
    with torch.no_grad():
        fake_t = model.synthesize_s2t(i_s)
    d_loss = adversarial_loss(
        [model.discriminate(i_t)], [model.discriminate(fake_t)], "discriminator", cfg.adv_form
    )
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    o_t = model.synthesize_s2t(i_s)
    adv = adversarial_loss(None, [model.discriminate(o_t)], "generator", cfg.adv_form)
    field = state.regnet(i_s, i_t)
    align = o_t.new_zeros(())
    if cfg.variant != "AFT":  # warp-after-synthesis branch
        align = align + mean_l1(warp(o_t, field), i_t)
    if cfg.variant != "BEF":  # synthesize-after-warp branch
        align = align + mean_l1(model.synthesize_s2t(warp(i_s, field)), i_t)
    smooth = smoothness_loss(field)
    total = adv + cfg.lambda_smooth * smooth + cfg.lambda_align * align
    report = LossReport(adv, 0.0, 0.0, 0.0, smooth, align, total, d_loss)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()
    return report


def _baseline_step(i_s, i_t, state: TrainerState, cfg: TrainConfig) -> LossReport:
    model: PlainSynthesizer = state.model
    with torch.no_grad():
        fake_t = model.synthesize_s2t(i_s)
    d_loss = adversarial_loss(
        [model.discriminate(i_t)], [model.discriminate(fake_t)], "discriminator", cfg.adv_form
    )
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    o_t = model.synthesize_s2t(i_s)
    adv = adversarial_loss(None, [model.discriminate(o_t)], "generator", cfg.adv_form)
    paired = mean_l1(o_t, i_t)
    total = adv + cfg.lambda_align * paired
    report = LossReport(adv, 0.0, 0.0, 0.0, 0.0, paired, total, d_loss)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()
    return report


def train_step(batch: tuple, state: TrainerState, cfg: TrainConfig) -> tuple:
    """One optimization step; returns the (mutated) state and a detached report."""
    i_s, i_t = batch
    lr = lr_schedule(state.iteration, state.max_iterations, cfg)
    for opt in (state.opt_d, state.opt_g):
        for group in opt.param_groups:
            group["lr"] = lr
    step = {"acds": _acds_step, "plain": _plain_step, "baseline": _baseline_step}[
        state.objective
    ]
    report = step(i_s, i_t, state, cfg)
    detached = report.detached()
    if not detached.is_finite():
        raise NonFiniteLossError(
            f"non-finite loss at iteration {state.iteration}: {detached}"
        )
    state.iteration += 1
    return state, detached


def _synthesize_normalized(model, x: torch.Tensor) -> torch.Tensor:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.synthesize_s2t(x)
    if was_training:
        model.train()
    return out


def _validation_mae(model, val_cases: list, cfg: TrainConfig) -> float:
    from .metrics import mae_masked

    total = 0.0
    for case in val_cases:
        pred = _synthesize_normalized(model, case.source)[0, 0].numpy()
        pred_vol = denormalize_intensity(
            Volume(pred, case.target_aligned.spacing, Units.NORMALIZED, Modality.TARGET),
            *cfg.hu_window,
        )
        total += mae_masked(pred_vol, case.target_aligned, case.mask_obj)
    return total / len(val_cases)


def _csv_row(iteration: int, report: LossReport) -> str:
    values = [
        report.adv, report.self_recon, report.cycle, report.anatomy,
        report.smooth, report.align, report.total, report.d_loss,
    ]
    return ",".join([str(iteration)] + [repr(float(v)) for v in values])


def _run_training(cfg: TrainConfig, run_dir, objective: str) -> Path:
    torch.set_num_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data_root = Path(cfg.data_dir)
    train_dir = data_root / "train"
    if not (train_dir / "manifest.json").is_file():
        train_dir = data_root  # flat dataset layout
    cases = _load_cases(train_dir, cfg)
    val_dir = data_root / "val"
    val_cases = _load_cases(val_dir, cfg) if (val_dir / "manifest.json").is_file() else []

    rng = substream(cfg.seed, "data")
    torch.manual_seed(derive_seed(cfg.seed, "train"))
    state = _build_state(cfg, len(cases), objective)
    steps_per_epoch = math.ceil(len(cases) / cfg.batch)

    (run_dir / "config.snapshot").write_text(cfg.canonical_text())
    val_rows = []
    val_mae = None
    with open(run_dir / "losses.csv", "w") as loss_file:
        loss_file.write(LOSS_CSV_HEADER + "\n")
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                batch = _make_batch(rng, cases, cfg)
                iteration = state.iteration
                state, report = train_step(batch, state, cfg)
                loss_file.write(_csv_row(iteration, report) + "\n")
            if val_cases and (
                (epoch + 1) % _VAL_EVERY_EPOCHS == 0 or epoch + 1 == cfg.epochs
            ):
                val_mae = _validation_mae(state.model, val_cases, cfg)
                val_rows.append(f"{epoch + 1},{val_mae!r}")
    if val_rows:
        (run_dir / "val_mae.csv").write_text("epoch,mae\n" + "\n".join(val_rows) + "\n")

    ckpt_path = run_dir / "ckpt_final.bin"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "variant": BASELINE if objective == "baseline" else cfg.variant,
        "channel_scale": cfg.channel_scale,
        "style_dim": getattr(state.model, "style_dim", None),
        "hu_lo": cfg.hu_lo,
        "hu_hi": cfg.hu_hi,
        "seed": cfg.seed,
        "iterations": state.iteration,
        "val_mae": val_mae,
        "config_text": cfg.canonical_text(),
        "config_hash": cfg.config_hash(),
        "model": state.model.state_dict(),
        "regnet": state.regnet.state_dict() if state.regnet is not None else None,
    }
    torch.save(payload, ckpt_path)
    return ckpt_path


def train(cfg: TrainConfig, run_dir) -> Path:
    """Train the configured variant; returns the final checkpoint path."""
    return _run_training(cfg, run_dir, "acds" if cfg.variant == "BOTH+ACDS" else "plain")


def train_baseline(cfg: TrainConfig, run_dir) -> Path:
    """Paired L1 + adversarial reference run on the same backbone."""
    return _run_training(cfg, run_dir, "baseline")


@dataclass
class Checkpoint:
    """A loaded final checkpoint: the synthesizer plus the settings needed
    to run inference (the registration network is not restored; it is not
    part of the inference path)."""

    variant: str
    channel_scale: float
    style_dim: int | None
    hu_window: tuple
    seed: int
    iterations: int
    val_mae: float | None
    config_text: str
    config_hash: str
    model: torch.nn.Module


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ParameterError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    variant = payload["variant"]
    if variant == "BOTH+ACDS":
        model = DisentangledSynthesizer(payload["channel_scale"], payload["style_dim"])
    elif variant in VARIANTS or variant == BASELINE:
        model = PlainSynthesizer(payload["channel_scale"])
    else:
        raise ParameterError(f"unknown checkpoint variant {variant!r}")
    model.load_state_dict(payload["model"])
    model.eval()
    return Checkpoint(
        variant=variant,
        channel_scale=payload["channel_scale"],
        style_dim=payload["style_dim"],
        hu_window=(payload["hu_lo"], payload["hu_hi"]),
        seed=payload["seed"],
        iterations=payload["iterations"],
        val_mae=payload["val_mae"],
        config_text=payload["config_text"],
        config_hash=payload["config_hash"],
        model=model,
    )


def load_regnet(path) -> RegNet:
    """Restore the trained registration network from a checkpoint.

    Inference never needs it; evaluation of the recovered deformation does.
    """
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload["regnet"] is None:
        raise ParameterError(f"{path} was trained without a registration network")
    regnet = RegNet(channel_scale=payload["channel_scale"])
    regnet.load_state_dict(payload["regnet"])
    regnet.eval()
    return regnet


@dataclass(frozen=True)
class InferResult:
    """Synthesized volume plus how the input was padded to reach a legal
    grid (all zeros when no padding was needed)."""

    volume: Volume
    padding: tuple  # ((lo, hi) per axis), voxels added before synthesis


def infer(checkpoint: Checkpoint, volume: Volume) -> InferResult:
    """Translate a source volume to target appearance in HU.

    HU inputs are normalized with the checkpoint's stored window;
    already-normalized inputs pass through.  Dims that are not multiples
    of 8 are reflect-padded, synthesized, and cropped back.
    """
    if volume.modality is not Modality.SOURCE:
        raise ParameterError(f"inference expects a source volume, got {volume.modality.value}")
    if volume.units is Units.HU:
        volume = normalize_intensity(volume, *checkpoint.hu_window)
    voxels = np.array(volume.voxels)
    padding = tuple((0, (8 - d % 8) % 8) for d in voxels.shape)
    if any(hi for _, hi in padding):
        voxels = np.pad(voxels, padding, mode="reflect")
    x = torch.from_numpy(voxels)[None, None]
    out = _synthesize_normalized(checkpoint.model, x)[0, 0].numpy()
    d, h, w = volume.dims
    out = out[:d, :h, :w]
    hu = denormalize_intensity(
        Volume(out, volume.spacing, Units.NORMALIZED, Modality.TARGET),
        *checkpoint.hu_window,
    )
    return InferResult(volume=hu, padding=padding)
