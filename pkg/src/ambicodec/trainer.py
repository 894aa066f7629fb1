"""Alternating discriminator / generator training, held-out validation, and the
transfer-vs-random initialization comparison."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from .audio_io import DatasetManifest, read_wav
from .discriminators import DiscriminatorSuite, DiscriminatorSuiteConfig, build_discriminator_suite
from .dsp import SpectrogramConfig, multiscale_configs
from .losses import (LossWeights, NonFiniteLossError, adversarial_and_feature_losses, composite_generator_loss,
                     covariance_loss, discriminator_loss, multiscale_mel_loss)
from .model.checkpoint import ModelCheckpoint, transfer_from_mono
from .model.generator import Generator, GeneratorConfig, build_generator

log = logging.getLogger(__name__)

CURVE_HEADER = ("step", "mel_val", "cov_val", "wall_time_s")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run. Serialized as flat ``key = value`` lines."""
    steps: int = 2000
    batch_size: int = 4
    excerpt_seconds: float = 0.5
    seed: int = 0
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    lr_decay: float = 0.999996
    grad_clip_generator: float = 1000.0
    grad_clip_discriminator: float = 10.0
    covariance_loss_start_step: int = 0
    validation_interval: int = 100
    validation_excerpts: int = 16
    # loss weights
    w_mel: float = 15.0
    w_feature_matching: float = 2.0
    w_adversarial: float = 1.0
    w_codebook: float = 1.0
    w_commitment: float = 0.25
    w_covariance: float = 1.0
    # mel loss windows (hop = window / 4, bands as in the reference scales);
    # windows longer than twice the excerpt are dropped
    mel_windows: tuple[int, ...] = (32, 64, 128, 256, 512, 1024, 2048)
    # generator
    io_channels: int = 16
    dims: tuple[int, ...] = (32, 64, 128)
    strides: tuple[int, ...] = (2, 4, 8)
    latent_dim: int = 64
    n_codebooks: int = 4
    codebook_size: int = 64
    kernel_size: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)
    sample_rate: int = 44100
    # discriminators
    mpd_periods: tuple[int, ...] = (2, 3, 5)
    msd_scales: tuple[int, ...] = (1, 2)
    mrsd_windows: tuple[int, ...] = (512, 1024)
    disc_hidden: int = 16
    disc_shared_weights: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.excerpt_seconds <= 0:
            raise ValueError("excerpt_seconds must be positive")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.weights  # validates non-negative weights
        self.generator_config

    # ------------------------------------------------------------ derived configs
    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_mel, self.w_feature_matching, self.w_adversarial,
                           self.w_codebook, self.w_commitment, self.w_covariance)

    @property
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.io_channels, self.dims, self.strides, self.latent_dim, self.n_codebooks,
                               self.codebook_size, self.kernel_size, self.dilations, self.sample_rate)

    @property
    def discriminator_config(self) -> DiscriminatorSuiteConfig:
        return DiscriminatorSuiteConfig(self.mpd_periods, self.msd_scales, self.mrsd_windows, self.io_channels,
                                        self.disc_hidden, self.disc_shared_weights, self.sample_rate)

    @property
    def excerpt_frames(self) -> int:
        return int(round(self.excerpt_seconds * self.sample_rate))

    @property
    def mel_scales(self) -> list[SpectrogramConfig]:
        keep = [(w, w // 4, m) for w, m in zip(self.mel_windows, _bands_for(self.mel_windows))
                if w // 2 < self.excerpt_frames]
        if not keep:
            raise ValueError("excerpt too short for every mel window")
        return multiscale_configs(self.sample_rate, keep)

    @property
    def adversarial(self) -> bool:
        return self.w_adversarial > 0 or self.w_feature_matching > 0

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    # ------------------------------------------------------------ text form
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            kind = kinds[key]
            try:
                if kind.startswith("tuple"):
                    values[key] = _ints(value)
                elif kind == "bool":
                    values[key] = _bool(value)
                elif kind == "int":
                    values[key] = int(value)
                elif kind == "float":
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as e:
                raise ValueError(f"line {lineno}: bad value for {key}: {e}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _bands_for(windows):
    # 5 bands at 32 samples, doubling with the window
    return [max(1, 5 * w // 32) for w in windows]


# ---------------------------------------------------------------- data

@dataclass
class TrainingData:
    """Training recordings (``[C, N]`` arrays) and a fixed held-out excerpt tensor ``[N, C, L]``."""
    train: list[np.ndarray]
    heldout: torch.Tensor
    sample_rate: int = 44100

    def __post_init__(self):
        if not self.train:
            raise ValueError("no training recordings")
        channels = {r.shape[0] for r in self.train}
        if len(channels) != 1 or (self.heldout.numel() and self.heldout.shape[1] not in channels):
            raise ValueError("recordings disagree on the channel count")

    @property
    def n_channels(self) -> int:
        return self.train[0].shape[0]

    @classmethod
    def from_arrays(cls, train: list[np.ndarray], heldout: list[np.ndarray], excerpt_frames: int,
                    max_heldout: int = 16, sample_rate: int = 44100, channels=None) -> "TrainingData":
        pick = (lambda a: a) if channels is None else (lambda a: a[list(channels)])
        train = [np.ascontiguousarray(pick(a), dtype=np.float32) for a in train]
        excerpts = []
        for rec in heldout:
            rec = pick(rec)
            for s in range(0, rec.shape[1] - excerpt_frames + 1, excerpt_frames):
                excerpts.append(rec[:, s:s + excerpt_frames])
        if len(excerpts) > max_heldout:
            # evenly spread, deterministic subset
            idx = np.linspace(0, len(excerpts) - 1, max_heldout).round().astype(int)
            excerpts = [excerpts[i] for i in idx]
        if not excerpts:
            raise ValueError("held-out set yields no excerpts")
        return cls(train, torch.as_tensor(np.stack(excerpts), dtype=torch.float32), sample_rate)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, excerpt_frames: int, root=None,
                      max_heldout: int = 16, channels=None) -> "TrainingData":
        root = Path(root or ".")

        def load(files):
            waves = [read_wav(f if Path(f).is_absolute() else root / f) for f in files]
            return waves

        train, held = load(manifest.files("train")), load(manifest.files("heldout"))
        rates = {w.sample_rate for w in train + held}
        if len(rates) != 1:
            raise ValueError(f"mixed sample rates in manifest: {sorted(rates)}")
        return cls.from_arrays([w.samples for w in train], [w.samples for w in held], excerpt_frames,
                               max_heldout, rates.pop(), channels)

    def mono(self) -> "TrainingData":
        """The omnidirectional (ACN 0) channel only."""
        return TrainingData([r[:1] for r in self.train], self.heldout[:, :1].contiguous(), self.sample_rate)


class BatchSampler:
    """Seed-determined random excerpts from the training recordings."""

    def __init__(self, data: TrainingData, batch_size: int, excerpt_frames: int, seed: int):
        usable = [i for i, r in enumerate(data.train) if r.shape[1] >= excerpt_frames]
        if not usable:
            raise ValueError("every training recording is shorter than one excerpt")
        self.data, self.usable = data, usable
        self.batch_size, self.length = batch_size, excerpt_frames
        self.rng = np.random.default_rng([seed, 0x5EED])

    def __call__(self) -> torch.Tensor:
        out = []
        for _ in range(self.batch_size):
            rec = self.data.train[self.usable[int(self.rng.integers(len(self.usable)))]]
            start = int(self.rng.integers(rec.shape[1] - self.length + 1))
            out.append(rec[:, start:start + self.length])
        return torch.from_numpy(np.stack(out))


# ---------------------------------------------------------------- steps

class ValidationRecord(NamedTuple):
    step: int
    mel_validation_loss: float
    covariance_validation_loss: float
    wall_time: float


def _reconstruct(generator, x):
    out = generator(x)
    return out if torch.is_tensor(out) else out.reconstruction


@torch.no_grad()
def validate(generator: Callable, heldout: torch.Tensor, scales: list[SpectrogramConfig],
             step: int = 0, wall_time: float = 0.0, chunk: int = 8) -> ValidationRecord:
    """Mean per-excerpt mel and covariance losses over ``heldout`` ``[N, C, L]``."""
    if heldout.shape[0] == 0:
        raise ValueError("empty held-out set")
    mel, cov = [], []
    for i in range(0, heldout.shape[0], chunk):
        x = heldout[i:i + chunk]
        y = _reconstruct(generator, x)
        mel.append(multiscale_mel_loss(x, y, scales, per_item=True))
        # per excerpt: the batch mean would mix excerpts
        cov.extend(covariance_loss(x[j], y[j]).reshape(1) for j in range(x.shape[0]))
    return ValidationRecord(step, float(torch.cat(mel).mean()), float(torch.cat(cov).mean()), wall_time)


@dataclass
class TrainState:
    generator: Generator
    discriminator: DiscriminatorSuite | None
    opt_g: torch.optim.Optimizer
    sched_g: torch.optim.lr_scheduler.LRScheduler
    opt_d: torch.optim.Optimizer | None = None
    sched_d: torch.optim.lr_scheduler.LRScheduler | None = None
    step: int = 0


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    grad_norm_generator: float
    grad_norm_discriminator: float | None = None


def make_state(config: TrainConfig, generator: Generator, discriminator: DiscriminatorSuite | None) -> TrainState:
    def adamw(params, lr):
        return torch.optim.AdamW(params, lr=lr, betas=(config.beta1, config.beta2),
                                 weight_decay=config.weight_decay)

    opt_g = adamw(generator.parameters(), config.lr_generator)
    state = TrainState(generator, discriminator, opt_g, torch.optim.lr_scheduler.ExponentialLR(opt_g, config.lr_decay))
    if discriminator is not None:
        state.opt_d = adamw(discriminator.parameters(), config.lr_discriminator)
        state.sched_d = torch.optim.lr_scheduler.ExponentialLR(state.opt_d, config.lr_decay)
    return state


def _grad_norm(params, clip: float) -> float:
    params = [p for p in params if p.grad is not None]
    if clip > 0:
        return float(torch.nn.utils.clip_grad_norm_(params, clip))
    return float(torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params])))


def _check(name: str, value: torch.Tensor, step: int) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v, step)


def train_step(state: TrainState, batch: torch.Tensor, config: TrainConfig,
               scales: list[SpectrogramConfig] | None = None) -> StepReport:
    """One discriminator update on (real, detached fake), then one generator update."""
    if not torch.isfinite(batch).all():
        raise FloatingPointError(f"non-finite training batch at step {state.step}")
    scales = scales if scales is not None else config.mel_scales
    weights, step = config.weights, state.step
    gen, disc = state.generator, state.discriminator
    out = gen(batch)
    y = out.reconstruction
    losses: dict[str, float] = {}
    use_gan = disc is not None and config.adversarial

    grad_d = None
    if use_gan:
        real = disc(batch)
        fake = disc(y.detach())
        loss_d = discriminator_loss(real, fake)
        _check("discriminator", loss_d, step)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        grad_d = _grad_norm(disc.parameters(), config.grad_clip_discriminator)
        state.opt_d.step()
        state.sched_d.step()
        losses["discriminator"] = float(loss_d.detach())

    terms = {"mel": multiscale_mel_loss(batch, y, scales),
             "codebook": out.codebook_loss, "commitment": out.commitment_loss}
    cov_active = weights.covariance > 0 and step >= config.covariance_loss_start_step and batch.shape[1] > 1
    if cov_active:
        terms["covariance"] = covariance_loss(batch, y)
    if use_gan:
        disc.requires_grad_(False)
        try:
            fake = disc(y)
            with torch.no_grad():
                real = disc(batch)
            adv_g, _, feat = adversarial_and_feature_losses(real, fake)
        finally:
            disc.requires_grad_(True)
        terms["adversarial"], terms["feature_matching"] = adv_g, feat
    total = composite_generator_loss(terms, weights, step)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    grad_g = _grad_norm(gen.parameters(), config.grad_clip_generator)
    if not math.isfinite(grad_g):
        raise NonFiniteLossError("generator gradient norm", grad_g, step)
    state.opt_g.step()
    state.sched_g.step()
    state.step += 1

    losses.update({k: float(v.detach()) for k, v in terms.items()})
    if not cov_active and batch.shape[1] > 1:
        with torch.no_grad():
            losses["covariance"] = float(covariance_loss(batch, y))
    losses["total"] = float(total.detach())
    return StepReport(step, losses, grad_g, grad_d)


# ---------------------------------------------------------------- runs

@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    curve: list[ValidationRecord]
    reports: list[StepReport] = field(default_factory=list, repr=False)


def write_curve(curve: list[ValidationRecord], path) -> None:
    Path(path).write_text(curve_text(curve))


def curve_text(curve: list[ValidationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in curve:
        w.writerow([r.step, repr(r.mel_validation_loss), repr(r.covariance_validation_loss), f"{r.wall_time:.3f}"])
    return buf.getvalue()


def read_curve(path) -> list[ValidationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise ValueError(f"{path}: missing curve header")
    return [ValidationRecord(int(s), float(m), float(c), float(t)) for s, m, c, t in rows[1:]]


def validation_steps(config: TrainConfig) -> list[int]:
    steps = list(range(0, config.steps + 1, config.validation_interval))
    if steps[-1] != config.steps:
        steps.append(config.steps)
    return steps


def initial_generator(config: TrainConfig, init: ModelCheckpoint | Generator | str | None = None) -> Generator:
    """``None`` or ``"random"``: seeded random init; a mono checkpoint: transfer;
    a matching checkpoint or generator: resume from it."""
    cfg = config.generator_config
    if init is None or init == "random":
        gen = build_generator(cfg, seed=config.seed)
    else:
        if isinstance(init, Generator):
            init = ModelCheckpoint.from_generator(init)
        if init.config.io_channels == 1 and cfg.io_channels != 1:
            init = transfer_from_mono(init, cfg.io_channels, target_config=cfg)
        if init.config != cfg:
            raise ValueError(f"checkpoint config {init.config} does not match the training config {cfg}")
        gen = Generator(cfg)
        gen.load_state_dict(init.tensors)
    return gen.to(config.torch_dtype)


def run_training(config: TrainConfig, data: TrainingData, init: ModelCheckpoint | Generator | str | None = None,
                 out_dir=None, on_record: Callable[[ValidationRecord], None] | None = None) -> TrainResult:
    """Train from ``init`` for ``config.steps`` steps, validating every ``validation_interval``.

    Writes ``generator.ambc`` and ``curve.csv`` to ``out_dir`` when given.
    """
    if data.n_channels != config.io_channels:
        raise ValueError(f"data has {data.n_channels} channels, config expects {config.io_channels}")
    if data.sample_rate != config.sample_rate:
        raise ValueError(f"data sample rate {data.sample_rate} != config {config.sample_rate}")
    torch.set_num_threads(1)
    dtype = config.torch_dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = initial_generator(config, init)
        disc = None
        if config.adversarial and config.steps > 0:
            disc = build_discriminator_suite(config.discriminator_config, seed=config.seed + 1).to(dtype)
        state = make_state(config, gen, disc)
        sampler = BatchSampler(data, config.batch_size, config.excerpt_frames, config.seed)
        scales = config.mel_scales
        heldout = data.heldout.to(dtype)
        checkpoints = set(validation_steps(config))
        curve, reports = [], []
        t0 = time.perf_counter()

        def record():
            rec = validate(gen, heldout, scales, state.step, time.perf_counter() - t0)
            curve.append(rec)
            log.info("step %d  mel_val %.4f  cov_val %.4f", rec.step, rec.mel_validation_loss,
                     rec.covariance_validation_loss)
            if on_record:
                on_record(rec)

        record()
        while state.step < config.steps:
            reports.append(train_step(state, sampler().to(dtype), config, scales))
            if state.step in checkpoints:
                record()

    ckpt = ModelCheckpoint.from_generator(gen, config.to_text())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "generator.ambc")
        write_curve(curve, out / "curve.csv")
    return TrainResult(ckpt, curve, reports)


@dataclass
class InitComparison:
    transfer: TrainResult
    random: TrainResult

    @property
    def curves(self) -> dict[str, list[ValidationRecord]]:
        return {"transfer": self.transfer.curve, "random": self.random.curve}


def compare_inits(config: TrainConfig, data: TrainingData, mono: ModelCheckpoint, out_dir=None) -> InitComparison:
    """Two runs that differ only in the generator initialization."""
    sub = (lambda name: Path(out_dir) / name) if out_dir is not None else (lambda name: None)
    transfer = run_training(config, data, mono, sub("transfer"))
    random = run_training(config, data, "random", sub("random"))
    return InitComparison(transfer, random)


def pretrain_mono(config: TrainConfig, data: TrainingData, out_dir=None) -> TrainResult:
    """Single-channel model on the W channel of ``data``; the source of transfer inits."""
    mono_cfg = config.replace(io_channels=1)
    return run_training(mono_cfg, data.mono() if data.n_channels > 1 else data, "random", out_dir)
