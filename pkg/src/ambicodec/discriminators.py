"""Multichannel multi-period, multi-scale and multi-resolution spectrogram discriminators.

Every sub-discriminator scores each audio channel on its own and keeps the
channel axis in its outputs: logits come back as ``[B, C, ...]`` and the
adversarial losses average over it. By default one set of weights is
shared across channels (channels are folded into the batch); with
``shared_weights=False`` each channel gets its own copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .dsp import SpectrogramConfig, stft_magnitude
from .model.conv import Conv1d

LRELU_SLOPE = 0.1
INIT_STD = 0.02


@dataclass(frozen=True)
class DiscriminatorSuiteConfig:
    mpd_periods: tuple[int, ...] = (2, 3, 5)
    msd_scales: tuple[int, ...] = (1, 2)
    mrsd_windows: tuple[int, ...] = (512, 1024)
    io_channels: int = 16
    hidden: int = 16
    shared_weights: bool = True
    sample_rate: int = 44100

    def __post_init__(self):
        if len(set(self.mpd_periods)) != len(self.mpd_periods) or any(p < 2 for p in self.mpd_periods):
            raise ValueError("periods must be distinct and >= 2")
        if any(s < 1 or s & (s - 1) for s in self.msd_scales):
            raise ValueError("scales must be powers of two")
        for w in self.mrsd_windows:
            SpectrogramConfig(w, w // 4, 1, sample_rate=self.sample_rate)
        if self.io_channels < 1 or self.hidden < 1:
            raise ValueError("io_channels and hidden must be >= 1")

    @property
    def mrsd_resolutions(self) -> list[SpectrogramConfig]:
        return [SpectrogramConfig(w, w // 4, 1, sample_rate=self.sample_rate) for w in self.mrsd_windows]


class _ConvStack(nn.Module):
    """Leaky-ReLU conv stack; returns (logits, feature maps)."""

    def __init__(self, layers: list[Conv1d], post: Conv1d):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.post = post

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x, feats

    def output_length(self, length: int) -> int:
        for conv in list(self.layers) + [self.post]:
            length = conv.output_length(length)
        return length


def _waveform_stack(h: int, in_channels: int = 1) -> _ConvStack:
    return _ConvStack([Conv1d(in_channels, h, 5, stride=3, padding=2),
                       Conv1d(h, 2 * h, 5, stride=3, padding=2),
                       Conv1d(2 * h, 2 * h, 5, padding=2)],
                      Conv1d(2 * h, 1, 3, padding=1))


class PeriodDiscriminator(nn.Module):
    """Scores a signal folded into ``period`` interleaved phases."""

    def __init__(self, period: int, hidden: int):
        super().__init__()
        self.period = period
        self.net = _waveform_stack(hidden)

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        """``[N, L] -> [N * p, L // p]``; trailing samples beyond a multiple of p are dropped."""
        n, length = x.shape
        t = length // self.period
        if t < 1:
            raise ValueError(f"signal shorter than period {self.period}")
        return x[:, :t * self.period].reshape(n, t, self.period).transpose(1, 2).reshape(n * self.period, t)

    def unfold(self, folded: torch.Tensor, n: int) -> torch.Tensor:
        t = folded.shape[-1]
        return folded.reshape(n, self.period, t).transpose(1, 2).reshape(n, t * self.period)

    def forward(self, x):
        # x: [N, L] mono signals
        n = x.shape[0]
        logits, feats = self.net(self.fold(x).unsqueeze(1))
        regroup = lambda t: t.reshape(n, self.period, *t.shape[1:])  # noqa: E731
        return regroup(logits), [regroup(f) for f in feats]

    def logit_shape(self, length: int) -> tuple[int, ...]:
        return (self.period, 1, self.net.output_length(length // self.period))


class ScaleDiscriminator(nn.Module):
    def __init__(self, scale: int, hidden: int):
        super().__init__()
        self.scale = scale
        self.net = _ConvStack([Conv1d(1, hidden, 7, padding=3),
                               Conv1d(hidden, 2 * hidden, 7, stride=4, padding=3),
                               Conv1d(2 * hidden, 2 * hidden, 5, stride=4, padding=2)],
                              Conv1d(2 * hidden, 1, 3, padding=1))

    def downsample(self, x):
        if self.scale == 1:
            return x
        return F.avg_pool1d(x, self.scale, self.scale)

    def forward(self, x):
        return self.net(self.downsample(x.unsqueeze(1)))

    def logit_shape(self, length: int) -> tuple[int, ...]:
        return (1, self.net.output_length(length // self.scale))


class SpectrogramDiscriminator(nn.Module):
    """Convolves over STFT frames with the frequency bins as input channels."""

    def __init__(self, cfg: SpectrogramConfig, hidden: int):
        super().__init__()
        self.cfg = cfg
        self.net = _ConvStack([Conv1d(cfg.n_bins, 2 * hidden, 3, padding=1),
                               Conv1d(2 * hidden, 2 * hidden, 3, stride=2, padding=1)],
                              Conv1d(2 * hidden, 1, 3, padding=1))

    def forward(self, x):
        # log1p keeps silence at exactly zero
        return self.net(torch.log1p(stft_magnitude(x, self.cfg)))

    def logit_shape(self, length: int) -> tuple[int, ...]:
        return (1, self.net.output_length(1 + length // self.cfg.hop_length))


class _PerChannel(nn.Module):
    """Runs a mono sub-discriminator over every channel of ``[B, C, L]``."""

    def __init__(self, make, io_channels: int, shared: bool):
        super().__init__()
        self.io_channels = io_channels
        self.shared = shared
        self.nets = nn.ModuleList([make()] if shared else [make() for _ in range(io_channels)])

    def forward(self, audio):
        b, c, length = audio.shape
        if c != self.io_channels:
            raise ValueError(f"discriminator expects {self.io_channels} channels, got {c}")
        if self.shared:
            logits, feats = self.nets[0](audio.reshape(b * c, length))
            regroup = lambda t: t.reshape(b, c, *t.shape[1:])  # noqa: E731
            return regroup(logits), [regroup(f) for f in feats]
        outs = [net(audio[:, i]) for i, net in enumerate(self.nets)]
        logits = torch.stack([o[0] for o in outs], dim=1)
        feats = [torch.stack([o[1][j] for o in outs], dim=1) for j in range(len(outs[0][1]))]
        return logits, feats

    def logit_shape(self, batch: int, length: int) -> tuple[int, ...]:
        return (batch, self.io_channels) + self.nets[0].logit_shape(length)


class DiscriminatorSuite(nn.Module):
    def __init__(self, cfg: DiscriminatorSuiteConfig):
        super().__init__()
        self.cfg = cfg
        h, c, shared = cfg.hidden, cfg.io_channels, cfg.shared_weights
        subs = [_PerChannel(lambda p=p: PeriodDiscriminator(p, h), c, shared) for p in cfg.mpd_periods]
        subs += [_PerChannel(lambda s=s: ScaleDiscriminator(s, h), c, shared) for s in cfg.msd_scales]
        subs += [_PerChannel(lambda r=r: SpectrogramDiscriminator(r, h), c, shared)
                 for r in cfg.mrsd_resolutions]
        self.discriminators = nn.ModuleList(subs)
        self.names = ([f"mpd{p}" for p in cfg.mpd_periods] + [f"msd{s}" for s in cfg.msd_scales]
                      + [f"mrsd{w}" for w in cfg.mrsd_windows])

    @property
    def input_channels(self) -> int:
        return self.cfg.io_channels

    def forward(self, audio: torch.Tensor):
        """List of ``(logits, features)`` per sub-discriminator, channel axis kept."""
        if audio.dim() == 2:
            audio = audio.unsqueeze(0)
        return [d(audio) for d in self.discriminators]

    def logit_shapes(self, batch: int, length: int) -> list[tuple[int, ...]]:
        return [d.logit_shape(batch, length) for d in self.discriminators]


def build_discriminator_suite(cfg: DiscriminatorSuiteConfig | None = None,
                              seed: int | None = None) -> DiscriminatorSuite:
    cfg = cfg or DiscriminatorSuiteConfig()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        suite = DiscriminatorSuite(cfg)
        for p in suite.parameters():
            nn.init.normal_(p, 0.0, INIT_STD)
    return suite


def discriminate(suite: DiscriminatorSuite, audio: torch.Tensor):
    return suite(audio)

