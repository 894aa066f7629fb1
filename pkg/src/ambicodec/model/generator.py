"""Encoder / residual-VQ / decoder generator with multichannel I/O layers.

The interior follows the usual RVQGAN block pattern (dilated residual
units with snake activations, strided down/up-sampling convolutions).
Only the first encoder convolution and the last decoder convolution see
the audio channel count; everything between is independent of it, so a
mono model and a 16-channel model share every interior tensor shape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .activations import Snake
from .conv import Conv1d, ConvTranspose1d
from .rvq import ResidualVQ

FIRST_LAYER = "encoder.conv_in"
LAST_LAYER = "decoder.conv_out"


@dataclass(frozen=True)
class GeneratorConfig:
    io_channels: int = 16
    dims: tuple[int, ...] = (32, 64, 128)
    strides: tuple[int, ...] = (2, 4, 8)
    latent_dim: int = 64
    n_codebooks: int = 4
    codebook_size: int = 64
    kernel_size: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)
    sample_rate: int = 44100

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.io_channels < 1:
            raise ValueError("io_channels must be >= 1")
        if len(self.dims) != len(self.strides) or not self.dims:
            raise ValueError("dims and strides must be non-empty and of equal length")
        if any(s < 2 for s in self.strides):
            raise ValueError("downsampling strides must be >= 2")
        if any(d < 1 for d in self.dims) or self.latent_dim < 1:
            raise ValueError("channel widths must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.codebook_size < 2 or self.codebook_size & (self.codebook_size - 1):
            raise ValueError("codebook_size must be a power of two")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.total_stride

    @property
    def bitrate(self) -> float:
        return self.frame_rate * self.n_codebooks * math.log2(self.codebook_size)

    def to_ints(self) -> list[int]:
        """Flat integer encoding used by the checkpoint config block."""
        out = [self.io_channels, self.latent_dim, self.n_codebooks, self.codebook_size,
               self.kernel_size, self.sample_rate, len(self.dims)]
        out += list(self.dims) + list(self.strides)
        out += [len(self.dilations)] + list(self.dilations)
        return out

    @classmethod
    def from_ints(cls, values: list[int]) -> "GeneratorConfig":
        io, latent, ncb, cbs, k, sr, n = values[:7]
        dims = tuple(values[7:7 + n])
        strides = tuple(values[7 + n:7 + 2 * n])
        nd = values[7 + 2 * n]
        dilations = tuple(values[8 + 2 * n:8 + 2 * n + nd])
        return cls(io, dims, strides, latent, ncb, cbs, k, dilations, sr)

    def replace(self, **kw) -> "GeneratorConfig":
        d = asdict(self)
        d.update(kw)
        return GeneratorConfig(**d)


class ResidualUnit(nn.Module):
    def __init__(self, dim: int, dilation: int, kernel_size: int):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.act1 = Snake(dim)
        self.conv1 = Conv1d(dim, dim, kernel_size, dilation=dilation, padding=pad)
        self.act2 = Snake(dim)
        self.conv2 = Conv1d(dim, dim, 1)

    def forward(self, x):
        return x + self.conv2(self.act2(self.conv1(self.act1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, out_dim: int, stride: int, cfg: GeneratorConfig):
        super().__init__()
        self.res = nn.Sequential(*(ResidualUnit(dim, d, cfg.kernel_size) for d in cfg.dilations))
        self.act = Snake(dim)
        self.down = Conv1d(dim, out_dim, 2 * stride, stride=stride, padding=math.ceil(stride / 2))

    def forward(self, x):
        return self.down(self.act(self.res(x)))


class DecoderBlock(nn.Module):
    def __init__(self, in_dim: int, dim: int, stride: int, cfg: GeneratorConfig):
        super().__init__()
        self.act = Snake(in_dim)
        self.up = ConvTranspose1d(in_dim, dim, 2 * stride, stride=stride,
                                  padding=math.ceil(stride / 2), output_padding=stride % 2)
        self.res = nn.Sequential(*(ResidualUnit(dim, d, cfg.kernel_size) for d in cfg.dilations))

    def forward(self, x):
        return self.res(self.up(self.act(x)))


def _next_dims(dims):
    return [dims[i + 1] if i + 1 < len(dims) else dims[i] for i in range(len(dims))]


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        k = cfg.kernel_size
        self.conv_in = Conv1d(cfg.io_channels, cfg.dims[0], k, padding=k // 2)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, nd, s, cfg) for d, nd, s in zip(cfg.dims, _next_dims(cfg.dims), cfg.strides))
        self.act = Snake(cfg.dims[-1])
        self.conv_out = Conv1d(cfg.dims[-1], cfg.latent_dim, 3, padding=1)

    def forward(self, x):
        x = self.conv_in(x)
        for block in self.blocks:
            x = block(x)
        return self.conv_out(self.act(x))


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        k = cfg.kernel_size
        self.conv_in = Conv1d(cfg.latent_dim, cfg.dims[-1], k, padding=k // 2)
        self.blocks = nn.ModuleList(
            DecoderBlock(nd, d, s, cfg)
            for d, nd, s in reversed(list(zip(cfg.dims, _next_dims(cfg.dims), cfg.strides))))
        self.act = Snake(cfg.dims[0])
        # linear output: no tanh
        self.conv_out = Conv1d(cfg.dims[0], cfg.io_channels, k, padding=k // 2)

    def forward(self, z):
        x = self.conv_in(z)
        for block in self.blocks:
            x = block(x)
        return self.conv_out(self.act(x))


class GeneratorOutput(NamedTuple):
    reconstruction: torch.Tensor
    codes: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


def _assert_finite(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activations after {where}")


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.quantizer = ResidualVQ(cfg.n_codebooks, cfg.codebook_size, cfg.latent_dim)
        self.decoder = Decoder(cfg)

    @property
    def io_channels(self) -> int:
        return self.cfg.io_channels

    def _pad(self, audio: torch.Tensor) -> torch.Tensor:
        rem = audio.shape[-1] % self.cfg.total_stride
        if rem:
            audio = nn.functional.pad(audio, (0, self.cfg.total_stride - rem))
        return audio

    def encode(self, audio: torch.Tensor):
        """Latents and codes for ``[B, C, L]`` audio (right-padded to the stride)."""
        if audio.shape[-2] != self.cfg.io_channels:
            raise ValueError(f"expected {self.cfg.io_channels} channels, got {audio.shape[-2]}")
        if not torch.isfinite(audio).all():
            raise FloatingPointError("non-finite generator input")
        z = self.encoder(self._pad(audio))
        _assert_finite(z, "encoder")
        return z, self.quantizer(z)

    def decode(self, quantized: torch.Tensor) -> torch.Tensor:
        y = self.decoder(quantized)
        _assert_finite(y, "decoder")
        return y

    def decode_codes(self, codes: torch.Tensor) -> torch.Tensor:
        return self.decode(self.quantizer.dequantize(codes))

    def forward(self, audio: torch.Tensor) -> GeneratorOutput:
        squeeze = audio.dim() == 2
        if squeeze:
            audio = audio.unsqueeze(0)
        length = audio.shape[-1]
        _, q = self.encode(audio)
        y = self.decode(q.quantized)[..., :length]
        if squeeze:
            return GeneratorOutput(y.squeeze(0), q.codes.squeeze(0), q.codebook_loss, q.commitment_loss)
        return GeneratorOutput(y, q.codes, q.codebook_loss, q.commitment_loss)


def build_generator(cfg: GeneratorConfig | None = None, seed: int | None = None, **overrides) -> Generator:
    cfg = cfg or GeneratorConfig()
    if overrides:
        cfg = cfg.replace(**overrides)
    if seed is None:
        return Generator(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(cfg)


def generator_forward(model: Generator, audio: torch.Tensor) -> GeneratorOutput:
    return model(audio)
