"""Magnitude STFT, HTK mel filterbank, and the 3.5 kHz low-anchor filter."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
from scipy import signal as sps

from .audio_io import MultichannelWave


@dataclass(frozen=True)
class SpectrogramConfig:
    window_length: int = 2048
    hop_length: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    sample_rate: int = 44100

    def __post_init__(self):
        if self.window_length < 2 or self.window_length & (self.window_length - 1):
            raise ValueError("window_length must be a power of two")
        if not 1 <= self.hop_length <= self.window_length:
            raise ValueError("hop_length must be in [1, window_length]")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.f_max is not None and self.f_max > self.sample_rate / 2:
            raise ValueError("f_max above Nyquist")
        if self.f_min < 0 or self.f_min >= self.upper_frequency:
            raise ValueError("need 0 <= f_min < f_max")

    @property
    def upper_frequency(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1


# window, hop, mel bands of the multi-scale mel loss
MEL_SCALES = tuple((w, w // 4, m) for w, m in zip((32, 64, 128, 256, 512, 1024, 2048),
                                                     (5, 10, 20, 40, 80, 160, 320)))


def multiscale_configs(sample_rate: int = 44100, scales=MEL_SCALES) -> list[SpectrogramConfig]:
    return [SpectrogramConfig(w, h, m, sample_rate=sample_rate) for w, h, m in scales]


@functools.lru_cache(maxsize=64)
def _hann(n: int, dtype: torch.dtype) -> torch.Tensor:
    return torch.hann_window(n, periodic=True, dtype=dtype)


def _overlap_add(frames: torch.Tensor, hop: int, length: int) -> torch.Tensor:
    """Adjoint of ``unfold(-1, n, hop)``: ``[N, F, n] -> [N, length]``."""
    n_rows, n_frames, n = frames.shape
    if n % hop == 0:
        k = n // hop
        out = frames.new_zeros(n_rows, n_frames + k - 1, hop)
        for q in range(k):
            out[:, q:q + n_frames] += frames[:, :, q * hop:(q + 1) * hop]
        out = out.reshape(n_rows, -1)
    else:
        out = torch.nn.functional.fold(frames.transpose(1, 2), output_size=(1, (n_frames - 1) * hop + n),
                                       kernel_size=(1, n), stride=(1, hop)).reshape(n_rows, -1)
    return torch.nn.functional.pad(out, (0, length - out.shape[-1]))


class _StftMagnitudeFn(torch.autograd.Function):
    """Reflect-padded, Hann-windowed ``|rfft|`` per frame, with a hand-written backward.

    Backward: the magnitude gradient becomes ``g * X / |X|`` (0 where ``|X| = 0``),
    the one-sided rfft adjoint is ``n * irfft`` with interior bins halved, then
    the window, overlap-add and the reflect-padding adjoint follow.
    """

    @staticmethod
    def forward(ctx, flat, n, hop):
        pad = n // 2
        padded = torch.nn.functional.pad(flat.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
        spec = torch.fft.rfft(padded.unfold(-1, n, hop) * _hann(n, flat.dtype), dim=-1)
        ri = torch.view_as_real(spec)
        mag = (ri[..., 0].square() + ri[..., 1].square()).sqrt()
        ctx.save_for_backward(spec, mag)
        ctx.meta = (flat.shape[-1], n, hop)
        return mag

    @staticmethod
    def backward(ctx, grad):
        spec, mag = ctx.saved_tensors
        length, n, hop = ctx.meta
        pad = n // 2
        scale = torch.where(mag > 0, grad / mag.clamp_min(torch.finfo(mag.dtype).tiny), 0.0)
        y = spec * scale
        y[..., 1:n // 2] *= 0.5
        g_frames = torch.fft.irfft(y, n=n, dim=-1) * (n * _hann(n, grad.dtype))
        g_pad = _overlap_add(g_frames, hop, length + 2 * pad)
        g = g_pad[:, pad:pad + length].clone()
        g[:, 1:pad + 1] += g_pad[:, :pad].flip(-1)
        g[:, length - 1 - pad:length - 1] += g_pad[:, pad + length:].flip(-1)
        return g, None, None


def _frame_magnitudes(x: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    """Frames-major magnitudes ``[..., n_frames, n_bins]``."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.double()
    n = cfg.window_length
    if x.shape[-1] <= n // 2:
        raise ValueError(f"signal of {x.shape[-1]} samples too short for a {n}-sample window")
    lead = x.shape[:-1]
    mag = _StftMagnitudeFn.apply(x.reshape(-1, x.shape[-1]), n, cfg.hop_length)
    return mag.reshape(*lead, mag.shape[-2], cfg.n_bins)


def stft_magnitude(x: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    """Centered, Hann-windowed magnitude STFT.

    ``x`` is ``[..., L]``; the result is ``[..., n_bins, n_frames]`` with
    ``n_frames = 1 + L // hop``.
    """
    return _frame_magnitudes(x, cfg).transpose(-1, -2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=64)
def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape ``[n_mels, n_bins]`` (peak 1).

    A band narrower than the bin spacing can miss every bin centre; such a
    band takes weight 1 on the bin nearest its centre so that no row is empty.
    """
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.window_length
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_frequency), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    for i in np.flatnonzero(fb.sum(axis=1) <= 0):
        fb[i, np.argmin(np.abs(freqs - edges[i + 1]))] = 1.0
    return fb


@functools.lru_cache(maxsize=64)
def _filterbank_tensor(cfg: SpectrogramConfig, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(mel_filterbank(cfg), dtype=dtype)


def mel_frames(x: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    """Mel-band magnitudes, frames-major ``[..., n_frames, n_mels]``."""
    mag = _frame_magnitudes(x, cfg)
    return mag @ _filterbank_tensor(cfg, mag.dtype).T


def mel_spectrogram(x: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    """Mel-band magnitudes ``[..., n_mels, n_frames]`` (linear; no log)."""
    return mel_frames(x, cfg).transpose(-1, -2)


def lowpass_taps(sample_rate: int, cutoff: float = 3500.0, transition: float = 1000.0,
                 attenuation_db: float = 70.0) -> np.ndarray:
    """Kaiser-windowed sinc low-pass; the stopband starts at ``cutoff + transition / 2``."""
    numtaps, beta = sps.kaiserord(attenuation_db, transition / (0.5 * sample_rate))
    numtaps |= 1  # odd length keeps the group delay an integer
    return sps.firwin(numtaps, cutoff, window=("kaiser", beta), fs=sample_rate)


def lowpass_anchor(wave: MultichannelWave, cutoff: float = 3500.0) -> MultichannelWave:
    """Zero-phase-delay 3.5 kHz low-pass of every channel (the listening-test low anchor)."""
    if wave.sample_rate <= 2 * cutoff:
        raise ValueError("sample rate must exceed twice the cutoff")
    taps = lowpass_taps(wave.sample_rate, cutoff)
    delay = (len(taps) - 1) // 2
    # odd extension keeps DC and slow trends intact at the edges
    ext = min(delay, wave.n_frames - 1)
    padded = np.pad(wave.samples, ((0, 0), (ext, ext)), mode="reflect", reflect_type="odd")
    full = sps.fftconvolve(padded, taps[None, :], mode="full", axes=1)
    start = ext + delay
    return MultichannelWave(wave.sample_rate, full[:, start:start + wave.n_frames])
