"""Synthetic Ambisonics scenes: a few plane-wave sources at random directions
over a diffuse, isotropic noise bed mixed at a random SNR.

Scenes are rendered at 4th order (25 channels), like the field recordings
they stand in for, and truncated downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .ambisonics import BFormatSignal, channel_count, sn3d_harmonics, spread_layout


@dataclass(frozen=True)
class SceneStyle:
    """Per-scene-class mixing parameters."""
    n_sources: tuple[int, int] = (1, 3)
    snr_db: tuple[float, float] = (0.0, 30.0)
    source_kinds: tuple[str, ...] = ("tone", "band_noise", "chirp")


SCENE_STYLES = {
    "park": SceneStyle(source_kinds=("chirp", "band_noise"), snr_db=(5.0, 25.0)),
    "street": SceneStyle(n_sources=(2, 3), source_kinds=("band_noise", "tone"), snr_db=(0.0, 15.0)),
    "hall": SceneStyle(source_kinds=("tone",), snr_db=(10.0, 30.0)),
    "beach": SceneStyle(n_sources=(1, 2), source_kinds=("band_noise",), snr_db=(0.0, 10.0)),
}


def _random_direction(rng: np.random.Generator) -> tuple[float, float]:
    return float(rng.uniform(-math.pi, math.pi)), float(math.asin(rng.uniform(-1.0, 1.0)))


def _envelope(rng, n, sr):
    rate = rng.uniform(0.5, 6.0)
    t = np.arange(n) / sr
    return 0.6 + 0.4 * np.sin(2 * math.pi * rate * t + rng.uniform(0, 2 * math.pi))


def _tone(rng, n, sr):
    t = np.arange(n) / sr
    f0 = math.exp(rng.uniform(math.log(80.0), math.log(800.0)))
    vib = 1.0 + 0.01 * np.sin(2 * math.pi * rng.uniform(3, 7) * t)
    phase = 2 * math.pi * f0 * np.cumsum(vib) / sr
    out = np.zeros(n)
    for k in range(1, int(rng.integers(1, 7)) + 1):
        if k * f0 >= 0.45 * sr:
            break
        out += np.sin(k * phase + rng.uniform(0, 2 * math.pi)) / k
    return out * _envelope(rng, n, sr)


def _band_noise(rng, n, sr):
    centre = math.exp(rng.uniform(math.log(200.0), math.log(min(8000.0, 0.4 * sr))))
    width = rng.uniform(0.3, 1.0)
    lo, hi = centre * 2 ** (-width), min(centre * 2 ** width, 0.45 * sr)
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return sps.sosfilt(sos, rng.standard_normal(n)) * _envelope(rng, n, sr)


def _chirp(rng, n, sr):
    t = np.arange(n) / sr
    f_lo = rng.uniform(1500.0, 3000.0)
    f_hi = min(f_lo * rng.uniform(1.5, 2.5), 0.45 * sr)
    rate = rng.uniform(4.0, 12.0)
    sweep = f_lo + (f_hi - f_lo) * (0.5 + 0.5 * np.sin(2 * math.pi * rate * t))
    gate = (np.sin(2 * math.pi * rate * 0.5 * t + rng.uniform(0, 2 * math.pi)) > 0).astype(float)
    gate = np.convolve(gate, np.hanning(max(3, int(0.004 * sr))), mode="same")
    return np.sin(2 * math.pi * np.cumsum(sweep) / sr) * gate / max(gate.max(), 1e-9)


_SOURCES = {"tone": _tone, "band_noise": _band_noise, "chirp": _chirp}


def _pink(rng, n):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def diffuse_field(rng: np.random.Generator, n: int, order: int, n_directions: int = 32) -> np.ndarray:
    """Independent pink noise from a randomly rotated, roughly uniform set of directions."""
    layout = spread_layout(n_directions)
    spin = rng.uniform(-math.pi, math.pi)
    out = np.zeros((channel_count(order), n))
    for az, el in layout.directions:
        out += sn3d_harmonics(az + spin, el, order)[:, None] * _pink(rng, n)[None, :]
    return out / math.sqrt(n_directions)


def synthesize_scene(rng: np.random.Generator, seconds: float, sample_rate: int = 44100,
                     order: int = 4, style: SceneStyle | None = None) -> BFormatSignal:
    style = style or SceneStyle()
    n = int(round(seconds * sample_rate))
    direct = np.zeros((channel_count(order), n))
    for _ in range(int(rng.integers(style.n_sources[0], style.n_sources[1] + 1))):
        kind = style.source_kinds[int(rng.integers(len(style.source_kinds)))]
        s = _SOURCES[kind](rng, n, sample_rate)
        s /= max(np.sqrt(np.mean(s * s)), 1e-12)
        az, el = _random_direction(rng)
        direct += sn3d_harmonics(az, el, order)[:, None] * (rng.uniform(0.3, 1.0) * s)[None, :]
    bed = diffuse_field(rng, n, order)
    snr_db = rng.uniform(*style.snr_db)
    # SNR measured on the omnidirectional channel
    p_direct = np.mean(direct[0] ** 2)
    p_bed = max(np.mean(bed[0] ** 2), 1e-20)
    mix = direct + bed * math.sqrt(p_direct / p_bed * 10 ** (-snr_db / 10))
    mix *= rng.uniform(0.2, 0.7) / max(np.abs(mix).max(), 1e-12)
    return BFormatSignal(order, sample_rate, mix)


def synthesize_corpus(seed: int, recordings_per_scene: int = 8, seconds: float = 0.5,
                      sample_rate: int = 44100, order: int = 4,
                      scenes: tuple[str, ...] = tuple(SCENE_STYLES)) -> dict[str, list[BFormatSignal]]:
    """``{scene: [recording, ...]}`` drawn deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    return {name: [synthesize_scene(rng, seconds, sample_rate, order, SCENE_STYLES[name])
                   for _ in range(recordings_per_scene)]
            for name in scenes}
