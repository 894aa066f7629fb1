"""Multichannel PCM WAV I/O, excerpt framing and per-scene dataset splits."""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV parsing failures."""


class MalformedHeaderError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


class TruncatedDataError(WavError):
    pass


@dataclass
class MultichannelWave:
    sample_rate: int
    samples: np.ndarray  # [channels, frames], float64

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] < 1:
            raise ValueError("a wave needs at least one channel")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite sample values")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate


def interleave(samples: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(samples.T).reshape(-1)


def deinterleave(flat: np.ndarray, n_channels: int) -> np.ndarray:
    return np.ascontiguousarray(flat.reshape(-1, n_channels).T)


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)


def read_wav(path) -> MultichannelWave:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    for cid, start, size in _chunks(data):
        if cid == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise MalformedHeaderError(f"{path}: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", data, start)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise MalformedHeaderError(f"{path}: short WAVE_FORMAT_EXTENSIBLE chunk")
                sub = struct.unpack_from("<H", data, start + 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            if fmt is None:
                raise MalformedHeaderError(f"{path}: data chunk before fmt chunk")
            if start + size > len(data):
                raise TruncatedDataError(f"{path}: data chunk declares {size} bytes, "
                                         f"{len(data) - start} present")
            payload = data[start:start + size]
            break
    if fmt is None:
        raise MalformedHeaderError(f"{path}: missing fmt chunk")
    if payload is None:
        raise MalformedHeaderError(f"{path}: missing data chunk")
    tag, n_channels, rate, _, block_align, bits = fmt
    if n_channels < 1:
        raise MalformedHeaderError(f"{path}: zero channels")
    if (tag, bits) not in {(WAVE_FORMAT_PCM, 16), (WAVE_FORMAT_PCM, 24), (WAVE_FORMAT_IEEE_FLOAT, 32)}:
        raise UnsupportedCodecError(f"{path}: format tag {tag} with {bits} bits is not supported")
    if block_align != n_channels * bits // 8:
        raise MalformedHeaderError(f"{path}: block align {block_align} inconsistent with "
                                   f"{n_channels} x {bits}-bit")
    if len(payload) % block_align:
        raise TruncatedDataError(f"{path}: data ends mid-frame")
    if bits == 16:
        flat = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        flat = ints.astype(np.float64) / float(1 << 23)
    else:
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return MultichannelWave(rate, deinterleave(flat, n_channels))


def quantize(samples: np.ndarray, bit_depth: int) -> np.ndarray:
    """Clamp to [-1, 1] and round half away from zero to signed integers."""
    full = float(1 << (bit_depth - 1))
    scaled = np.clip(samples, -1.0, 1.0) * full
    ints = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(ints, -full, full - 1).astype(np.int32)


def write_wav(wave: MultichannelWave, path, bit_depth: int = 16) -> None:
    if bit_depth not in (16, 24):
        raise ValueError("bit_depth must be 16 or 24")
    ints = interleave(quantize(wave.samples, bit_depth))
    if bit_depth == 16:
        payload = ints.astype("<i2").tobytes()
    else:
        u = (ints & 0xFFFFFF).astype(np.uint32)
        payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    block_align = wave.n_channels * bit_depth // 8
    header = struct.pack("<4sI4s", b"RIFF", 36 + len(payload) + (len(payload) & 1), b"WAVE")
    fmt = struct.pack("<4sIHHIIHH", b"fmt ", 16, WAVE_FORMAT_PCM, wave.n_channels, wave.sample_rate,
                      wave.sample_rate * block_align, block_align, bit_depth)
    chunk = struct.pack("<4sI", b"data", len(payload)) + payload + (b"\0" if len(payload) & 1 else b"")
    Path(path).write_bytes(header + fmt + chunk)


def frame_excerpts(wave: MultichannelWave, seconds: float, hop_seconds: float | None = None,
                   ) -> list[MultichannelWave]:
    """Contiguous fixed-length excerpts; the trailing remainder is dropped."""
    if seconds <= 0:
        raise ValueError("excerpt length must be positive")
    size = int(round(seconds * wave.sample_rate))
    hop = int(round((hop_seconds or seconds) * wave.sample_rate))
    if hop < 1:
        raise ValueError("hop must be at least one frame")
    return [MultichannelWave(wave.sample_rate, wave.samples[:, s:s + size])
            for s in range(0, wave.n_frames - size + 1, hop)]


@dataclass
class DatasetManifest:
    # scene -> files, in the (seeded) order the split was drawn from
    scenes: dict[str, list[str]]
    train: dict[str, list[str]] = field(default_factory=dict)
    heldout: dict[str, list[str]] = field(default_factory=dict)

    def rows(self):
        for scene in self.scenes:
            for f in self.train.get(scene, []):
                yield scene, f, "train"
            for f in self.heldout.get(scene, []):
                yield scene, f, "heldout"

    def files(self, part: str) -> list[str]:
        src = self.train if part == "train" else self.heldout
        return [f for scene in self.scenes for f in src.get(scene, [])]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{s}\t{f}\t{p}\n" for s, f, p in self.rows()))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        m = cls(scenes={})
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "heldout"):
                raise ValueError(f"{path}:{lineno}: expected scene<TAB>path<TAB>train|heldout")
            scene, f, part = parts
            m.scenes.setdefault(scene, []).append(f)
            (m.train if part == "train" else m.heldout).setdefault(scene, []).append(f)
        return m


def split_dataset(files_by_scene: dict[str, list[str]], seed: int = 0) -> DatasetManifest:
    """Per-scene split: floor(7/8) of each scene's recordings train, the rest held out."""
    if not files_by_scene:
        raise ValueError("no scenes to split")
    rng = random.Random(seed)
    manifest = DatasetManifest(scenes={})
    for scene in sorted(files_by_scene):
        files = sorted(files_by_scene[scene])
        if len(files) < 8:
            log.warning("scene %r has %d recordings; the held-out part will be empty", scene, len(files))
        rng.shuffle(files)
        n_train = (7 * len(files)) // 8
        manifest.scenes[scene] = files
        manifest.train[scene] = files[:n_train]
        manifest.heldout[scene] = files[n_train:]
    return manifest
