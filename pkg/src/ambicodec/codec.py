"""``AMBS`` bitstreams: header, bit-packed RVQ codes, file-level encode/decode.

Header (little-endian)::

    b"AMBS" u16 version  u32 sample_rate  u16 n_channels  u8 order
    u32 total_stride  u16 n_codebooks  u32 codebook_size  u64 n_frames
    32-byte sha256 of the checkpoint  u64 n_original_frames

The payload holds ``n_frames * n_codebooks`` indices of ``log2(codebook_size)``
bits each, frame-major then codebook-major, most significant bit first, with
zero bits padding only the final byte.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .ambisonics import channel_count, order_from_channels
from .audio_io import MultichannelWave, read_wav, write_wav
from .model.checkpoint import ModelCheckpoint
from .model.generator import Generator

MAGIC = b"AMBS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHBIHIQ32sQ")
HEADER_SIZE = _HEADER.size


class CodecError(ValueError):
    pass


class StreamFormatError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class TruncatedStreamError(CodecError):
    pass


class DigestMismatchError(CodecError):
    pass


class InputMismatchError(CodecError):
    pass


@dataclass(frozen=True)
class BitstreamHeader:
    sample_rate: int
    n_channels: int
    ambisonics_order: int
    total_stride: int
    n_codebooks: int
    codebook_size: int
    n_frames: int
    model_digest: bytes
    n_original_frames: int
    version: int = VERSION

    def __post_init__(self):
        if self.n_channels != channel_count(self.ambisonics_order):
            raise StreamFormatError(f"{self.n_channels} channels inconsistent with order {self.ambisonics_order}")
        if self.codebook_size < 2 or self.codebook_size & (self.codebook_size - 1):
            raise StreamFormatError(f"codebook size {self.codebook_size} is not a power of two")
        if self.sample_rate < 1 or self.total_stride < 1 or self.n_codebooks < 1:
            raise StreamFormatError("sample rate, stride and codebook count must be positive")
        if len(self.model_digest) != 32:
            raise StreamFormatError("model digest must be 32 bytes")
        if self.n_original_frames > self.n_frames * self.total_stride:
            raise StreamFormatError("original length exceeds the coded length")

    @property
    def bits_per_index(self) -> int:
        return self.codebook_size.bit_length() - 1

    @property
    def payload_bits(self) -> int:
        return self.n_frames * self.n_codebooks * self.bits_per_index

    @property
    def payload_bytes(self) -> int:
        return (self.payload_bits + 7) // 8

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.sample_rate, self.n_channels, self.ambisonics_order,
                            self.total_stride, self.n_codebooks, self.codebook_size, self.n_frames,
                            self.model_digest, self.n_original_frames)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < 6:
            raise TruncatedStreamError(f"stream of {len(data)} bytes is shorter than the header")
        if data[:4] != MAGIC:
            raise StreamFormatError("not an AMBS stream (bad magic)")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported stream version {version}")
        if len(data) < HEADER_SIZE:
            raise TruncatedStreamError(f"stream of {len(data)} bytes is shorter than the header")
        (_, version, sr, n_ch, order, stride, ncb, cbs, n_frames, digest, n_orig) = _HEADER.unpack_from(data)
        return cls(sr, n_ch, order, stride, ncb, cbs, n_frames, digest, n_orig, version)


def bitrate_of(header: BitstreamHeader) -> float:
    """Bits per second carried by the code payload."""
    return header.sample_rate / header.total_stride * header.n_codebooks * math.log2(header.codebook_size)


# ---------------------------------------------------------------- bit packing

def pack_indices(indices, bits: int) -> bytes:
    """MSB-first packing of ``bits``-bit unsigned integers; only the last byte is padded."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if bits < 1 or bits > 62:
        raise ValueError("bits must be in 1..62")
    if idx.size and (idx.min() < 0 or idx.max() >= 1 << bits):
        raise ValueError(f"index out of range for {bits}-bit packing")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bit_array = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bit_array.reshape(-1)).tobytes()


def unpack_indices(payload: bytes, count: int, bits: int) -> np.ndarray:
    need = (count * bits + 7) // 8
    if len(payload) < need:
        raise TruncatedStreamError(f"payload has {len(payload)} bytes, {need} needed")
    if len(payload) > need:
        raise StreamFormatError(f"{len(payload) - need} unexpected bytes after the payload")
    flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count * bits)
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    return flat.reshape(count, bits).astype(np.int64) @ weights


# ---------------------------------------------------------------- streams

@dataclass
class EncodedStream:
    header: BitstreamHeader
    codes: np.ndarray  # [n_frames, n_codebooks], int64

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.shape != (self.header.n_frames, self.header.n_codebooks):
            raise StreamFormatError(f"codes shape {self.codes.shape} does not match the header")

    @property
    def bitrate(self) -> float:
        return bitrate_of(self.header)

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + pack_indices(self.codes, self.header.bits_per_index)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedStream":
        header = BitstreamHeader.from_bytes(data)
        payload = data[HEADER_SIZE:]
        # compare sizes before allocating anything header-sized
        if len(payload) != header.payload_bytes:
            if len(payload) < header.payload_bytes:
                raise TruncatedStreamError(f"payload has {len(payload)} bytes, {header.payload_bytes} needed")
            raise StreamFormatError(f"{len(payload) - header.payload_bytes} unexpected bytes after the payload")
        count = header.n_frames * header.n_codebooks
        codes = unpack_indices(payload, count, header.bits_per_index)
        return cls(header, codes.reshape(header.n_frames, header.n_codebooks))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EncodedStream":
        return cls.from_bytes(Path(path).read_bytes())


class Codec:
    """A generator bound to the digest of the checkpoint it came from."""

    def __init__(self, checkpoint: ModelCheckpoint):
        self.checkpoint = checkpoint
        self.digest = checkpoint.digest()
        self.model: Generator = checkpoint.to_generator().eval()
        self.cfg = checkpoint.config
        self.order = order_from_channels(self.cfg.io_channels)

    @classmethod
    def load(cls, path) -> "Codec":
        return cls(ModelCheckpoint.load(path))

    @property
    def _dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    @torch.no_grad()
    def encode(self, samples: np.ndarray, sample_rate: int) -> EncodedStream:
        """Codes for ``[C, L]`` audio; each frame's code tuple is a fixed point of
        dequantize-then-requantize, so re-encoding decoded codes reproduces them."""
        samples = np.asarray(samples)
        if samples.ndim != 2 or samples.shape[0] != self.cfg.io_channels:
            raise InputMismatchError(f"expected {self.cfg.io_channels} channels, got shape {samples.shape}")
        if sample_rate != self.cfg.sample_rate:
            raise InputMismatchError(f"input is {sample_rate} Hz, model expects {self.cfg.sample_rate} Hz")
        if samples.shape[1] < 1:
            raise InputMismatchError("empty input")
        x = torch.as_tensor(samples, dtype=self._dtype).unsqueeze(0)
        _, q = self.model.encode(x)
        codes = self.model.quantizer.project(q.codes)[0]  # [ncb, T]
        header = BitstreamHeader(self.cfg.sample_rate, self.cfg.io_channels, self.order, self.cfg.total_stride,
                                 self.cfg.n_codebooks, self.cfg.codebook_size, codes.shape[1], self.digest,
                                 samples.shape[1])
        return EncodedStream(header, codes.T.numpy())

    def _check_stream(self, stream: EncodedStream) -> None:
        h = stream.header
        if h.model_digest != self.digest:
            raise DigestMismatchError("stream was encoded with a different checkpoint")
        expected = (self.cfg.sample_rate, self.cfg.io_channels, self.cfg.total_stride, self.cfg.n_codebooks,
                    self.cfg.codebook_size)
        if (h.sample_rate, h.n_channels, h.total_stride, h.n_codebooks, h.codebook_size) != expected:
            raise StreamFormatError("stream header disagrees with the checkpoint configuration")

    @torch.no_grad()
    def decode(self, stream: EncodedStream) -> np.ndarray:
        """``[C, n_original_frames]`` reconstruction."""
        self._check_stream(stream)
        if stream.header.n_frames == 0:
            return np.zeros((self.cfg.io_channels, 0))
        codes = torch.as_tensor(stream.codes.T).unsqueeze(0)
        y = self.model.decode_codes(codes)[0]
        return y[:, :stream.header.n_original_frames].double().numpy()

    @torch.no_grad()
    def requantize(self, stream: EncodedStream) -> np.ndarray:
        """Codes obtained by re-quantizing the decoder-side latents of ``stream``."""
        self._check_stream(stream)
        codes = torch.as_tensor(stream.codes.T).unsqueeze(0)
        return self.model.quantizer.requantize(codes)[0].T.numpy()


def encode_file(wav_path, checkpoint, out_path=None) -> EncodedStream:
    codec = checkpoint if isinstance(checkpoint, Codec) else _codec(checkpoint)
    wave = read_wav(wav_path)
    stream = codec.encode(wave.samples, wave.sample_rate)
    if out_path is not None:
        stream.save(out_path)
    return stream


def decode_file(stream_path, checkpoint, out_path=None, bit_depth: int = 16) -> MultichannelWave:
    codec = checkpoint if isinstance(checkpoint, Codec) else _codec(checkpoint)
    stream = EncodedStream.load(stream_path)
    wave = MultichannelWave(stream.header.sample_rate, codec.decode(stream))
    if out_path is not None:
        write_wav(wave, out_path, bit_depth)
    return wave


def _codec(checkpoint) -> Codec:
    if isinstance(checkpoint, ModelCheckpoint):
        return Codec(checkpoint)
    return Codec.load(checkpoint)
