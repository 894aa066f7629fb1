"""``AMBC`` checkpoint container and the mono-to-multichannel transfer initializer.

Layout (all integers little-endian)::

    b"AMBC" | u32 version
    u32 n_config_ints | i64 * n       generator config (GeneratorConfig.to_ints)
    u32 n_text_bytes  | utf-8 bytes   training config echo (flat key = value text)
    u32 n_tensors
    per tensor: u16 name_len | name | u8 dtype tag | u8 rank | u64 * rank dims | raw data
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .generator import FIRST_LAYER, LAST_LAYER, Generator, GeneratorConfig

MAGIC = b"AMBC"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


class CheckpointError(ValueError):
    pass


class TopologyMismatchError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    config: GeneratorConfig
    tensors: dict[str, torch.Tensor]
    config_text: str = ""
    version: int = VERSION

    @classmethod
    def from_generator(cls, model: Generator, config_text: str = "") -> "ModelCheckpoint":
        tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.cfg, tensors, config_text)

    def to_generator(self) -> Generator:
        model = Generator(self.config)
        dtypes = {t.dtype for t in self.tensors.values() if t.is_floating_point()}
        if dtypes == {torch.float64}:
            model = model.double()
        model.load_state_dict(self.tensors)
        return model

    # ------------------------------------------------------------ serialization
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        ints = self.config.to_ints()
        buf.write(struct.pack(f"<I{len(ints)}q", len(ints), *ints))
        text = self.config_text.encode("utf-8")
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, t in self.tensors.items():
            if t.dtype not in _TAGS:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            tag = _TAGS[t.dtype]
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", tag, t.dim()))
            buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            buf.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[tag]).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CheckpointError("not an AMBC checkpoint (bad magic)")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_ints,) = r.unpack("<I")
        ints = list(r.unpack(f"<{n_ints}q"))
        try:
            config = GeneratorConfig.from_ints(ints)
        except (ValueError, IndexError) as e:
            raise CheckpointError(f"bad config block: {e}") from None
        (n_text,) = r.unpack("<I")
        text = r.take(n_text).decode("utf-8")
        (n_tensors,) = r.unpack("<I")
        tensors = {}
        for _ in range(n_tensors):
            (n_name,) = r.unpack("<H")
            name = r.take(n_name).decode("utf-8")
            tag, rank = r.unpack("<BB")
            if tag not in _DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {name}")
            dims = r.unpack(f"<{rank}Q")
            dt = _DTYPES[tag]
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
            tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        if r.remaining():
            raise CheckpointError(f"{r.remaining()} trailing bytes after tensor records")
        return cls(config, tensors, text, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.data) - self.pos


def save_checkpoint(model: Generator, path, config_text: str = "") -> ModelCheckpoint:
    ckpt = ModelCheckpoint.from_generator(model, config_text)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.load(path)


# ---------------------------------------------------------------- transfer

def transfer_from_mono(mono: ModelCheckpoint, io_channels: int,
                       target_config: GeneratorConfig | None = None) -> ModelCheckpoint:
    """Initialize an ``io_channels`` model from a mono one.

    The first encoder kernel's single input slice is copied to every input
    channel and the last decoder kernel's single output row to every output
    channel (its bias likewise). Everything else, codebooks included, is
    copied verbatim.
    """
    if mono.config.io_channels != 1:
        raise TopologyMismatchError(f"source model has {mono.config.io_channels} channels, expected 1")
    if io_channels < 1:
        raise ValueError("io_channels must be >= 1")
    cfg = mono.config.replace(io_channels=io_channels)
    if target_config is not None and target_config != cfg:
        raise TopologyMismatchError(f"target config {target_config} differs from the mono model "
                                    f"beyond the channel count")
    first_w, last_w, last_b = f"{FIRST_LAYER}.weight", f"{LAST_LAYER}.weight", f"{LAST_LAYER}.bias"
    out = {}
    for name, t in mono.tensors.items():
        if name == first_w:
            out[name] = t.repeat(1, io_channels, 1)
        elif name in (last_w, last_b):
            out[name] = t.repeat(io_channels, *([1] * (t.dim() - 1)))
        else:
            out[name] = t.clone()
    expected = {k: tuple(v.shape) for k, v in Generator(cfg).state_dict().items()}
    got = {k: tuple(v.shape) for k, v in out.items()}
    if expected != got:
        diff = sorted(set(expected.items()) ^ set(got.items()))
        raise TopologyMismatchError(f"tensor layout does not match the target generator: {diff[:4]}")
    return ModelCheckpoint(cfg, out, mono.config_text)
