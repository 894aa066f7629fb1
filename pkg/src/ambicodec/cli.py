"""Command-line entry point: ``ambicodec <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import ambisonics as amb
from .audio_io import DatasetManifest, MultichannelWave, WavError, read_wav, split_dataset, write_wav
from .codec import Codec, CodecError, EncodedStream
from .dsp import MEL_SCALES, lowpass_anchor, multiscale_configs
from .losses import NonFiniteLossError, covariance_loss, multiscale_mel_loss
from .model.checkpoint import CheckpointError, ModelCheckpoint
from .trainer import TrainConfig, TrainingData, compare_inits, pretrain_mono, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    return cfg.replace(**overrides) if overrides else cfg


def _echo(args, cfg: TrainConfig | None = None) -> None:
    """Print the resolved invocation so any run can be repeated."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("# ambicodec " + " ".join(f"{k}={v}" for k, v in flags.items()), file=sys.stderr)
    if cfg is not None:
        print(f"# seed = {cfg.seed}", file=sys.stderr)
        sys.stderr.write("".join(f"# {line}\n" for line in cfg.to_text().splitlines()))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: TrainConfig, manifest_path) -> TrainingData:
    manifest = DatasetManifest.load(manifest_path)
    return TrainingData.from_manifest(manifest, cfg.excerpt_frames, root=Path(manifest_path).parent,
                                      max_heldout=cfg.validation_excerpts)


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    _echo(args)
    src = Path(args.input)
    if not src.is_dir():
        raise DataError(f"{src} is not a directory")
    out = _out_dir(args, "prepared")
    files_by_scene: dict[str, list[str]] = {}
    target = amb.channel_count(args.order)
    for path in sorted(src.rglob("*.wav")):
        rel = path.relative_to(src)
        scene = rel.parts[0] if len(rel.parts) > 1 else "default"
        wave = read_wav(path)
        try:
            order = amb.order_from_channels(wave.n_channels)
        except ValueError as e:
            raise DataError(f"{path}: {e}") from None
        if order < args.order:
            raise DataError(f"{path}: order {order} input cannot be truncated to order {args.order}")
        dest = out / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        if wave.n_channels == target:
            shutil.copyfile(path, dest)
        else:
            write_wav(MultichannelWave(wave.sample_rate, wave.samples[:target]), dest, args.bit_depth)
        files_by_scene.setdefault(scene, []).append(str(dest.relative_to(out)))
    if not files_by_scene:
        raise DataError(f"no .wav files under {src}")
    manifest = split_dataset(files_by_scene, args.seed if args.seed is not None else 0)
    manifest.save(out / "manifest.tsv")
    n_train, n_held = len(manifest.files("train")), len(manifest.files("heldout"))
    print(f"prepared {n_train + n_held} files ({n_train} train, {n_held} held out) -> {out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    _echo(args, cfg)
    data = _load_data(cfg, args.manifest)
    init = ModelCheckpoint.load(args.init) if args.init not in (None, "random") else "random"
    result = run_training(cfg, data, init, _out_dir(args, "run"))
    last = result.curve[-1]
    print(f"step {last.step}: mel_val {last.mel_validation_loss:.5f} cov_val {last.covariance_validation_loss:.5f}")
    return EXIT_OK


def cmd_compare_inits(args) -> int:
    cfg = _config(args)
    _echo(args, cfg)
    data = _load_data(cfg, args.manifest)
    out = _out_dir(args, "compare")
    if args.mono:
        mono = ModelCheckpoint.load(args.mono)
    else:
        mono_cfg = cfg.replace(steps=args.mono_steps) if args.mono_steps is not None else cfg
        mono = pretrain_mono(mono_cfg, data, out / "mono").checkpoint
    result = compare_inits(cfg, data, mono, out)
    for name, curve in result.curves.items():
        print(f"{name}: final mel_val {curve[-1].mel_validation_loss:.5f} -> {out / name / 'curve.csv'}")
    return EXIT_OK


def cmd_encode(args) -> int:
    _echo(args)
    codec = Codec.load(args.checkpoint)
    wave = read_wav(args.input)
    stream = codec.encode(wave.samples, wave.sample_rate)
    out = Path(args.out or Path(args.input).with_suffix(".ambs"))
    stream.save(out)
    print(f"bitrate {stream.bitrate:.3f} bps ({stream.header.n_frames} frames, "
          f"{stream.header.n_codebooks} x {stream.header.codebook_size} codebooks)", file=sys.stderr)
    print(out)
    return EXIT_OK


def cmd_decode(args) -> int:
    _echo(args)
    codec = Codec.load(args.checkpoint)
    stream = EncodedStream.load(args.input)
    print(f"bitrate {stream.bitrate:.3f} bps", file=sys.stderr)
    wave = MultichannelWave(stream.header.sample_rate, codec.decode(stream))
    out = Path(args.out or Path(args.input).with_suffix(".wav"))
    write_wav(wave, out, args.bit_depth)
    print(out)
    return EXIT_OK


def _snr_db(ref: np.ndarray, deg: np.ndarray) -> list[float | None]:
    out = []
    for r, d in zip(ref, deg):
        noise, signal = float(np.sum((r - d) ** 2)), float(np.sum(r ** 2))
        # unbounded either way; JSON has no infinity
        out.append(None if noise == 0 or signal == 0 else 10 * float(np.log10(signal / noise)))
    return out


def cmd_eval(args) -> int:
    _echo(args)
    ref, deg = read_wav(args.reference), read_wav(args.degraded)
    if ref.samples.shape != deg.samples.shape or ref.sample_rate != deg.sample_rate:
        raise DataError(f"shape mismatch: {ref.samples.shape} @ {ref.sample_rate} Hz vs "
                        f"{deg.samples.shape} @ {deg.sample_rate} Hz")
    scales = [s for s in MEL_SCALES if s[0] // 2 < ref.n_frames]
    if not scales:
        raise DataError("signal too short for the mel distance")
    r = torch.from_numpy(ref.samples)
    d = torch.from_numpy(deg.samples)
    report = {
        "sample_rate": ref.sample_rate,
        "n_channels": ref.n_channels,
        "n_frames": ref.n_frames,
        "mel_distance": float(multiscale_mel_loss(r, d, multiscale_configs(ref.sample_rate, scales))),
        "covariance_loss": float(covariance_loss(r, d)) if ref.n_channels > 1 else 0.0,
        "snr_db_per_channel": _snr_db(ref.samples, deg.samples),
    }
    if args.lowpass_anchor:
        write_wav(lowpass_anchor(ref), args.lowpass_anchor, args.bit_depth)
        report["lowpass_anchor"] = str(args.lowpass_anchor)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_render(args) -> int:
    _echo(args)
    try:
        layout = amb.get_layout(args.layout)
    except KeyError as e:
        raise DataError(str(e.args[0])) from None
    wave = read_wav(args.input)
    try:
        signal = amb.BFormatSignal(amb.order_from_channels(wave.n_channels), wave.sample_rate, wave.samples)
    except ValueError as e:
        raise DataError(f"{args.input}: {e}") from None
    feeds = amb.render(signal, layout)
    out = _out_dir(args, "render")
    stem = Path(args.input).stem
    for i, (label, feed) in enumerate(zip(layout.labels, feeds)):
        write_wav(MultichannelWave(wave.sample_rate, feed[None, :]), out / f"{stem}_{i + 1:02d}_{label}.wav",
                  args.bit_depth)
    print(f"{layout.n_outputs} speaker feeds ({layout.name}) -> {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, run_checks
    _echo(args)
    results = run_checks(args.instances, args.seed if args.seed is not None else 0)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} instances={r.instances} "
              f"max_rel_err={r.max_relative_error:.3e} (tol {TOLERANCE:g})")
    if args.out:
        Path(args.out).write_text(json.dumps([dict(name=r.name, instances=r.instances,
                                                   max_relative_error=r.max_relative_error, passed=r.passed)
                                              for r in results], indent=2) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ambicodec", allow_abbrev=False,
                                     description="Multichannel neural codec for 3rd-order Ambisonics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        p.add_argument("--config", help="flat key = value training config file")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--out", help="output path or directory")
        p.set_defaults(func=func)
        return p

    p = add("prepare", cmd_prepare, "truncate B-format recordings and write a 7/8 train/held-out manifest")
    p.add_argument("--input", required=True, help="directory of B-format wavs, one sub-directory per scene")
    p.add_argument("--order", type=int, default=3, help="target Ambisonics order (default 3)")
    p.add_argument("--bit-depth", type=int, choices=(16, 24), default=16)

    for name, func, text in (("train", cmd_train, "train a generator"),
                             ("compare-inits", cmd_compare_inits, "train from transfer and random inits")):
        p = add(name, func, text)
        p.add_argument("--manifest", required=True, help="manifest written by 'prepare'")
        p.add_argument("--steps", type=int, help="override the configured step count")
        if name == "train":
            p.add_argument("--init", default="random", help="'random' or a checkpoint (mono checkpoints transfer)")
        else:
            p.add_argument("--mono", help="mono checkpoint; pretrained on the W channel when omitted")
            p.add_argument("--mono-steps", type=int, help="steps for the mono pretrain")

    p = add("encode", cmd_encode, "encode a wav into an AMBS stream")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)

    p = add("decode", cmd_decode, "decode an AMBS stream into a wav")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bit-depth", type=int, choices=(16, 24), default=16)

    p = add("eval", cmd_eval, "objective metrics of a degraded file against its reference (JSON)")
    p.add_argument("reference")
    p.add_argument("degraded")
    p.add_argument("--lowpass-anchor", help="also write the 3.5 kHz low-pass anchor of the reference here")
    p.add_argument("--bit-depth", type=int, choices=(16, 24), default=16)

    p = add("render", cmd_render, "decode B-format to loudspeaker feeds, one wav per speaker")
    p.add_argument("input")
    p.add_argument("--layout", required=True, help=f"one of {', '.join(sorted(amb.LAYOUTS))}")
    p.add_argument("--bit-depth", type=int, choices=(16, 24), default=16)

    p = add("grad-check", cmd_grad_check, "finite-difference check of every backward")
    p.add_argument("--instances", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (FloatingPointError, NonFiniteLossError) as e:
        print(f"numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WavError, CodecError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"data error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
