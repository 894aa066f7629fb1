import json
import subprocess
import sys

import numpy as np
import pytest

from ambicodec.audio_io import MultichannelWave, read_wav, write_wav
from ambicodec.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from ambicodec.codec import EncodedStream, bitrate_of
from ambicodec.model.checkpoint import ModelCheckpoint, save_checkpoint
from ambicodec.model.generator import GeneratorConfig, build_generator
from ambicodec.trainer import TrainConfig, read_curve

SMALL = GeneratorConfig(io_channels=16, dims=(4, 8), strides=(2, 4), latent_dim=4, n_codebooks=2, codebook_size=8,
                        kernel_size=3, dilations=(1,))
TRAIN_TEXT = """steps = 2
batch_size = 1
excerpt_seconds = 0.0232199546
validation_interval = 1
validation_excerpts = 2
w_adversarial = 0
w_feature_matching = 0
mel_windows = 32,64,128
dims = 4,8
strides = 2,4
latent_dim = 4
n_codebooks = 2
codebook_size = 8
kernel_size = 3
dilations = 1
"""


def wav(path, rng, channels=16, frames=2000, rate=44100):
    write_wav(MultichannelWave(rate, rng.uniform(-0.5, 0.5, (channels, frames))), path)
    return path


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "g.ambc"
    save_checkpoint(build_generator(SMALL, seed=0), path)
    return path


class TestParser:
    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["encode", "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--checkpoint"):
            assert flag in text

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["eval", "a.wav", "b.wav", "--frobnicate"])
        assert e.value.code == EXIT_USAGE

    def test_abbreviations_rejected(self):
        with pytest.raises(SystemExit) as e:
            main(["render", "x.wav", "--lay", "stereo"])
        assert e.value.code == EXIT_USAGE

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "ambicodec.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for name in ("prepare", "train", "compare-inits", "encode", "decode", "eval", "render", "grad-check"):
            assert name in proc.stdout


class TestPrepare:
    def test_truncates_and_splits(self, tmp_path, rng, capsys):
        src = tmp_path / "raw"
        for scene in ("park", "hall"):
            (src / scene).mkdir(parents=True)
            for i in range(8):
                wav(src / scene / f"r{i}.wav", rng, channels=25 if i % 2 else 16, frames=100)
        out = tmp_path / "prep"
        assert main(["prepare", "--input", str(src), "--out", str(out), "--seed", "3"]) == EXIT_OK
        assert "seed=3" in capsys.readouterr().err
        lines = (out / "manifest.tsv").read_text().splitlines()
        assert len(lines) == 16
        assert sum(line.endswith("heldout") for line in lines) == 2
        assert read_wav(out / "park" / "r1.wav").n_channels == 16
        # 16-channel input is copied through unchanged
        assert (out / "hall" / "r0.wav").read_bytes() == (src / "hall" / "r0.wav").read_bytes()
        first = (out / "manifest.tsv").read_text()
        assert main(["prepare", "--input", str(src), "--out", str(out), "--seed", "3"]) == EXIT_OK
        assert (out / "manifest.tsv").read_text() == first

    def test_wrong_channel_count(self, tmp_path, rng):
        (tmp_path / "raw" / "s").mkdir(parents=True)
        wav(tmp_path / "raw" / "s" / "a.wav", rng, channels=5, frames=10)
        assert main(["prepare", "--input", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_order_too_low(self, tmp_path, rng):
        (tmp_path / "raw" / "s").mkdir(parents=True)
        wav(tmp_path / "raw" / "s" / "a.wav", rng, channels=9, frames=10)
        assert main(["prepare", "--input", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_missing_dir(self, tmp_path):
        assert main(["prepare", "--input", str(tmp_path / "nope")]) == EXIT_DATA


class TestTrain:
    @pytest.fixture
    def prepared(self, tmp_path, rng):
        src = tmp_path / "raw" / "scene"
        src.mkdir(parents=True)
        for i in range(8):
            wav(src / f"r{i}.wav", rng, frames=3000)
        assert main(["prepare", "--input", str(tmp_path / "raw"), "--out", str(tmp_path / "prep")]) == EXIT_OK
        (tmp_path / "cfg.txt").write_text(TRAIN_TEXT)
        return tmp_path / "prep" / "manifest.tsv", tmp_path / "cfg.txt"

    def test_train_and_steps_zero(self, prepared, tmp_path):
        manifest, cfg = prepared
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(manifest), "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        curve = read_curve(out / "curve.csv")
        assert [r.step for r in curve] == [0, 1, 2]
        zero = tmp_path / "zero"
        assert main(["train", "--manifest", str(manifest), "--config", str(cfg), "--steps", "0",
                     "--out", str(zero)]) == EXIT_OK
        resumed = tmp_path / "resumed"
        assert main(["train", "--manifest", str(manifest), "--config", str(cfg), "--steps", "0",
                     "--init", str(zero / "generator.ambc"), "--out", str(resumed)]) == EXIT_OK
        a = ModelCheckpoint.load(zero / "generator.ambc")
        b = ModelCheckpoint.load(resumed / "generator.ambc")
        assert all(np.array_equal(a.tensors[k].numpy(), b.tensors[k].numpy()) for k in a.tensors)
        assert TrainConfig.from_text(a.config_text).steps == 0

    def test_compare_inits(self, prepared, tmp_path, capsys):
        manifest, cfg = prepared
        out = tmp_path / "cmp"
        assert main(["compare-inits", "--manifest", str(manifest), "--config", str(cfg), "--mono-steps", "1",
                     "--out", str(out)]) == EXIT_OK
        a, b = read_curve(out / "transfer" / "curve.csv"), read_curve(out / "random" / "curve.csv")
        assert [r.step for r in a] == [r.step for r in b] == [0, 1, 2]
        assert (out / "mono" / "generator.ambc").exists()
        assert "transfer" in capsys.readouterr().out

    def test_bad_config(self, prepared, tmp_path):
        manifest, _ = prepared
        (tmp_path / "bad.txt").write_text("nonsense = 1\n")
        assert main(["train", "--manifest", str(manifest), "--config", str(tmp_path / "bad.txt")]) == EXIT_DATA


class TestCodecCommands:
    def test_encode_decode(self, tmp_path, rng, checkpoint, capsys):
        src = wav(tmp_path / "in.wav", rng, frames=1001)
        enc = tmp_path / "in.ambs"
        assert main(["encode", str(src), "--checkpoint", str(checkpoint), "--out", str(enc)]) == EXIT_OK
        err = capsys.readouterr().err
        stream = EncodedStream.load(enc)
        assert f"bitrate {bitrate_of(stream.header):.3f} bps" in err
        out = tmp_path / "out.wav"
        assert main(["decode", str(enc), "--checkpoint", str(checkpoint), "--out", str(out)]) == EXIT_OK
        back = read_wav(out)
        assert (back.n_channels, back.n_frames) == (16, 1001)

    def test_digest_mismatch(self, tmp_path, rng, checkpoint, capsys):
        src = wav(tmp_path / "in.wav", rng, frames=300)
        enc = tmp_path / "in.ambs"
        assert main(["encode", str(src), "--checkpoint", str(checkpoint), "--out", str(enc)]) == EXIT_OK
        other = tmp_path / "other.ambc"
        save_checkpoint(build_generator(SMALL, seed=1), other)
        assert main(["decode", str(enc), "--checkpoint", str(other)]) == EXIT_DATA
        assert "DigestMismatchError" in capsys.readouterr().err

    def test_wrong_channels(self, tmp_path, rng, checkpoint):
        src = wav(tmp_path / "in.wav", rng, channels=9, frames=300)
        assert main(["encode", str(src), "--checkpoint", str(checkpoint)]) == EXIT_DATA

    def test_missing_checkpoint(self, tmp_path, rng):
        src = wav(tmp_path / "in.wav", rng, frames=300)
        assert main(["encode", str(src), "--checkpoint", str(tmp_path / "none.ambc")]) == EXIT_DATA


class TestEval:
    KEYS = {"sample_rate", "n_channels", "n_frames", "mel_distance", "covariance_loss", "snr_db_per_channel"}

    def test_identical_files(self, tmp_path, rng, capsys):
        a = wav(tmp_path / "a.wav", rng, frames=4000)
        assert main(["eval", str(a), str(a)]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert set(report) == self.KEYS
        assert report["mel_distance"] == 0.0
        assert report["covariance_loss"] == 0.0

    def test_degraded_and_anchor(self, tmp_path, rng):
        n = 44100
        t = np.arange(n) / 44100
        tone = np.tile(0.3 * np.sin(2 * np.pi * 10000 * t), (16, 1))
        a = tmp_path / "a.wav"
        write_wav(MultichannelWave(44100, tone), a)
        b = wav(tmp_path / "b.wav", rng, frames=n)
        anchor = tmp_path / "anchor.wav"
        report_path = tmp_path / "r.json"
        assert main(["eval", str(a), str(b), "--lowpass-anchor", str(anchor), "--out", str(report_path)]) == EXIT_OK
        report = json.loads(report_path.read_text())
        assert set(report) == self.KEYS | {"lowpass_anchor"}
        assert report["mel_distance"] > 0
        assert len(report["snr_db_per_channel"]) == 16
        low = read_wav(anchor).samples[0][4000:-4000]
        # at least 60 dB down at 10 kHz (16-bit output may round it to silence)
        assert np.sqrt(np.mean(low ** 2)) <= 1e-3 * np.sqrt(np.mean(tone[0] ** 2))

    def test_shape_mismatch(self, tmp_path, rng):
        a = wav(tmp_path / "a.wav", rng, frames=400)
        b = wav(tmp_path / "b.wav", rng, frames=300)
        assert main(["eval", str(a), str(b)]) == EXIT_DATA


class TestRender:
    def test_714_twelve_files(self, tmp_path, rng, capsys):
        src = wav(tmp_path / "in.wav", rng, frames=200)
        out = tmp_path / "spk"
        assert main(["render", str(src), "--layout", "7.1.4", "--out", str(out)]) == EXIT_OK
        files = sorted(out.glob("*.wav"))
        assert len(files) == 12
        lfe = [f for f in files if "LFE" in f.name]
        assert len(lfe) == 1 and not read_wav(lfe[0]).samples.any()

    def test_zero_input(self, tmp_path):
        src = tmp_path / "z.wav"
        write_wav(MultichannelWave(44100, np.zeros((16, 50))), src)
        out = tmp_path / "spk"
        assert main(["render", str(src), "--layout", "cube8", "--out", str(out)]) == EXIT_OK
        assert all(not read_wav(f).samples.any() for f in out.glob("*.wav"))

    def test_stereo_zeroth_order(self, tmp_path):
        src = tmp_path / "w.wav"
        write_wav(MultichannelWave(44100, np.full((1, 50), 0.25)), src)
        out = tmp_path / "spk"
        assert main(["render", str(src), "--layout", "stereo", "--out", str(out)]) == EXIT_OK
        left, right = (read_wav(f).samples for f in sorted(out.glob("*.wav")))
        np.testing.assert_array_equal(left, right)

    def test_unknown_layout(self, tmp_path, rng):
        src = wav(tmp_path / "in.wav", rng, frames=50)
        assert main(["render", str(src), "--layout", "5.1"]) == EXIT_DATA


def test_grad_check_command(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert main(["grad-check", "--instances", "2", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.count("PASS") == 7
    assert len(json.loads(out.read_text())) == 7
