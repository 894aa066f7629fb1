import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.io import wavfile

from ambicodec.audio_io import (DatasetManifest, MalformedHeaderError, MultichannelWave, TruncatedDataError,
                                UnsupportedCodecError, deinterleave, frame_excerpts, interleave, quantize, read_wav,
                                split_dataset, write_wav)


def pcm16_file(path, ints: np.ndarray, rate=44100):
    """[channels, frames] int16 written by scipy (independent writer)."""
    wavfile.write(path, rate, ints.T.astype(np.int16))


class TestReadWav:
    def test_16bit_scaling(self, tmp_path):
        p = tmp_path / "a.wav"
        pcm16_file(p, np.array([[32767, -32768, 0, 1]]))
        w = read_wav(p)
        np.testing.assert_array_equal(w.samples[0], [32767 / 32768, -1.0, 0.0, 1 / 32768])

    def test_deinterleaves_channels(self, tmp_path, rng):
        ints = rng.integers(-32768, 32768, (16, 50))
        p = tmp_path / "m.wav"
        pcm16_file(p, ints)
        w = read_wav(p)
        assert (w.n_channels, w.n_frames, w.sample_rate) == (16, 50, 44100)
        np.testing.assert_array_equal(w.samples * 32768, ints)

    def test_float32(self, tmp_path, rng):
        x = rng.uniform(-1, 1, (3, 40)).astype(np.float32)
        p = tmp_path / "f.wav"
        wavfile.write(p, 48000, x.T)
        w = read_wav(p)
        assert w.sample_rate == 48000
        np.testing.assert_array_equal(w.samples, x.astype(np.float64))

    def test_24bit_matches_scipy(self, tmp_path, rng):
        x = rng.uniform(-1, 1, (4, 33))
        p = tmp_path / "w24.wav"
        write_wav(MultichannelWave(44100, x), p, 24)
        _, raw = wavfile.read(p)  # int32 with the 24-bit value in the top bytes
        np.testing.assert_array_equal(read_wav(p).samples * (1 << 23), raw.T >> 8)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.wav"
        p.write_bytes(b"RIFX" + b"\0" * 40)
        with pytest.raises(MalformedHeaderError):
            read_wav(p)

    def test_unsupported_codec(self, tmp_path):
        p = tmp_path / "a.wav"
        pcm16_file(p, np.zeros((1, 4), dtype=int))
        data = bytearray(p.read_bytes())
        struct.pack_into("<H", data, 20, 2)  # ADPCM
        p.write_bytes(bytes(data))
        with pytest.raises(UnsupportedCodecError):
            read_wav(p)

    def test_truncated_data(self, tmp_path):
        p = tmp_path / "a.wav"
        pcm16_file(p, np.zeros((2, 100), dtype=int))
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(TruncatedDataError):
            read_wav(p)

    def test_errors_are_distinct_types(self):
        assert len({MalformedHeaderError, UnsupportedCodecError, TruncatedDataError}) == 3
        assert not issubclass(MalformedHeaderError, TruncatedDataError)


class TestWriteWav:
    def test_quantization_rules(self):
        np.testing.assert_array_equal(quantize(np.array([0.0, 1.0, -1.0, 2.0, -3.0]), 16),
                                      [0, 32767, -32768, 32767, -32768])
        # half away from zero
        np.testing.assert_array_equal(quantize(np.array([0.5, -0.5, 1.5, -1.5]) / 32768, 16), [1, -1, 2, -2])

    @pytest.mark.parametrize("bits", [16, 24])
    def test_round_trip_bit_exact(self, tmp_path, rng, bits):
        full = 1 << (bits - 1)
        ints = rng.integers(-full, full, (16, 300))
        p = tmp_path / "r.wav"
        write_wav(MultichannelWave(44100, ints / full), p, bits)
        back = read_wav(p)
        np.testing.assert_array_equal(back.samples * full, ints)
        write_wav(back, tmp_path / "again.wav", bits)
        assert (tmp_path / "again.wav").read_bytes() == p.read_bytes()

    def test_readable_by_scipy(self, tmp_path, rng):
        x = rng.uniform(-1, 1, (2, 64))
        p = tmp_path / "s.wav"
        write_wav(MultichannelWave(22050, x), p, 16)
        rate, raw = wavfile.read(p)
        assert rate == 22050
        np.testing.assert_array_equal(raw.T, quantize(x, 16))

    def test_rejects_other_depths(self, tmp_path):
        with pytest.raises(ValueError):
            write_wav(MultichannelWave(44100, np.zeros((1, 2))), tmp_path / "x.wav", 8)

    def test_wave_validation(self):
        with pytest.raises(ValueError):
            MultichannelWave(44100, np.array([[np.inf]]))


class TestInterleave:
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20),
                      elements=st.floats(-1, 1)))
    def test_round_trip(self, x):
        np.testing.assert_array_equal(deinterleave(interleave(x), x.shape[0]), x)

    def test_frame_major_layout(self):
        np.testing.assert_array_equal(interleave(np.array([[1, 2], [3, 4]])), [1, 3, 2, 4])


class TestFrameExcerpts:
    def test_counts(self):
        ten = MultichannelWave(1000, np.zeros((1, 10000)))
        assert len(frame_excerpts(ten, 5, 5)) == 2
        short = MultichannelWave(1000, np.zeros((1, 4900)))
        assert frame_excerpts(short, 5) == []

    def test_excerpt_length_at_44100(self):
        w = MultichannelWave(44100, np.zeros((2, 44100 * 11)))
        ex = frame_excerpts(w, 5.0)
        assert [e.n_frames for e in ex] == [220500, 220500]

    def test_contents_are_contiguous(self):
        w = MultichannelWave(10, np.arange(30, dtype=float)[None])
        ex = frame_excerpts(w, 1.0, 0.5)
        np.testing.assert_array_equal(ex[1].samples[0], np.arange(5, 15))

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            frame_excerpts(MultichannelWave(10, np.zeros((1, 5))), 0)


def scenes(n_per_scene, n_scenes=3):
    return {f"scene{s}": [f"scene{s}/rec{i:02d}.wav" for i in range(n_per_scene)] for s in range(n_scenes)}


class TestSplit:
    @pytest.mark.parametrize("n,train", [(8, 7), (16, 14), (9, 7), (3, 2)])
    def test_seven_eighths(self, n, train):
        m = split_dataset(scenes(n), seed=1)
        for s in m.scenes:
            assert len(m.train[s]) == train
            assert len(m.heldout[s]) == n - train

    def test_deterministic(self):
        assert split_dataset(scenes(16), 5) == split_dataset(scenes(16), 5)

    def test_seed_changes_split(self):
        assert split_dataset(scenes(16), 5).heldout != split_dataset(scenes(16), 6).heldout

    @given(st.integers(1, 40), st.integers(1, 4), st.integers(0, 1000))
    def test_partition_disjoint_and_exhaustive(self, n, k, seed):
        src = scenes(n, k)
        m = split_dataset(src, seed)
        for s, files in src.items():
            assert not set(m.train[s]) & set(m.heldout[s])
            assert sorted(m.train[s] + m.heldout[s]) == sorted(files)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_dataset({})

    def test_manifest_tsv_round_trip(self, tmp_path):
        m = split_dataset(scenes(8), 0)
        m.save(tmp_path / "manifest.tsv")
        lines = (tmp_path / "manifest.tsv").read_text().splitlines()
        assert len(lines) == 24
        assert all(len(line.split("\t")) == 3 and line.split("\t")[2] in ("train", "heldout") for line in lines)
        back = DatasetManifest.load(tmp_path / "manifest.tsv")
        assert back.files("train") == m.files("train")
        assert back.files("heldout") == m.files("heldout")

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("scene\tfile\tvalidation\n")
        with pytest.raises(ValueError):
            DatasetManifest.load(tmp_path / "bad.tsv")
