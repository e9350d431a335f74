import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticast.spectrogram import (
    LOG_FLOOR, AudioFormatError, Spectrogram, Waveform, compress_avgpool, compress_fshift,
    load_wav, mel_centers, mel_filterbank, mel_spectrogram, pad_frames, patchify, read_spec,
    save_wav, unpatchify, write_spec)

SR = 16000


def _count_windows(n_samples, window, hop):
    count, start = 0, 0
    while start + window <= n_samples:
        count += 1
        start += hop
    return count


def _write_raw_wav(path, data: bytes, channels=1, width=2, rate=SR):
    import wave
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(data)


class TestLoadWav:
    def test_silence(self, tmp_path):
        _write_raw_wav(tmp_path / "s.wav", b"\x00\x00" * SR)
        w = load_wav(tmp_path / "s.wav")
        assert w.sample_rate == SR
        assert w.samples.shape == (SR,)
        assert not w.samples.any()

    def test_full_scale_square(self, tmp_path):
        pcm = np.tile(np.array([32767, -32768], dtype="<i2"), 100)
        _write_raw_wav(tmp_path / "sq.wav", pcm.tobytes())
        w = load_wav(tmp_path / "sq.wav")
        np.testing.assert_allclose(np.abs(w.samples), 1.0, atol=1 / 32768)
        assert np.all(np.sign(w.samples) == np.tile([1, -1], 100))

    def test_ten_seconds(self, tmp_path):
        save_wav(tmp_path / "t.wav", Waveform(np.zeros(10 * SR)))
        assert load_wav(tmp_path / "t.wav").samples.size == 160000

    def test_rejects_stereo(self, tmp_path):
        _write_raw_wav(tmp_path / "st.wav", b"\x00\x00" * 200, channels=2)
        with pytest.raises(AudioFormatError, match="mono"):
            load_wav(tmp_path / "st.wav")

    def test_rejects_8bit(self, tmp_path):
        _write_raw_wav(tmp_path / "b.wav", b"\x80" * 200, width=1)
        with pytest.raises(AudioFormatError, match="16-bit"):
            load_wav(tmp_path / "b.wav")

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "g.wav").write_bytes(b"not a wav file")
        with pytest.raises(AudioFormatError):
            load_wav(tmp_path / "g.wav")

    def test_roundtrip_quantisation(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, 1000)
        save_wav(tmp_path / "r.wav", Waveform(x))
        np.testing.assert_allclose(load_wav(tmp_path / "r.wav").samples, x, atol=1 / 32768)


class TestMelSpectrogram:
    def test_ten_second_geometry(self):
        s = mel_spectrogram(Waveform(np.zeros(10 * SR)))
        assert s.n_mels == 128
        assert s.n_frames == _count_windows(160000, 400, 160) == 998
        assert 998 <= s.n_frames <= 1024
        assert s.frame_shift_ms == 10

    def test_silence_is_log_floor(self):
        s = mel_spectrogram(Waveform(np.zeros(SR)))
        np.testing.assert_array_equal(s.energies, np.log(LOG_FLOOR))

    def test_sine_peak_matches_dft_oracle(self):
        t = np.arange(SR) / SR
        x = np.sin(2 * np.pi * 1000.0 * t)
        s = mel_spectrogram(Waveform(x))
        # oracle: brute-force DFT of one Hann window, same filters, no framing
        n_fft = 512
        seg = x[8000:8400] * np.hanning(400)
        k = np.arange(n_fft // 2 + 1)[:, None]
        n = np.arange(400)[None, :]
        spectrum = np.abs((seg * np.exp(-2j * np.pi * k * n / n_fft)).sum(1)) ** 2
        oracle_bin = int(np.argmax(mel_filterbank(128, n_fft, SR) @ spectrum))
        nearest = int(np.argmin(np.abs(mel_centers(128, SR) - 1000.0)))
        peaks = np.argmax(s.energies, axis=0)
        assert oracle_bin == nearest
        assert np.all(peaks == oracle_bin)

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            mel_spectrogram(Waveform(np.zeros(399)))

    def test_waveform_validation(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(0))
        with pytest.raises(ValueError):
            Waveform(np.zeros(10), sample_rate=0)


class TestCompressFshift:
    def test_identity_factor(self):
        w = Waveform(np.random.default_rng(1).standard_normal(SR))
        np.testing.assert_array_equal(compress_fshift(w, 1.0).energies, mel_spectrogram(w).energies)

    def test_factor_four_counts_windows(self):
        w = Waveform(np.zeros(10 * SR))
        s1, s4 = mel_spectrogram(w), compress_fshift(w, 4.0)
        assert s4.n_frames == _count_windows(160000, 400, 640) == 250
        assert abs(s4.n_frames - s1.n_frames / 4) < 2

    def test_shift_recorded(self):
        assert compress_fshift(Waveform(np.zeros(SR)), 2.0).frame_shift_ms == 20

    def test_rejects_expansion(self):
        with pytest.raises(ValueError):
            compress_fshift(Waveform(np.zeros(SR)), 0.5)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(1.0, 4.0), st.floats(1.0, 4.0), st.integers(400, 40000))
    def test_monotone_frame_count(self, c1, c2, n):
        c1, c2 = sorted((c1, c2))
        w = Waveform(np.zeros(n))
        assert compress_fshift(w, c1).n_frames >= compress_fshift(w, c2).n_frames


class TestAvgPool:
    def test_identity(self):
        s = Spectrogram(np.random.default_rng(2).standard_normal((8, 13)))
        np.testing.assert_array_equal(compress_avgpool(s, 1).energies, s.energies)

    def test_constant(self):
        out = compress_avgpool(Spectrogram(np.full((4, 11), 3.5)), 3)
        assert out.energies.shape == (4, 3)
        np.testing.assert_array_equal(out.energies, 3.5)

    def test_ramp_pairs(self):
        s = Spectrogram(np.tile(np.arange(10.0), (128, 1)))
        out = compress_avgpool(s, 2)
        assert out.energies.shape == (128, 5)
        np.testing.assert_array_equal(out.energies[0], [0.5, 2.5, 4.5, 6.5, 8.5])
        assert out.frame_shift_ms == 20

    @pytest.mark.parametrize("c", [0, 5, 1.5, "2", True])
    def test_rejects_bad_factor(self, c):
        with pytest.raises(ValueError):
            compress_avgpool(Spectrogram(np.zeros((2, 8))), c)

    def test_rejects_too_few_frames(self):
        with pytest.raises(ValueError):
            compress_avgpool(Spectrogram(np.zeros((2, 3))), 4)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(4, 60), st.integers(0, 2 ** 31))
    def test_mass_preserved(self, c, frames, seed):
        e = np.random.default_rng(seed).standard_normal((6, frames))
        out = compress_avgpool(Spectrogram(e), c)
        keep = c * (frames // c)
        np.testing.assert_allclose(out.energies.sum() * c, e[:, :keep].sum(), rtol=1e-6, atol=1e-9)


class TestPatchify:
    def test_full_clip(self):
        g = patchify(Spectrogram(np.zeros((128, 1024))))
        assert len(g) == 512 and g.patches.shape == (512, 16, 16)

    def test_truncates_time(self):
        g = patchify(Spectrogram(np.zeros((128, 1030))))
        assert len(g) == 512 and g.grid_shape == (8, 64)

    def test_single_column(self):
        g = patchify(Spectrogram(np.zeros((128, 16))))
        assert len(g) == 8
        assert g.coords.tolist() == [[a, 0] for a in range(8)]

    def test_time_major_order(self):
        g = patchify(Spectrogram(np.zeros((32, 48))))
        assert g.coords.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1], [0, 2], [1, 2]]

    def test_rejects_indivisible_mels(self):
        with pytest.raises(ValueError, match="divisible"):
            patchify(Spectrogram(np.zeros((100, 64))))

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(1, 40), st.integers(0, 2 ** 31))
    def test_lossless_on_retained_region(self, p, nf, frames, seed):
        e = np.random.default_rng(seed).standard_normal((p * nf, frames + p - 1))
        g = patchify(Spectrogram(e), p)
        keep = (e.shape[1] // p) * p
        np.testing.assert_array_equal(unpatchify(g), e[:, :keep])
        assert len({tuple(c) for c in g.coords}) == len(g)

    def test_avgpool_identity_commutes(self):
        s = Spectrogram(np.random.default_rng(3).standard_normal((32, 70)))
        a, b = patchify(compress_avgpool(s, 1)), patchify(s)
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.coords, b.coords)


class TestPadAndSpecFile:
    def test_pad_frames(self):
        s = pad_frames(Spectrogram(np.ones((4, 998))), 256)
        assert s.n_frames == 1024
        assert np.all(s.energies[:, 998:] == 0) and np.all(s.energies[:, :998] == 1)

    def test_spec1_layout(self, tmp_path):
        e = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_spec(tmp_path / "a.spec", Spectrogram(e, 12.0))
        raw = (tmp_path / "a.spec").read_bytes()
        assert raw[:5] == b"SPEC1"
        assert struct.unpack("<III", raw[5:17]) == (2, 3, 12000)
        assert np.frombuffer(raw[17:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    def test_spec1_bit_exact_roundtrip(self, tmp_path):
        e = np.random.default_rng(4).standard_normal((16, 37)).astype(np.float32)
        e[0, 0] = np.float32(-0.0)
        write_spec(tmp_path / "b.spec", Spectrogram(e, 40.0))
        s = read_spec(tmp_path / "b.spec")
        assert s.energies.tobytes() == e.tobytes()
        assert s.frame_shift_ms == 40.0

    def test_spec1_rejects_truncated(self, tmp_path):
        write_spec(tmp_path / "c.spec", Spectrogram(np.zeros((2, 2), np.float32)))
        data = (tmp_path / "c.spec").read_bytes()
        (tmp_path / "c.spec").write_bytes(data[:-1])
        with pytest.raises(ValueError):
            read_spec(tmp_path / "c.spec")
