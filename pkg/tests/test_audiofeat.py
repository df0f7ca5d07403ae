import numpy as np
import pytest

from avtlab import audiofeat as af
from avtlab.errors import InputError, ShapeError


def dft_oracle(frame):
    """Direct O(n^2) one-sided DFT."""
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    return basis @ frame


class TestFFT:
    def test_dc_frame(self):
        spec = af.fft_real(np.ones(1024))
        mags = np.abs(spec)
        assert abs(mags[0] - 1024.0) < 1e-9
        assert np.max(mags[1:]) < 1e-9

    def test_unit_impulse_flat(self):
        frame = np.zeros(1024)
        frame[0] = 1.0
        assert np.max(np.abs(np.abs(af.fft_real(frame)) - 1.0)) < 1e-12

    def test_cosine_bin(self):
        n = np.arange(1024)
        spec = af.fft_real(np.cos(2 * np.pi * 8 * n / 1024))
        mags = np.abs(spec)
        assert abs(mags[8] - 512.0) < 1e-9
        others = np.delete(mags, 8)
        assert np.max(others) < 1e-9

    def test_matches_direct_dft(self):
        rng = np.random.default_rng(0)
        for _ in range(4):
            frame = rng.uniform(-1, 1, 1024)
            assert np.max(np.abs(af.fft_real(frame) - dft_oracle(frame))) < 1e-9

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            af.fft_real(np.ones(512))

    def test_parseval_windowed_frame(self):
        rng = np.random.default_rng(1)
        frame = rng.uniform(-1, 1, 1024) * af.hann_window()
        spec = af.fft_real(frame)
        power = np.abs(spec) ** 2
        weights = np.full(513, 2.0)
        weights[0] = weights[-1] = 1.0
        lhs = np.sum(frame ** 2)
        rhs = (weights * power).sum() / 1024.0
        assert abs(lhs - rhs) < 1e-9 * max(1.0, lhs)


class TestSTFT:
    def test_canonical_clip_frame_count(self):
        clip = np.zeros(160000)
        assert af.stft_power(clip).shape == (401, 513)

    def test_single_frame_uncentered(self):
        clip = np.ones(1024)
        assert af.stft_power(clip, center=False).shape == (1, 513)

    def test_silence_is_zero(self):
        assert not np.any(af.stft_power(np.zeros(4000)))

    def test_too_short(self):
        with pytest.raises(InputError):
            af.stft_power(np.zeros(100))


class TestLogMel:
    def test_silence_hits_floor(self):
        feats = af.clip_features(np.zeros(160000))
        assert np.allclose(feats, np.log(1e-10), atol=1e-12)

    def test_canonical_shape(self):
        rng = np.random.default_rng(2)
        feats = af.clip_features(rng.uniform(-0.5, 0.5, 160000))
        assert feats.shape == (400, 64)
        assert np.all(np.isfinite(feats))

    def test_tone_localizes_to_correct_mel_bin(self):
        centers = af.mel_center_freqs()
        t = np.arange(160000) / 16000.0
        for tone_hz in (350.0, 1100.0, 3000.0):
            clip = 0.5 * np.sin(2 * np.pi * tone_hz * t)
            feats = af.clip_features(clip)
            hot = int(np.argmax(feats.mean(axis=0)))
            expected = int(np.argmin(np.abs(centers - tone_hz)))
            assert abs(hot - expected) <= 1

    def test_filterbank_covers_interior_bins(self):
        fb = af.mel_filterbank()
        assert np.all(fb >= 0)
        centers = af.mel_center_freqs()
        bin_freqs = np.arange(513) * (16000 / 1024)
        interior = (bin_freqs >= centers[0]) & (bin_freqs <= centers[-1])
        assert np.all(fb[:, interior].sum(axis=0) > 0)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            af.log_mel(np.zeros((10, 257)), af.mel_filterbank())

    def test_pipeline_determinism(self):
        rng = np.random.default_rng(3)
        clip = rng.uniform(-1, 1, 160000)
        a = af.clip_features(clip)
        b = af.clip_features(clip.copy())
        assert np.array_equal(a, b)


class TestNormalizer:
    def test_constant_corpus_maps_to_zero(self):
        corpus = [np.full((400, 64), 3.7)]
        norm = af.fit_normalizer(corpus)
        assert np.allclose(norm.apply(corpus[0]), 0.0)
        assert norm.clamped_dims == list(range(64))

    def test_hand_statistics(self):
        corpus = [np.full((2, 3), 1.0), np.full((2, 3), 3.0)]
        norm = af.fit_normalizer(corpus)
        assert np.allclose(norm.mean, 2.0)
        assert np.allclose(norm.std, 1.0)  # population variance
        assert np.allclose(norm.apply(corpus[0]), -1.0)
        assert np.allclose(norm.apply(corpus[1]), 1.0)

    def test_refit_on_normalized_corpus_is_identity(self):
        rng = np.random.default_rng(4)
        corpus = [rng.normal(2.0, 3.0, (50, 64)) for _ in range(5)]
        norm = af.fit_normalizer(corpus)
        renorm = af.fit_normalizer([norm.apply(c) for c in corpus])
        assert np.max(np.abs(renorm.mean)) < 1e-9
        assert np.max(np.abs(renorm.std - 1.0)) < 1e-6

    def test_empty_corpus(self):
        with pytest.raises(InputError):
            af.fit_normalizer([])


class TestWav:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        clip = rng.uniform(-0.9, 0.9, 16000)
        path = tmp_path / "clip.wav"
        af.write_wav(path, clip)
        back, rate = af.read_wav(path)
        assert rate == 16000
        assert back.shape == clip.shape
        assert np.max(np.abs(back - clip)) < 1.0 / 32767

    def test_write_is_deterministic(self, tmp_path):
        clip = np.sin(np.linspace(0, 100, 16000))
        p1, p2 = tmp_path / "a.wav", tmp_path / "b.wav"
        af.write_wav(p1, clip)
        af.write_wav(p2, clip)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resample_linear(self):
        t8k = np.arange(8000) / 8000.0
        clip = np.sin(2 * np.pi * 100 * t8k)
        up = af.resample_linear(clip, 8000, 16000)
        assert len(up) == 16000
        t16k = np.arange(16000) / 16000.0
        # last sample extrapolates past the source grid and is clamped
        assert np.max(np.abs(up - np.sin(2 * np.pi * 100 * t16k))[:-1]) < 1e-3
