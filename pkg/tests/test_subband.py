import numpy as np
import pytest
from scipy.signal import lfilter

from subsep.subband import (
    FilterBank,
    PrototypeFilter,
    SubbandFrames,
    Waveform,
    design_prototype,
)


def snr_db(reference, estimate):
    err = estimate - reference
    return 10 * np.log10(np.sum(reference**2) / np.sum(err**2))


@pytest.fixture(scope="module")
def bank64():
    return FilterBank(channels=64, overlap_factor=10)


@pytest.fixture(scope="module")
def bank16():
    return FilterBank(channels=16, overlap_factor=10)


def ar_signal(n, seed, pole=0.95):
    # speech-like spectral tilt: white noise through a one-pole filter
    noise = np.random.default_rng(seed).standard_normal(n)
    sig = lfilter([1.0], [1.0, -pole], noise)
    return 0.5 * sig / np.max(np.abs(sig))


class TestPrototype:
    def test_length(self):
        proto = design_prototype(64, 10)
        assert proto.taps.size == 640

    def test_deterministic(self):
        a = design_prototype(64, 10)
        b = design_prototype(64, 10)
        assert np.array_equal(a.taps, b.taps)

    def test_symmetric(self):
        taps = design_prototype(64, 10).taps
        assert np.allclose(taps, taps[::-1], atol=1e-12)

    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError):
            design_prototype(63, 10)
        with pytest.raises(ValueError):
            design_prototype(0, 10)
        with pytest.raises(ValueError):
            design_prototype(64, 4)

    def test_prototype_roundtrip_quality(self, bank64):
        w = np.random.default_rng(3).standard_normal(16000)
        rec = bank64.synthesize(bank64.analyze(w))
        assert snr_db(w, rec.samples) >= 60.0


class TestAnalyze:
    def test_zeros_to_zeros(self, bank64):
        frames = bank64.analyze(np.zeros(6400))
        assert np.all(frames.coeffs == 0.0)

    def test_empty_rejected(self, bank64):
        with pytest.raises(ValueError):
            bank64.analyze(np.array([]))

    def test_nonfinite_rejected(self, bank64):
        with pytest.raises(ValueError):
            bank64.analyze(np.array([0.0, np.nan, 1.0]))

    def test_frame_geometry(self, bank64):
        frames = bank64.analyze(np.random.default_rng(0).standard_normal(6400))
        assert frames.channels == 64
        assert frames.frame_stride_samples == 64
        # frame count covers the signal plus the boundary padding
        assert frames.n_frames == 6400 // 64 + 2 * (bank64.boundary_pad // 64)

    def test_linearity(self, bank64):
        rng = np.random.default_rng(7)
        w1 = rng.standard_normal(6400)
        w2 = rng.standard_normal(6400)
        a, b = 0.37, -1.91
        lhs = bank64.analyze(a * w1 + b * w2).coeffs
        rhs = a * bank64.analyze(w1).coeffs + b * bank64.analyze(w2).coeffs
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_pads_to_frame_multiple(self, bank64):
        w = np.random.default_rng(1).standard_normal(1000)  # not a multiple of 64
        frames = bank64.analyze(w)
        assert frames.signal_samples == 1000
        rec = bank64.synthesize(frames)
        assert len(rec) == 1000


class TestRoundTrip:
    def test_white_noise_snr(self, bank64):
        for seed in range(10):
            w = np.random.default_rng(seed).standard_normal(16000)
            w /= np.max(np.abs(w))
            rec = bank64.synthesize(bank64.analyze(Waveform(w)))
            assert snr_db(w, rec.samples) >= 60.0

    def test_sine_440hz_snr(self, bank64):
        t = np.arange(16000) / 16000
        w = 0.1 * np.sin(2 * np.pi * 440.0 * t)  # -20 dBFS
        rec = bank64.synthesize(bank64.analyze(Waveform(w)))
        assert snr_db(w, rec.samples) >= 60.0

    def test_ar_signal_snr(self, bank64):
        w = ar_signal(16000, seed=11)
        rec = bank64.synthesize(bank64.analyze(Waveform(w)))
        assert snr_db(w, rec.samples) >= 60.0

    def test_small_bank_roundtrip(self, bank16):
        w = np.random.default_rng(5).standard_normal(8000)
        rec = bank16.synthesize(bank16.analyze(w))
        assert snr_db(w, rec.samples) >= 60.0

    def test_preserves_sample_rate_and_length(self, bank64):
        w = Waveform(np.random.default_rng(2).standard_normal(12800), sample_rate=22050)
        rec = bank64.synthesize(bank64.analyze(w))
        assert rec.sample_rate == 22050
        assert len(rec) == 12800

    def test_synthesize_zeros(self, bank64):
        frames = SubbandFrames(coeffs=np.zeros((20, 64)), channels=64)
        rec = bank64.synthesize(frames)
        assert np.all(rec.samples == 0.0)
        assert len(rec) == 20 * 64


class TestEnergy:
    def test_white_noise_energy_preserved(self, bank64):
        for seed in range(10):
            w = Waveform(np.random.default_rng(100 + seed).standard_normal(16000))
            frames = bank64.analyze(w)
            ratio_db = 10 * np.log10(frames.energy() / w.energy())
            assert abs(ratio_db) <= 0.1

    def test_per_channel_variance(self, bank64):
        w = np.random.default_rng(42).standard_normal(64 * 4096)
        frames = bank64.analyze(w)
        # drop boundary frames: padding zeros bias the variance estimate
        edge = bank64.boundary_pad // 64
        var = frames.coeffs[edge:-edge].var(axis=0)
        assert np.all(var > 0.9) and np.all(var < 1.1)


class TestRuntime:
    def test_analysis_synthesis_under_budget(self, bank64):
        import time

        w = Waveform(np.random.default_rng(0).standard_normal(16000))
        t0 = time.perf_counter()
        frames = bank64.analyze(w)
        bank64.synthesize(frames)
        assert time.perf_counter() - t0 < 1.0
