import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rirgen.config import RIR_SAMPLES, SAMPLE_RATE, StftConfig
from rirgen.metrics import (
    InsufficientDecayError,
    banded_param_error,
    c50,
    corpus_median,
    drr,
    edr,
    edr_error,
    energy_decay_curve,
    evaluate_pair,
    lsd,
    mss,
    t30,
)


def exp_envelope(rt60_s, n=RIR_SAMPLES, fs=SAMPLE_RATE):
    """Amplitude envelope giving a 60 dB energy decay per rt60 seconds."""
    return np.exp(-6.9078 * np.arange(n) / (rt60_s * fs))


def noisy_decay(rt60_s, seed=0, n=RIR_SAMPLES, fs=SAMPLE_RATE):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n) * exp_envelope(rt60_s, n, fs)


class TestLsd:
    def test_identity(self):
        h = noisy_decay(0.5, seed=1)
        assert lsd(h, h) == 0.0

    def test_uniform_scaling(self):
        h = noisy_decay(0.5, seed=2)
        assert lsd(2.0 * h, h) == pytest.approx(20.0 * np.log10(2.0), abs=1e-4)

    def test_per_bin_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal(4096), rng.standard_normal(4096)
        expected = np.mean(
            np.abs(
                20.0 * np.log10(np.abs(np.fft.rfft(a)) + 1e-8)
                - 20.0 * np.log10(np.abs(np.fft.rfft(b)) + 1e-8)
            )
        )
        assert lsd(a, b) == pytest.approx(expected, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            lsd(np.zeros(8), np.zeros(9))


class TestEdr:
    def test_identity(self):
        h = noisy_decay(0.4, seed=4)
        assert edr_error(h, h) == 0.0

    def test_nonincreasing_in_time(self):
        h = noisy_decay(0.6, seed=5)
        relief = edr(h)
        assert np.all(np.diff(relief, axis=1) <= 1e-12)

    def test_decay_slope_matches_rt60(self):
        # single-tone decaying sinusoid: the occupied band's EDR slope in dB/s
        # must be -60 / RT60
        fs = SAMPLE_RATE
        rt60 = 0.5
        n = RIR_SAMPLES
        t = np.arange(n) / fs
        h = np.sin(2 * np.pi * 1000.0 * t) * exp_envelope(rt60, n, fs)
        cfg = StftConfig()
        relief = edr(h, cfg)
        bin_hz = fs / cfg.fft_size
        row = int(round(1000.0 / bin_hz))
        curve = 10.0 * np.log10(relief[row] + 1e-30)
        curve -= curve[0]
        frames = np.nonzero(curve >= -40.0)[0]
        times = frames * cfg.hop / fs
        slope = np.polyfit(times, curve[frames], 1)[0]
        assert slope == pytest.approx(-60.0 / rt60, rel=0.05)

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            edr_error(noisy_decay(0.3), np.zeros(RIR_SAMPLES))


class TestMss:
    def test_identity_and_symmetry(self):
        a, b = noisy_decay(0.4, seed=6), noisy_decay(0.7, seed=7)
        assert mss(a, a) == 0.0
        assert mss(a, b) == pytest.approx(mss(b, a), abs=1e-12)

    def test_single_scale_oracle(self):
        import scipy.signal

        a, b = noisy_decay(0.4, seed=8, n=8192), noisy_decay(0.7, seed=9, n=8192)
        size, hop = 512, 128
        win = scipy.signal.get_window("hann", size, fftbins=True)
        pad = size // 2

        def mags(x):
            padded = np.pad(x, (pad, pad))
            out = []
            for f in range(len(x) // hop):
                frame = padded[f * hop : f * hop + size] * win
                out.append(np.abs(np.fft.rfft(frame)))
            return np.asarray(out)

        expected = np.mean(np.abs(mags(a) - mags(b)))
        assert mss(a, b, fft_sizes=[512]) == pytest.approx(expected, abs=1e-9)


class TestT30:
    @pytest.mark.parametrize("rt60", [0.3, 0.6, 1.0])
    def test_synthetic_decay(self, rt60):
        h = noisy_decay(rt60, seed=10)
        assert t30(h) == pytest.approx(rt60, rel=0.05)

    def test_time_scaling(self):
        h = noisy_decay(0.8, seed=11)
        squeezed = h[::2]  # h(2t): twice as fast a decay
        assert t30(squeezed) == pytest.approx(t30(h) / 2.0, rel=0.05)

    def test_scale_invariance(self):
        h = noisy_decay(0.5, seed=12)
        assert t30(17.3 * h) == pytest.approx(t30(h), rel=1e-9)

    def test_insufficient_decay(self):
        rng = np.random.default_rng(13)
        with pytest.raises(InsufficientDecayError):
            t30(rng.standard_normal(4096))  # stationary noise never decays 35 dB

    def test_edc_normalized(self):
        h = noisy_decay(0.5, seed=14)
        curve = energy_decay_curve(h)
        assert curve[0] == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.diff(curve) <= 1e-12)


class TestDrr:
    def _two_burst(self, direct_amp, tail_amp, fs=SAMPLE_RATE):
        half = round(0.0025 * fs)
        h = np.zeros(fs // 2)
        peak = 400
        h[peak] = direct_amp
        h[peak + half + 1 : peak + half + 1 + 100] = tail_amp
        return h, peak, half

    def test_equal_energy_zero_db(self):
        h, _, _ = self._two_burst(1.0, 0.1)  # 1.0^2 == 100 * 0.1^2
        assert drr(h) == pytest.approx(0.0, abs=1e-9)

    def test_tail_halving(self):
        h1, _, _ = self._two_burst(1.0, 0.1)
        h2, _, _ = self._two_burst(1.0, 0.05)
        assert drr(h2) - drr(h1) == pytest.approx(10.0 * np.log10(4.0), abs=1e-9)

    def test_windowed_energy_oracle(self):
        rng = np.random.default_rng(15)
        h = rng.standard_normal(20000) * exp_envelope(0.1, 20000)
        h[300] = 30.0  # unambiguous direct peak
        peak = int(np.argmax(np.abs(h)))
        half = round(0.0025 * SAMPLE_RATE)
        e_direct = np.sum(h[peak - half : peak + half + 1] ** 2)
        e_tail = np.sum(h[peak + half + 1 :] ** 2)
        assert drr(h) == pytest.approx(10.0 * np.log10(e_direct / e_tail), abs=1e-9)

    def test_zero_tail_clamp_with_flag(self):
        h = np.zeros(10000)
        h[100] = 1.0
        value, clamped = drr(h, return_flag=True)
        assert value == 80.0 and clamped


class TestC50:
    def test_all_early_clamps(self):
        h = np.zeros(SAMPLE_RATE)
        h[0:100] = 1.0
        value, clamped = c50(h, return_flag=True)
        assert value == 80.0 and clamped

    def test_equal_energy(self):
        fs = SAMPLE_RATE
        cut = round(0.050 * fs)
        h = np.zeros(fs)
        h[0] = 1.0
        h[cut : cut + 400] = 0.05  # 400 * 0.05^2 == 1.0
        assert c50(h) == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("rt60", [0.3, 1.0])
    def test_closed_form_exponential(self, rt60):
        h = exp_envelope(rt60)
        expected = 10.0 * np.log10(np.exp(13.8156 * 0.05 / rt60) - 1.0)
        assert c50(h) == pytest.approx(expected, abs=0.5)


class TestBanded:
    def test_identity_zero(self):
        h = noisy_decay(0.5, seed=16)
        for param in ("t30", "drr", "c50"):
            assert banded_param_error(h, h, param) == pytest.approx(0.0, abs=1e-9)

    def test_median_definition(self):
        assert corpus_median([1.0, 5.0, 100.0]) == 5.0
        assert corpus_median([None, 2.0, None]) == 2.0
        assert corpus_median([None]) is None

    def test_band_limited_decay(self):
        import scipy.signal

        fs = SAMPLE_RATE
        rng = np.random.default_rng(17)
        noise = rng.standard_normal(RIR_SAMPLES)
        sos = scipy.signal.butter(4, [707.0, 1414.0], btype="bandpass", fs=fs, output="sos")
        h = scipy.signal.sosfilt(sos, noise) * exp_envelope(0.5)
        assert t30(h, band=1000.0) == pytest.approx(t30(h), rel=0.05)

    def test_insufficient_bands(self):
        rng = np.random.default_rng(18)
        flat = rng.standard_normal(8192)
        with pytest.raises(InsufficientDecayError):
            banded_param_error(flat, flat, "t30")


class TestEvaluatePair:
    def test_self_pair_all_zero(self):
        h = noisy_decay(0.5, seed=19)
        report = evaluate_pair(h, h)
        assert report.lsd_db == 0.0
        assert report.edr_mae_db == 0.0
        assert report.mss == 0.0
        assert report.t30_err_pct == pytest.approx(0.0, abs=1e-9)
        assert report.drr_err_db == pytest.approx(0.0, abs=1e-9)
        assert report.c50_err_db == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_distances_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(2048)
    b = rng.standard_normal(2048)
    assert lsd(a, b) >= 0.0
    assert mss(a, b) >= 0.0
    assert edr_error(a, b) >= 0.0
