"""Objective RIR evaluation metrics and their octave-band aggregation.

Conventions follow common room-acoustics practice: Schroeder backward
integration with a [-5, -35] dB fit range extrapolated to RT60, a 2.5 ms
direct-path window, +-80 dB clamps on energy ratios, and 4th-order zero-phase
band-pass filters for octave-band analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import median
from typing import Sequence

import numpy as np
import scipy.signal

from .config import SAMPLE_RATE, StftConfig
from . import dsp

OCTAVE_CENTERS_HZ = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)
CLAMP_DB = 80.0
LOG_EPS = 1e-8
BANDPASS_ORDER = 4
DIRECT_WINDOW_S = 0.0025


class InsufficientDecayError(ValueError):
    """The energy decay curve never reaches the fit range."""


def _bandpass(x: np.ndarray, center_hz: float, fs: int) -> np.ndarray:
    lo = center_hz / np.sqrt(2.0)
    hi = center_hz * np.sqrt(2.0)
    sos = scipy.signal.butter(BANDPASS_ORDER, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return scipy.signal.sosfiltfilt(sos, x)


def _maybe_band(h: np.ndarray, band: float | None, fs: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return _bandpass(h, band, fs) if band is not None else h


def lsd(h_est: np.ndarray, h_ref: np.ndarray) -> float:
    """Mean absolute log-magnitude difference (dB) of the full-RIR response."""
    h_est = np.asarray(h_est, dtype=np.float64)
    h_ref = np.asarray(h_ref, dtype=np.float64)
    if h_est.shape != h_ref.shape:
        raise ValueError("length mismatch")
    a = 20.0 * np.log10(np.abs(np.fft.rfft(h_est)) + LOG_EPS)
    b = 20.0 * np.log10(np.abs(np.fft.rfft(h_ref)) + LOG_EPS)
    return float(np.mean(np.abs(a - b)))


def edr(h: np.ndarray, cfg: StftConfig | None = None) -> np.ndarray:
    """Energy decay relief: per-band backward-integrated STFT energy, (F, T)."""
    cfg = cfg or StftConfig()
    h = np.asarray(h, dtype=np.float64)
    usable = (len(h) // cfg.hop) * cfg.hop
    spec = dsp.stft(h[:usable], cfg)
    power = np.abs(spec) ** 2
    return np.cumsum(power[:, ::-1], axis=1)[:, ::-1]


def edr_error(
    h_est: np.ndarray, h_ref: np.ndarray, cfg: StftConfig | None = None, floor_db: float = -80.0
) -> float:
    """MAE of the EDR in dB over the cells where the reference is above floor."""
    h_est = np.asarray(h_est, dtype=np.float64)
    h_ref = np.asarray(h_ref, dtype=np.float64)
    if h_est.shape != h_ref.shape:
        raise ValueError("length mismatch")
    if not np.any(h_ref):
        raise ValueError("all-zero reference")
    ref = 10.0 * np.log10(edr(h_ref, cfg) + LOG_EPS)
    est = 10.0 * np.log10(edr(h_est, cfg) + LOG_EPS)
    mask = ref >= ref.max() + floor_db
    return float(np.mean(np.abs(est[mask] - ref[mask])))


def mss(
    h_est: np.ndarray,
    h_ref: np.ndarray,
    fft_sizes: Sequence[int] = (512, 1024, 2048),
) -> float:
    """Multi-scale STFT magnitude MAE, hop = fft_size / 4 per scale."""
    h_est = np.asarray(h_est, dtype=np.float64)
    h_ref = np.asarray(h_ref, dtype=np.float64)
    if h_est.shape != h_ref.shape:
        raise ValueError("length mismatch")
    losses = []
    for size in fft_sizes:
        cfg = StftConfig(fft_size=size, hop=size // 4)
        usable = (len(h_ref) // cfg.hop) * cfg.hop
        a = np.abs(dsp.stft(h_est[:usable], cfg))
        b = np.abs(dsp.stft(h_ref[:usable], cfg))
        losses.append(np.mean(np.abs(a - b)))
    return float(np.mean(losses))


def energy_decay_curve(h: np.ndarray) -> np.ndarray:
    """Schroeder backward-integrated energy, normalized to 0 dB at the start."""
    energy = np.cumsum(np.asarray(h, dtype=np.float64)[::-1] ** 2)[::-1]
    if energy[0] <= 0.0:
        raise InsufficientDecayError("silent input")
    return 10.0 * np.log10(energy / energy[0] + 1e-300)


def t30(
    h: np.ndarray, band: float | None = None, fs: int = SAMPLE_RATE,
    fit_range_db: tuple[float, float] = (-5.0, -35.0),
) -> float:
    """Reverberation time from the [-5, -35] dB EDC segment, extrapolated to 60 dB."""
    x = _maybe_band(h, band, fs)
    edc_db = energy_decay_curve(x)
    hi, lo = fit_range_db
    start = int(np.argmax(edc_db <= hi))
    below = np.nonzero(edc_db <= lo)[0]
    # backward integration plunges artificially at the very end of any finite
    # signal, so a crossing inside the last few percent does not count
    if edc_db[start] > hi or below.size == 0 or below[0] >= 0.95 * len(edc_db):
        raise InsufficientDecayError(f"decay never spans [{hi}, {lo}] dB")
    stop = int(below[0])
    t = np.arange(start, stop + 1) / fs
    seg = edc_db[start : stop + 1]
    slope = np.polyfit(t, seg, 1)[0]
    if slope >= 0.0:
        raise InsufficientDecayError("non-decaying EDC segment")
    return float(60.0 / abs(slope))


def _ratio_db(e_num: float, e_den: float) -> tuple[float, bool]:
    if e_den <= 0.0:
        return CLAMP_DB, True
    if e_num <= 0.0:
        return -CLAMP_DB, True
    value = 10.0 * np.log10(e_num / e_den)
    if abs(value) > CLAMP_DB:
        return float(np.sign(value) * CLAMP_DB), True
    return float(value), False


def drr(
    h: np.ndarray, band: float | None = None, fs: int = SAMPLE_RATE, return_flag: bool = False
) -> float | tuple[float, bool]:
    """Direct-to-reverberant ratio (dB): +-2.5 ms around the peak vs the tail."""
    x = _maybe_band(h, band, fs)
    peak = int(np.argmax(np.abs(x)))
    half = round(DIRECT_WINDOW_S * fs)
    direct = x[max(0, peak - half) : peak + half + 1]
    tail = x[peak + half + 1 :]
    value, clamped = _ratio_db(float(np.sum(direct**2)), float(np.sum(tail**2)))
    return (value, clamped) if return_flag else value


def c50(
    h: np.ndarray, band: float | None = None, fs: int = SAMPLE_RATE, return_flag: bool = False
) -> float | tuple[float, bool]:
    """Clarity (dB): energy in the first 50 ms after the peak vs everything later."""
    x = _maybe_band(h, band, fs)
    onset = int(np.argmax(np.abs(x)))
    cut = onset + round(0.050 * fs)
    early = x[onset:cut]
    late = x[cut:]
    value, clamped = _ratio_db(float(np.sum(early**2)), float(np.sum(late**2)))
    return (value, clamped) if return_flag else value


_PARAM_FNS = {"t30": t30, "drr": drr, "c50": c50}


def banded_param_error(
    h_est: np.ndarray,
    h_ref: np.ndarray,
    param: str,
    fs: int = SAMPLE_RATE,
    bands: Sequence[float] = OCTAVE_CENTERS_HZ,
    min_valid_bands: int = 4,
) -> float:
    """Octave-band-averaged parameter error.

    T30 errors are relative percentages, DRR/C50 errors are dB differences.
    Bands with insufficient decay on either input are excluded; fewer than
    ``min_valid_bands`` usable bands is an error.
    """
    fn = _PARAM_FNS[param]
    errors = []
    for center in bands:
        try:
            est = fn(h_est, band=center, fs=fs)
            ref = fn(h_ref, band=center, fs=fs)
        except InsufficientDecayError:
            continue
        if param == "t30":
            errors.append(100.0 * abs(est - ref) / ref)
        else:
            errors.append(abs(est - ref))
    if len(errors) < min_valid_bands:
        raise InsufficientDecayError(
            f"only {len(errors)} valid bands for {param}, need {min_valid_bands}"
        )
    return float(np.mean(errors))


@dataclass
class PairMetrics:
    lsd_db: float
    edr_mae_db: float
    mss: float
    t30_err_pct: float | None
    drr_err_db: float | None
    c50_err_db: float | None

    def as_dict(self) -> dict:
        return {
            "lsd_db": self.lsd_db,
            "edr_mae_db": self.edr_mae_db,
            "mss": self.mss,
            "t30_err_pct": self.t30_err_pct,
            "drr_err_db": self.drr_err_db,
            "c50_err_db": self.c50_err_db,
        }


def evaluate_pair(h_est: np.ndarray, h_ref: np.ndarray, fs: int = SAMPLE_RATE) -> PairMetrics:
    """All metrics for one estimated/reference pair.

    Banded parameter errors degrade to None when the decay cannot be measured
    instead of failing the whole report.
    """
    banded: dict[str, float | None] = {}
    for param in ("t30", "drr", "c50"):
        try:
            banded[param] = banded_param_error(h_est, h_ref, param, fs=fs)
        except InsufficientDecayError:
            banded[param] = None
    return PairMetrics(
        lsd_db=lsd(h_est, h_ref),
        edr_mae_db=edr_error(h_est, h_ref),
        mss=mss(h_est, h_ref),
        t30_err_pct=banded["t30"],
        drr_err_db=banded["drr"],
        c50_err_db=banded["c50"],
    )


def corpus_median(values: Sequence[float | None]) -> float | None:
    usable = [v for v in values if v is not None]
    return float(median(usable)) if usable else None


def aggregate(pairs: Sequence[PairMetrics]) -> dict:
    """Corpus-level report: per-pair metrics plus the median of each metric."""
    keys = ["lsd_db", "edr_mae_db", "mss", "t30_err_pct", "drr_err_db", "c50_err_db"]
    per_pair = [p.as_dict() for p in pairs]
    medians = {k: corpus_median([d[k] for d in per_pair]) for k in keys}
    return {"pairs": per_pair, "median": medians, "num_pairs": len(pairs)}


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["pairs", "median", "num_pairs", "config_hash"],
    "properties": {
        "num_pairs": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string"},
        "lsd_note": {"type": "string"},
        "pairs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lsd_db", "edr_mae_db", "mss"],
                "properties": {
                    "lsd_db": {"type": "number"},
                    "edr_mae_db": {"type": "number"},
                    "mss": {"type": "number"},
                    "t30_err_pct": {"type": ["number", "null"]},
                    "drr_err_db": {"type": ["number", "null"]},
                    "c50_err_db": {"type": ["number", "null"]},
                },
            },
        },
        "median": {
            "type": "object",
            "required": ["lsd_db", "edr_mae_db", "mss", "t30_err_pct", "drr_err_db", "c50_err_db"],
        },
    },
}
