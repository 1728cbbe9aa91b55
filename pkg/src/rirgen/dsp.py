"""Deterministic signal processing: feature extraction, inversion, convolution.

All functions here are pure numpy and safe to call concurrently. The feature
layout is (3, F, T): power-compressed magnitude, real and imaginary STFT
channels, with the Nyquist bin dropped so F = fft_size // 2.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .config import StftConfig


def _window(cfg: StftConfig) -> np.ndarray:
    return scipy.signal.get_window(cfg.window, cfg.fft_size, fftbins=True)


def _frame(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Center-padded frames of shape (T, fft_size), T = len(x) // hop."""
    pad = cfg.fft_size // 2
    frames = cfg.num_frames(len(x))
    padded = np.pad(x, (pad, pad))
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(frames)[:, None]
    return padded[idx]


def stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """One-sided STFT, shape (fft_size // 2 + 1, T), Nyquist row included."""
    frames = _frame(np.asarray(x, dtype=np.float64), cfg) * _window(cfg)
    return np.fft.rfft(frames, axis=-1).T


def istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (dual-window overlap-add)."""
    n_bins, frames = spec.shape
    if n_bins != cfg.fft_size // 2 + 1:
        raise ValueError(f"expected {cfg.fft_size // 2 + 1} bins, got {n_bins}")
    win = _window(cfg)
    target = np.fft.irfft(spec.T, n=cfg.fft_size, axis=-1)
    pad = cfg.fft_size // 2
    total = frames * cfg.hop + 2 * pad
    num = np.zeros(total)
    den = np.zeros(total)
    for t in range(frames):
        lo = t * cfg.hop
        num[lo : lo + cfg.fft_size] += win * target[t]
        den[lo : lo + cfg.fft_size] += win * win
    out = num / np.maximum(den, 1e-12)
    return out[pad : pad + frames * cfg.hop]


def compress(spec: np.ndarray, exponent: float) -> np.ndarray:
    """Power compression |X|^c * X / |X|, defined as 0 where X = 0."""
    mag = np.abs(spec)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (exponent - 1.0)
    return spec * scale


def analyze(h: np.ndarray, cfg: StftConfig | None = None) -> np.ndarray:
    """RIR (or any hop-aligned signal) -> (3, F, T) compressed feature stack.

    Channels are (|X_c|, Re X_c, Im X_c) where X_c is the power-compressed
    STFT; the Nyquist bin is discarded.
    """
    cfg = cfg or StftConfig()
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("expected a nonempty 1-D signal")
    if not np.all(np.isfinite(h)):
        raise ValueError("input contains non-finite samples")
    spec = stft(h, cfg)[: cfg.freq_bins]  # drop the Nyquist row
    comp = compress(spec, cfg.compression_exponent)
    return np.stack([np.abs(comp), comp.real, comp.imag]).astype(np.float64)


def feature_to_spec(feat: np.ndarray, cfg: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decompressed magnitude and initial phase from a (3, F, T) feature."""
    mag = np.maximum(feat[0], 0.0) ** (1.0 / cfg.compression_exponent)
    phase = np.angle(feat[1] + 1j * feat[2])
    return mag, phase


def synthesize(
    feat: np.ndarray,
    cfg: StftConfig | None = None,
    iterations: int = 32,
    residuals: list[float] | None = None,
) -> np.ndarray:
    """Feature stack -> waveform via Griffin-Lim phase refinement.

    The magnitude comes from channel 0 (decompressed), the initial phase from
    channels 1/2. A zero Nyquist row is re-appended before each inverse
    transform. If ``residuals`` is given, the spectral inconsistency
    || |STFT(x_k)| - M || is appended once per projection step.
    """
    cfg = cfg or StftConfig()
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 3 or feat.shape[0] != 3 or feat.shape[1] != cfg.freq_bins:
        raise ValueError(f"expected feature shape (3, {cfg.freq_bins}, T), got {feat.shape}")
    if not np.all(np.isfinite(feat)):
        raise ValueError("feature contains non-finite values")
    mag, phase = feature_to_spec(feat, cfg)
    nyq = np.zeros((1, feat.shape[2]))
    full_mag = np.concatenate([mag, nyq])
    spec = np.concatenate([mag * np.exp(1j * phase), nyq])
    x = istft(spec, cfg)
    for _ in range(iterations):
        spec = stft(x, cfg)
        if residuals is not None:
            residuals.append(float(np.linalg.norm(np.abs(spec) - full_mag)))
        spec = full_mag * np.exp(1j * np.angle(spec))
        x = istft(spec, cfg)
    return x


def convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Linear FFT convolution, full length |x| + |h| - 1."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolve requires nonempty inputs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(h))):
        raise ValueError("convolve requires finite inputs")
    return scipy.signal.fftconvolve(x, h, mode="full")


def resample(x: np.ndarray, ratio_num: int, ratio_den: int) -> np.ndarray:
    """Polyphase resampling by the exact rational factor num/den."""
    return scipy.signal.resample_poly(np.asarray(x, dtype=np.float64), ratio_num, ratio_den)


def trim_or_pad(x: np.ndarray, length: int) -> np.ndarray:
    if len(x) >= length:
        return x[:length]
    return np.pad(x, (0, length - len(x)))


def validate_rir(h: np.ndarray, length: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (length,):
        raise ValueError(f"expected RIR of length {length}, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("RIR contains non-finite samples")
    return h


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono float64 samples in [-1, 1] plus the sample rate.

    Multichannel files are mixed down by channel averaging. Handles 16/24/32
    bit PCM and 32/64-bit float WAVs.
    """
    sr, data = scipy.io.wavfile.read(str(path))
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(sr)


def write_wav(path: str | Path, x: np.ndarray, sample_rate: int, subtype: str = "float32") -> None:
    """Write a mono WAV; ``subtype`` is one of float32 | pcm16 | pcm24."""
    x = np.asarray(x, dtype=np.float64)
    if subtype == "float32":
        scipy.io.wavfile.write(str(path), sample_rate, x.astype(np.float32))
    elif subtype == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
        scipy.io.wavfile.write(str(path), sample_rate, q)
    elif subtype == "pcm24":
        q = np.clip(np.round(x * 8388608.0), -8388608, 8388607).astype(np.int32)
        raw = q.astype("<i4").tobytes()
        trimmed = b"".join(raw[i : i + 3] for i in range(0, len(raw), 4))
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(3)
            fh.setframerate(sample_rate)
            fh.writeframes(trimmed)
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
