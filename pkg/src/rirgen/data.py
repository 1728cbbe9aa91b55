"""Corpus ingestion, on-the-fly augmentation, and training-pair construction.

Manifests are JSON-lines files, one entry per audio file, with group ids
(room / microphone / speaker) that must stay disjoint across splits. All
augmentation draws come from a single seeded generator per pair, and every
pair carries a provenance record sufficient to rebuild it exactly.

A synthetic corpus generator (decaying filtered noise RIRs, harmonic-glide
speech) ships here so the whole pipeline runs at desk scale with zero
downloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.signal

from . import dsp, metrics
from .config import RIR_SAMPLES, SAMPLE_RATE

KINDS = ("rir", "micir", "speech")
SPLITS = ("train", "valid", "test")
ONSET_SAMPLES = 256
PEAK_NORM = 0.5
SPEECH_RMS = 0.1


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    kind: str
    group_id: str
    split: str
    sample_rate: int
    consistent_acoustics: bool = False  # speech corpora with one fixed recording env

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            entries.append(ManifestEntry(**json.loads(line)))
    return entries


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    lines = [json.dumps(e.__dict__, sort_keys=True) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def split_violations(entries: list[ManifestEntry]) -> dict[str, set[str]]:
    """group_id -> set of splits, for every group seen in more than one split."""
    seen: dict[str, set[str]] = {}
    for e in entries:
        seen.setdefault(f"{e.kind}:{e.group_id}", set()).add(e.split)
    return {g: s for g, s in seen.items() if len(s) > 1}


# ------------------------------------------------------------ standardization


def resample_to(x: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float64)
    frac = Fraction(sr_out, sr_in)
    return dsp.resample(x, frac.numerator, frac.denominator)


def standardize_rir(
    x: np.ndarray,
    sr: int,
    length: int = RIR_SAMPLES,
    onset: int = ONSET_SAMPLES,
    peak_norm: float = PEAK_NORM,
) -> np.ndarray:
    """Resample, align the direct-path peak to ``onset``, trim/pad, normalize."""
    x = resample_to(x, sr)
    peak_amp = np.max(np.abs(x)) if x.size else 0.0
    if peak_amp <= 0.0:
        raise ValueError("silent RIR")
    peak = int(np.argmax(np.abs(x)))
    out = np.zeros(length)
    src_lo = max(0, peak - onset)
    dst_lo = onset - (peak - src_lo)
    chunk = x[src_lo : src_lo + (length - dst_lo)]
    out[dst_lo : dst_lo + len(chunk)] = chunk
    return out * (peak_norm / np.max(np.abs(out)))


def standardize_speech(
    x: np.ndarray,
    sr: int,
    seconds: float,
    rng: np.random.Generator | None = None,
    target_rms: float = SPEECH_RMS,
) -> np.ndarray:
    """Resample, crop to ``seconds`` (random offset when rng given), set RMS."""
    x = resample_to(x, sr)
    want = int(round(seconds * SAMPLE_RATE))
    if len(x) < want:
        x = np.pad(x, (0, want - len(x)))
    slack = len(x) - want
    lo = int(rng.integers(0, slack + 1)) if (rng is not None and slack > 0) else slack // 2
    x = x[lo : lo + want]
    rms = np.sqrt(np.mean(x**2))
    if rms <= 0.0:
        raise ValueError("silent speech segment")
    return x * (target_rms / rms)


# --------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    prob_decay: float = 0.5
    prob_pitch: float = 0.5
    prob_eq: float = 0.5
    prob_micir: float = 0.5
    prob_source_micir: float = 0.5  # matching task only
    t30_factor_range: tuple[float, float] = (0.5, 1.5)
    drr_gain_db_range: tuple[float, float] = (-6.0, 6.0)
    pitch_semitone_range: tuple[float, float] = (-4.0, 4.0)
    eq_peaks: int = 2
    eq_gain_db_range: tuple[float, float] = (-9.0, 9.0)
    # MicIR augmentation ranges, half as aggressive by default
    micir_t30_factor_range: tuple[float, float] = (0.75, 1.25)
    micir_drr_gain_db_range: tuple[float, float] = (-3.0, 3.0)
    micir_pitch_semitone_range: tuple[float, float] = (-2.0, 2.0)
    micir_eq_gain_db_range: tuple[float, float] = (-4.5, 4.5)


def augment_decay(
    h: np.ndarray, t30_factor: float, drr_gain: float, fs: int = SAMPLE_RATE
) -> np.ndarray:
    """Rescale the tail decay rate toward t30_factor * T30 and gain the direct.

    The tail is multiplied by exp(-alpha * t) with t measured from the direct
    peak and alpha = 6.9078 * (1/T30_new - 1/T30_old) in amplitude terms.
    """
    t30_old = metrics.t30(h, fs=fs)  # raises InsufficientDecayError when unmeasurable
    t30_new = t30_factor * t30_old
    alpha = 6.9078 * (1.0 / t30_new - 1.0 / t30_old)
    peak = int(np.argmax(np.abs(h)))
    half = round(metrics.DIRECT_WINDOW_S * fs)
    out = h.astype(np.float64).copy()
    lo, hi = max(0, peak - half), peak + half + 1
    out[lo:hi] *= drr_gain
    tail = np.arange(hi, len(h))
    out[hi:] *= np.exp(-alpha * (tail - peak) / fs)
    return out


def augment_pitch(
    h: np.ndarray, semitones: float, length: int | None = None, trim: bool = True
) -> np.ndarray:
    """Pitch shift by resampling (jointly scales pitch and decay time)."""
    if semitones == 0.0:
        resampled = np.asarray(h, dtype=np.float64)
    else:
        factor = Fraction(2.0 ** (-semitones / 12.0)).limit_denominator(1000)
        resampled = dsp.resample(h, factor.numerator, factor.denominator)
    if not trim:
        return resampled
    return dsp.trim_or_pad(resampled, length if length is not None else len(h))


@dataclass(frozen=True)
class EqBand:
    kind: str  # low_shelf | high_shelf | peak
    freq_hz: float
    gain_db: float
    q: float = 0.707


def _rbj_biquad(band: EqBand, fs: int) -> np.ndarray:
    """One RBJ cookbook section as a normalized sos row."""
    a_lin = 10.0 ** (band.gain_db / 40.0)
    w = 2.0 * np.pi * band.freq_hz / fs
    cw, sw = np.cos(w), np.sin(w)
    alpha = sw / (2.0 * band.q)
    if band.kind == "peak":
        b = [1 + alpha * a_lin, -2 * cw, 1 - alpha * a_lin]
        a = [1 + alpha / a_lin, -2 * cw, 1 - alpha / a_lin]
    elif band.kind in ("low_shelf", "high_shelf"):
        sq = 2.0 * np.sqrt(a_lin) * alpha
        sign = 1.0 if band.kind == "low_shelf" else -1.0
        b = [
            a_lin * ((a_lin + 1) - sign * (a_lin - 1) * cw + sq),
            sign * 2 * a_lin * ((a_lin - 1) - sign * (a_lin + 1) * cw),
            a_lin * ((a_lin + 1) - sign * (a_lin - 1) * cw - sq),
        ]
        a = [
            (a_lin + 1) + sign * (a_lin - 1) * cw + sq,
            sign * -2 * ((a_lin - 1) + sign * (a_lin + 1) * cw),
            (a_lin + 1) + sign * (a_lin - 1) * cw - sq,
        ]
    else:
        raise ValueError(f"unknown EQ band kind {band.kind!r}")
    row = np.asarray(b + a, dtype=np.float64) / a[0]
    return row


def eq_sos(bands: list[EqBand], fs: int = SAMPLE_RATE) -> np.ndarray:
    sos = np.stack([_rbj_biquad(b, fs) for b in bands])
    poles_ok = all(
        np.all(np.abs(np.roots(row[3:])) < 1.0) for row in sos
    )
    if not poles_ok:
        raise ValueError("unstable EQ coefficients")
    return sos


def augment_eq(h: np.ndarray, bands: list[EqBand], fs: int = SAMPLE_RATE) -> np.ndarray:
    """Cascade of shelving/peaking biquads applied as a filter."""
    if not bands:
        return np.asarray(h, dtype=np.float64)
    return scipy.signal.sosfilt(eq_sos(bands, fs), np.asarray(h, dtype=np.float64))


def random_eq_bands(
    rng: np.random.Generator, cfg: AugmentConfig, fs: int = SAMPLE_RATE, micir: bool = False
) -> list[EqBand]:
    lo_db, hi_db = cfg.micir_eq_gain_db_range if micir else cfg.eq_gain_db_range
    bands = [
        EqBand("low_shelf", float(rng.uniform(80.0, 400.0)), float(rng.uniform(lo_db, hi_db))),
        EqBand("high_shelf", float(rng.uniform(3000.0, 10000.0)), float(rng.uniform(lo_db, hi_db))),
    ]
    for _ in range(cfg.eq_peaks):
        bands.append(
            EqBand(
                "peak",
                float(rng.uniform(200.0, 8000.0)),
                float(rng.uniform(lo_db, hi_db)),
                q=float(rng.uniform(0.5, 4.0)),
            )
        )
    return bands


# ------------------------------------------------------------- pair building


@dataclass(frozen=True)
class PoolItem:
    item_id: str
    samples: np.ndarray
    group_id: str
    consistent_acoustics: bool = False


@dataclass
class TrainingPair:
    task: str  # recon | blind | match
    target_rir: np.ndarray
    reference: tuple[np.ndarray, ...]
    provenance: dict = field(default_factory=dict)


def _augment_ir(
    h: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    fs: int,
    micir: bool = False,
) -> tuple[np.ndarray, dict]:
    """Augmentations (i)-(iii) with per-step enable coin flips."""
    record: dict = {}
    out = np.asarray(h, dtype=np.float64)
    if rng.random() < cfg.prob_decay:
        lo, hi = cfg.micir_t30_factor_range if micir else cfg.t30_factor_range
        glo, ghi = cfg.micir_drr_gain_db_range if micir else cfg.drr_gain_db_range
        t30_factor = float(rng.uniform(lo, hi))
        drr_gain = float(10.0 ** (rng.uniform(glo, ghi) / 20.0))
        try:
            out = augment_decay(out, t30_factor, drr_gain, fs=fs)
            record["decay"] = {"t30_factor": t30_factor, "drr_gain": drr_gain}
        except metrics.InsufficientDecayError:
            record["decay"] = None  # unmeasurable decay: skipped
    if rng.random() < cfg.prob_pitch:
        lo, hi = cfg.micir_pitch_semitone_range if micir else cfg.pitch_semitone_range
        semitones = float(rng.uniform(lo, hi))
        out = augment_pitch(out, semitones, length=len(h))
        record["pitch_semitones"] = semitones
    if rng.random() < cfg.prob_eq:
        bands = random_eq_bands(rng, cfg, fs=fs, micir=micir)
        out = augment_eq(out, bands, fs=fs)
        record["eq"] = [b.__dict__ for b in bands]
    return out, record


def _pick(pool: list[PoolItem], rng: np.random.Generator, kind: str) -> PoolItem:
    if not pool:
        raise ValueError(f"empty {kind} pool")
    return pool[int(rng.integers(0, len(pool)))]


def build_pair(
    task: str,
    rir_pool: list[PoolItem],
    micir_pool: list[PoolItem],
    speech_pool: list[PoolItem],
    cfg: AugmentConfig,
    seed: int,
    fs: int = SAMPLE_RATE,
) -> TrainingPair:
    """Draw, augment, and convolve one training pair.

    The learning target is always the (augmented) room response alone; any
    microphone response only colors the reference signals.
    """
    if task not in ("recon", "blind", "match"):
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    prov: dict = {"task": task, "seed": seed}

    rir_item = _pick(rir_pool, rng, "rir")
    h_r, rec = _augment_ir(rir_item.samples, rng, cfg, fs)
    if rec:  # augmentations drift the scale; untouched draws stay bit-exact
        peak = np.max(np.abs(h_r))
        if peak > 0:
            h_r = h_r * (PEAK_NORM / peak)
    prov["rir"] = {"id": rir_item.item_id, "augment": rec}

    if task == "recon":
        prov["reference"] = "target_rir"
        return TrainingPair(task, h_r, (h_r,), prov)

    h_eff = h_r
    if micir_pool and rng.random() < cfg.prob_micir:
        mic_item = _pick(micir_pool, rng, "micir")
        h_m, mic_rec = _augment_ir(mic_item.samples, rng, cfg, fs, micir=True)
        h_eff = dsp.convolve(h_r, h_m)
        prov["micir"] = {"id": mic_item.item_id, "augment": mic_rec}

    target_item = _pick(speech_pool, rng, "speech")
    wet = dsp.convolve(h_eff, target_item.samples)[: len(target_item.samples)]
    prov["target_speech"] = {"id": target_item.item_id, "group": target_item.group_id}
    if task == "blind":
        return TrainingPair(task, h_r, (wet,), prov)

    # acoustic matching: same-speaker source unless the corpus is flagged as
    # having consistent acoustics across speakers
    if target_item.consistent_acoustics:
        candidates = speech_pool
    else:
        candidates = [s for s in speech_pool if s.group_id == target_item.group_id]
    source_item = _pick(candidates, rng, "speech")
    source = np.asarray(source_item.samples, dtype=np.float64)
    if micir_pool and rng.random() < cfg.prob_source_micir:
        mic_item = _pick(micir_pool, rng, "micir")
        h_m, mic_rec = _augment_ir(mic_item.samples, rng, cfg, fs, micir=True)
        source = dsp.convolve(source, h_m)[: len(source)]
        prov["source_micir"] = {"id": mic_item.item_id, "augment": mic_rec}
    prov["source_speech"] = {"id": source_item.item_id, "group": source_item.group_id}
    return TrainingPair(task, h_r, (source, wet), prov)


# ---------------------------------------------------------- synthetic corpus


def synth_rir(
    rng: np.random.Generator,
    length: int = RIR_SAMPLES,
    fs: int = SAMPLE_RATE,
    rt60_s: float | None = None,
    drr_db: float | None = None,
    onset: int = ONSET_SAMPLES,
) -> np.ndarray:
    """Exponentially decaying band-limited noise with a direct-path impulse."""
    duration = length / fs
    if rt60_s is None:
        rt60_s = float(rng.uniform(0.12, 0.45)) * duration
    if drr_db is None:
        drr_db = float(rng.uniform(-3.0, 9.0))
    tail = rng.standard_normal(length)
    sos = scipy.signal.butter(4, float(rng.uniform(0.5, 0.85)), output="sos")
    tail = scipy.signal.sosfilt(sos, tail)
    t = np.arange(length) / fs
    tail *= np.exp(-6.9078 * t / rt60_s)
    h = np.zeros(length)
    h[onset:] = tail[: length - onset]
    h[onset - 8 : onset + 8] *= np.hanning(16)  # soften the tail onset
    tail_energy = float(np.sum(h**2))
    h[onset] = np.sqrt(tail_energy * 10.0 ** (drr_db / 10.0))
    return h * (PEAK_NORM / np.max(np.abs(h)))


def synth_speech(
    rng: np.random.Generator, length: int, fs: int = SAMPLE_RATE
) -> np.ndarray:
    """Harmonic glides with amplitude modulation plus a noise floor."""
    t = np.arange(length) / fs
    f0 = float(rng.uniform(90.0, 260.0))
    glide = f0 * (1.0 + 0.3 * np.sin(2 * np.pi * float(rng.uniform(0.3, 2.0)) * t))
    phase = 2 * np.pi * np.cumsum(glide) / fs
    x = np.zeros(length)
    for k in range(1, 6):
        x += np.sin(k * phase) / k
    envelope = 0.5 * (1.0 + np.sin(2 * np.pi * float(rng.uniform(1.0, 4.0)) * t))
    x = x * envelope + 0.05 * rng.standard_normal(length)
    return x * (SPEECH_RMS / np.sqrt(np.mean(x**2)))


def generate_corpus(
    out_dir: str | Path,
    num_rirs: int = 12,
    num_micirs: int = 4,
    num_speech: int = 8,
    rir_length: int = RIR_SAMPLES,
    speech_length: int | None = None,
    fs: int = SAMPLE_RATE,
    seed: int = 0,
) -> Path:
    """Write a self-contained synthetic corpus and its manifest; returns the
    manifest path. Groups are split roughly 70/15/15 across train/valid/test."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    speech_length = speech_length or 4 * rir_length
    entries: list[ManifestEntry] = []

    def split_for(index: int, total: int) -> str:
        if total < 3:
            return "train"
        if index < max(1, int(0.7 * total)):
            return "train"
        if index < max(2, int(0.85 * total)):
            return "valid"
        return "test"

    specs = [
        ("rir", num_rirs, 2, lambda: synth_rir(rng, rir_length, fs)),
        ("micir", num_micirs, 1, lambda: synth_rir(rng, max(512, rir_length // 4), fs,
                                                   rt60_s=0.05 * rir_length / fs, drr_db=12.0)),
        ("speech", num_speech, 1, lambda: synth_speech(rng, speech_length, fs)),
    ]
    for kind, count, per_group, make in specs:
        kind_dir = out_dir / kind
        kind_dir.mkdir(parents=True, exist_ok=True)
        n_groups = max(1, count // per_group)
        for i in range(count):
            group_idx = min(i // per_group, n_groups - 1)
            path = kind_dir / f"{kind}_{i:03d}.wav"
            dsp.write_wav(path, make(), fs)
            entries.append(
                ManifestEntry(
                    path=str(path),
                    kind=kind,
                    group_id=f"{kind}_group_{group_idx:03d}",
                    split=split_for(group_idx, n_groups),
                    sample_rate=fs,
                )
            )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def load_pool(
    entries: list[ManifestEntry],
    kind: str,
    split: str,
    rir_length: int = RIR_SAMPLES,
    speech_seconds: float | None = None,
    rng: np.random.Generator | None = None,
) -> list[PoolItem]:
    """Read, resample, and standardize every matching manifest entry."""
    pool = []
    for e in entries:
        if e.kind != kind or e.split != split:
            continue
        x, sr = dsp.read_wav(e.path)
        if kind == "speech":
            seconds = speech_seconds if speech_seconds is not None else len(x) / sr
            samples = standardize_speech(x, sr, seconds, rng=rng)
        elif kind == "rir":
            samples = standardize_rir(x, sr, length=rir_length)
        else:  # micir: keep native length, just resample and normalize
            samples = resample_to(x, sr)
            samples = samples * (PEAK_NORM / np.max(np.abs(samples)))
        pool.append(
            PoolItem(
                item_id=Path(e.path).stem,
                samples=samples,
                group_id=e.group_id,
                consistent_acoustics=e.consistent_acoustics,
            )
        )
    return pool
