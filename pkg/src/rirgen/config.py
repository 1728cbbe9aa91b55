"""Configuration dataclasses shared across the pipeline.

The paper-scale configuration (49152-sample RIRs, 256x768 features,
192x32x192 latents) is the default everywhere; the ``tiny_*`` presets give a
CPU-friendly miniature of the same pipeline for tests and smoke runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

SAMPLE_RATE = 44100
RIR_SAMPLES = 49152  # 1.1 s at 44.1 kHz


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis transform parameters.

    ``fft_size // 2`` one-sided bins are kept (the Nyquist bin is dropped on
    analysis and re-zeroed on synthesis); frame count is ``len(x) // hop``
    with center padding.
    """

    fft_size: int = 512
    hop: int = 64
    window: str = "hann"
    compression_exponent: float = 0.3

    def __post_init__(self) -> None:
        if self.fft_size % 2 or self.hop <= 0:
            raise ValueError("fft_size must be even and hop positive")
        if not 0.0 < self.compression_exponent <= 1.0:
            raise ValueError("compression_exponent must lie in (0, 1]")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2

    def num_frames(self, num_samples: int) -> int:
        if num_samples % self.hop:
            raise ValueError(f"signal length {num_samples} not divisible by hop {self.hop}")
        return num_samples // self.hop


@dataclass(frozen=True)
class RqvaeConfig:
    """Autoencoder + residual quantizer hyperparameters."""

    freq_bins: int = 256
    frames: int = 768
    in_channels: int = 3
    channels: tuple[int, int, int] = (48, 96, 192)
    latent_channels: int = 192
    codebook_size: int = 512
    num_quantizers: int = 3
    ema_decay: float = 0.98
    ema_eps: float = 1e-5
    commitment_weight: float = 0.25
    stale_threshold: int = 2
    quantization_dropout: bool = True

    def __post_init__(self) -> None:
        if self.freq_bins % 8 or self.frames % 4:
            raise ValueError("freq_bins must be divisible by 8 and frames by 4")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    @property
    def latent_bands(self) -> int:
        return self.freq_bins // 8

    @property
    def latent_frames(self) -> int:
        return self.frames // 4


@dataclass(frozen=True)
class GeneratorConfig:
    """Token generator (TF-Transformer + optional Depth Transformer)."""

    strategy: str = "audiolm"  # audiolm | rqt | valle
    num_bands: int = 32
    num_frames: int = 192
    num_quantizers: int = 3
    codebook_size: int = 512
    num_special: int = 2  # end-of-sequence + padding ids appended to each head
    latent_channels: int = 192
    model_dim: int = 384
    ff_dim: int = 1536
    heads: int = 4
    blocks: int = 4
    depth_layers: int = 2
    dropout: float = 0.1
    cond_columns: int = 4
    non_ar: bool = False  # ablation: drop the causal masks, predict in one pass
    eos_fraction: float = 1.0  # fraction of band heads that must emit EOS to stop

    def __post_init__(self) -> None:
        if self.strategy not in ("audiolm", "rqt", "valle"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.non_ar and self.strategy != "rqt":
            raise ValueError("the non-AR ablation is a configuration of the rqt backbone")

    @property
    def vocab_size(self) -> int:
        return self.codebook_size + self.num_special

    @property
    def eos_id(self) -> int | None:
        return self.codebook_size if self.num_special >= 1 else None

    @property
    def pad_id(self) -> int | None:
        return self.codebook_size + 1 if self.num_special >= 2 else None

    @property
    def flat_steps(self) -> int:
        return self.num_frames * self.num_quantizers


@dataclass(frozen=True)
class RefEncoderConfig:
    """Reference encoder (downsampling trunk + attentive pooling)."""

    freq_bins: int = 256
    in_channels: int = 3
    base_channels: int = 64
    bottleneck_channels: int = 128
    out_dim: int = 384
    num_queries: int = 4
    dilations: tuple[int, ...] = (1, 2, 4)
    heads: int = 4

    @property
    def num_bands(self) -> int:
        return self.freq_bins // 8


@dataclass(frozen=True)
class SamplerConfig:
    """Categorical sampling: temperature, then top-k, then top-p."""

    top_k: int = 10
    top_p: float = 0.995
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    batch_size: int = 16  # paper: 16 for stage 1, 6 for stage 2
    peak_lr: float = 1e-4
    warmup_steps: int = 5000
    halving_interval: int = 50000
    label_smoothing: float = 0.001
    mag_weight: float = 3.0
    complex_weight: float = 1.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 1.0
    max_steps: int = 200000
    val_interval: int = 1000
    patience: int = 10
    seed: int = 0
    task: str = "recon"  # recon | blind | match (stage 2)
    strategy: str = "audiolm"  # stage 2

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.task not in ("recon", "blind", "match"):
            raise ValueError(f"unknown task {self.task!r}")


def paper_stft() -> StftConfig:
    return StftConfig()


def tiny_stft() -> StftConfig:
    return StftConfig(fft_size=64, hop=16)


def paper_rqvae() -> RqvaeConfig:
    return RqvaeConfig()


def tiny_rqvae() -> RqvaeConfig:
    return RqvaeConfig(
        freq_bins=32,
        frames=48,
        channels=(12, 16, 24),
        latent_channels=24,
        codebook_size=32,
    )


def paper_generator(strategy: str = "audiolm", **overrides: Any) -> GeneratorConfig:
    return GeneratorConfig(strategy=strategy, **overrides)


def tiny_generator(strategy: str = "audiolm", **overrides: Any) -> GeneratorConfig:
    defaults: dict[str, Any] = dict(
        strategy=strategy,
        num_bands=4,
        num_frames=12,
        num_quantizers=3,
        codebook_size=32,
        latent_channels=24,
        model_dim=64,
        ff_dim=128,
        heads=2,
        blocks=2,
        depth_layers=1,
        dropout=0.0,
    )
    defaults.update(overrides)
    return GeneratorConfig(**defaults)


def tiny_ref_encoder(**overrides: Any) -> RefEncoderConfig:
    defaults: dict[str, Any] = dict(
        freq_bins=32,
        base_channels=8,
        bottleneck_channels=12,
        out_dim=64,
        heads=2,
    )
    defaults.update(overrides)
    return RefEncoderConfig(**defaults)


def config_hash(*configs: Any) -> str:
    """Stable short hash of one or more config dataclasses (for provenance)."""
    payload = [dataclasses.asdict(c) if dataclasses.is_dataclass(c) else c for c in configs]
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_yaml(path: str | Path, **sections: Any) -> None:
    data = {
        name: dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
        for name, cfg in sections.items()
    }
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def load_yaml(path: str | Path) -> dict[str, Any]:
    return yaml.safe_load(Path(path).read_text()) or {}


_CONFIG_TYPES = {
    "stft": StftConfig,
    "rqvae": RqvaeConfig,
    "generator": GeneratorConfig,
    "ref_encoder": RefEncoderConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
}


def config_from_dict(section: str, data: dict[str, Any]) -> Any:
    """Rebuild a config dataclass from a parsed mapping (tuples restored)."""
    cls = _CONFIG_TYPES[section]
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)
