"""Two-stage RIR generation: RQ-VAE tokenizer + conditional token transformers."""

__version__ = "0.1.0"

from .config import (
    RIR_SAMPLES,
    SAMPLE_RATE,
    GeneratorConfig,
    RefEncoderConfig,
    RqvaeConfig,
    SamplerConfig,
    StftConfig,
    TrainConfig,
)

__all__ = [
    "RIR_SAMPLES",
    "SAMPLE_RATE",
    "GeneratorConfig",
    "RefEncoderConfig",
    "RqvaeConfig",
    "SamplerConfig",
    "StftConfig",
    "TrainConfig",
    "__version__",
]
