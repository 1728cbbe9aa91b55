"""End-to-end estimation: reference audio -> tokens -> feature -> waveform."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .config import SamplerConfig, StftConfig, config_hash
from .generator import GenerationResult, TokenGenerator
from .reference import ReferenceEncoder, Task, condition_for_task
from .rqvae import RirRqvae, load_rqvae
from .training import load_generator_checkpoint


class CheckpointMismatchError(ValueError):
    """Stage-1 and stage-2 checkpoints disagree on shapes or transforms."""


def check_compatibility(
    rqvae: RirRqvae,
    stft: StftConfig,
    generator: TokenGenerator,
    ref_encoder: ReferenceEncoder,
    gen_stft: StftConfig,
) -> None:
    gcfg, rcfg, ecfg = generator.cfg, rqvae.cfg, ref_encoder.cfg
    problems = []
    if stft != gen_stft:
        problems.append(f"stft configs differ: {stft} vs {gen_stft}")
    if gcfg.num_bands != rcfg.latent_bands:
        problems.append(f"bands {gcfg.num_bands} != latent bands {rcfg.latent_bands}")
    if gcfg.num_frames != rcfg.latent_frames:
        problems.append(f"frames {gcfg.num_frames} != latent frames {rcfg.latent_frames}")
    if gcfg.num_quantizers != rcfg.num_quantizers:
        problems.append("quantizer depth mismatch")
    if gcfg.codebook_size != rcfg.codebook_size:
        problems.append("codebook size mismatch")
    if gcfg.latent_channels != rcfg.latent_channels:
        problems.append("latent channel mismatch")
    if ecfg.freq_bins != rcfg.freq_bins:
        problems.append("reference encoder frequency bins mismatch")
    if ecfg.out_dim != gcfg.model_dim:
        problems.append("reference latent width != generator model width")
    if problems:
        raise CheckpointMismatchError("; ".join(problems))


@dataclass
class EstimateResult:
    rir: np.ndarray
    generation: GenerationResult
    provenance: dict


@torch.no_grad()
def estimate_rir_from_models(
    task: Task | str,
    references: tuple[np.ndarray, ...],
    rqvae: RirRqvae,
    stft: StftConfig,
    generator: TokenGenerator,
    ref_encoder: ReferenceEncoder,
    sampler: SamplerConfig | None = None,
    max_steps: int | None = None,
    griffin_lim_iters: int = 32,
) -> EstimateResult:
    """Condition, generate tokens, decode with the frozen tokenizer, invert."""
    sampler = sampler or SamplerConfig()
    rqvae.eval()
    generator.eval()
    ref_encoder.eval()
    z = condition_for_task(task, references, ref_encoder, stft)
    result = generator.generate(condition=z, sampler=sampler, max_steps=max_steps)
    feat = rqvae.detokenize(result.tokens)
    rir = dsp.synthesize(feat.double().numpy(), stft, iterations=griffin_lim_iters)
    rir = dsp.validate_rir(rir, rqvae.cfg.frames * stft.hop)
    provenance = {
        "task": Task.from_tag(task).value if isinstance(task, str) else task.value,
        "strategy": generator.cfg.strategy,
        "sampler": sampler.__dict__,
        "steps": result.steps,
        "stopped_early": result.stopped_early,
        "config_hash": config_hash(rqvae.cfg, stft, generator.cfg, ref_encoder.cfg),
        "output_samples": len(rir),
    }
    return EstimateResult(rir=rir, generation=result, provenance=provenance)


def estimate_rir(
    task: Task | str,
    references: tuple[np.ndarray, ...],
    rqvae_checkpoint: str | Path,
    generator_checkpoint: str | Path,
    sampler: SamplerConfig | None = None,
    max_steps: int | None = None,
    griffin_lim_iters: int = 32,
) -> EstimateResult:
    """Checkpoint-level entry point; validates cross-checkpoint compatibility."""
    rqvae, stft, _ = load_rqvae(rqvae_checkpoint)
    generator, ref_encoder, _, gen_stft, _ = load_generator_checkpoint(generator_checkpoint)
    check_compatibility(rqvae, stft, generator, ref_encoder, gen_stft)
    generator.set_codebooks(rqvae.quantizer)
    return estimate_rir_from_models(
        task, references, rqvae, stft, generator, ref_encoder,
        sampler=sampler, max_steps=max_steps, griffin_lim_iters=griffin_lim_iters,
    )
