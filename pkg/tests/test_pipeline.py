import numpy as np
import pytest
import torch

from rirgen.config import (
    SamplerConfig,
    StftConfig,
    tiny_generator,
    tiny_ref_encoder,
    tiny_rqvae,
    tiny_stft,
)
from rirgen.data import synth_rir
from rirgen.generator import TokenGenerator
from rirgen.pipeline import (
    CheckpointMismatchError,
    check_compatibility,
    estimate_rir_from_models,
)
from rirgen.reference import ReferenceEncoder
from rirgen.rqvae import RirRqvae

TINY_LEN = 48 * 16


def tiny_models(seed=0):
    torch.manual_seed(seed)
    rqvae = RirRqvae(tiny_rqvae()).eval()
    gen_cfg = tiny_generator("rqt")
    generator = TokenGenerator(gen_cfg, codebooks=rqvae.quantizer).eval()
    ref_encoder = ReferenceEncoder(tiny_ref_encoder(out_dim=gen_cfg.model_dim)).eval()
    return rqvae, generator, ref_encoder


class TestCompatibility:
    def test_matching_configs_pass(self):
        rqvae, generator, ref_encoder = tiny_models()
        check_compatibility(rqvae, tiny_stft(), generator, ref_encoder, tiny_stft())

    def test_stft_mismatch_rejected(self):
        rqvae, generator, ref_encoder = tiny_models()
        with pytest.raises(CheckpointMismatchError):
            check_compatibility(
                rqvae, tiny_stft(), generator, ref_encoder, StftConfig(fft_size=128, hop=16)
            )

    def test_shape_mismatch_rejected(self):
        rqvae, _, ref_encoder = tiny_models()
        wrong = TokenGenerator(tiny_generator("rqt", num_bands=8)).eval()
        with pytest.raises(CheckpointMismatchError):
            check_compatibility(rqvae, tiny_stft(), wrong, ref_encoder, tiny_stft())


class TestEstimate:
    def test_output_length_and_finiteness(self):
        rqvae, generator, ref_encoder = tiny_models(seed=1)
        h = synth_rir(np.random.default_rng(0), length=TINY_LEN)
        result = estimate_rir_from_models(
            "recon", (h,), rqvae, tiny_stft(), generator, ref_encoder,
            sampler=SamplerConfig(seed=3), griffin_lim_iters=4,
        )
        assert result.rir.shape == (TINY_LEN,)
        assert np.all(np.isfinite(result.rir))
        assert result.provenance["config_hash"]

    def test_zero_weight_decoder_bias_only(self):
        rqvae, generator, ref_encoder = tiny_models(seed=2)
        with torch.no_grad():
            for p in rqvae.decoder.parameters():
                p.zero_()
        h = synth_rir(np.random.default_rng(1), length=TINY_LEN)
        result = estimate_rir_from_models(
            "recon", (h,), rqvae, tiny_stft(), generator, ref_encoder,
            sampler=SamplerConfig(seed=4), griffin_lim_iters=2,
        )
        assert np.all(np.isfinite(result.rir))
        # zeroed decoder ignores the tokens entirely: any token tensor decodes
        # to the same bias response
        tokens = result.generation.tokens
        other = torch.zeros_like(tokens)
        torch.testing.assert_close(rqvae.detokenize(tokens), rqvae.detokenize(other))
