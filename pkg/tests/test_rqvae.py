import numpy as np
import pytest
import torch

from rirgen.config import paper_rqvae, paper_stft, tiny_rqvae, tiny_stft
from rirgen.rqvae import FilterbankStage, RirRqvae, load_rqvae, mel_filterbank, save_rqvae


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return RirRqvae(tiny_rqvae()).eval()


class TestFilterbank:
    @pytest.mark.parametrize("n_in", [256, 128, 64])
    def test_mel_init_band_structure(self, n_in):
        fb = mel_filterbank(n_in // 2, n_in)
        assert fb.shape == (n_in // 2, n_in)
        assert np.all(fb.sum(axis=1) > 0.0)
        bins = np.arange(n_in)
        centers = (fb * bins).sum(axis=1) / fb.sum(axis=1)
        assert np.all(np.diff(centers) > 0.0)  # monotonically increasing
        widths = (fb > 0.0).sum(axis=1)
        assert widths[-1] > widths[0]  # high bands wider than low bands

    def test_cascade_shapes(self):
        x = torch.randn(2, 4, 256, 16)
        for n in (256, 128, 64):
            x = FilterbankStage(n, n // 2)(x)
        assert x.shape == (2, 4, 32, 16)

    def test_wrong_band_count_rejected(self):
        with pytest.raises(ValueError):
            FilterbankStage(64, 32)(torch.randn(1, 1, 48, 4))


class TestEncodeDecode:
    def test_tiny_shapes(self, tiny_model):
        cfg = tiny_model.cfg
        feat = torch.randn(3, cfg.freq_bins, cfg.frames)
        latent = tiny_model.encode(feat)
        assert latent.shape == (cfg.latent_channels, cfg.latent_bands, cfg.latent_frames)
        recon = tiny_model.decode(latent)
        assert recon.shape == (3, cfg.freq_bins, cfg.frames)

    def test_injectivity_smoke(self, tiny_model):
        torch.manual_seed(1)
        cfg = tiny_model.cfg
        with torch.no_grad():
            for _ in range(16):
                a = torch.randn(3, cfg.freq_bins, cfg.frames)
                b = torch.randn(3, cfg.freq_bins, cfg.frames)
                la, lb = tiny_model.encode(a), tiny_model.encode(b)
                assert (la - lb).abs().max() > 1e-6

    def test_zero_latent_bias_deterministic(self, tiny_model):
        cfg = tiny_model.cfg
        zero = torch.zeros(cfg.latent_channels, cfg.latent_bands, cfg.latent_frames)
        with torch.no_grad():
            one = tiny_model.decode(zero)
            two = tiny_model.decode(zero)
        assert torch.equal(one, two)
        assert one.abs().sum() > 0.0  # bias response, not silence

    def test_shape_mismatch_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.encode(torch.randn(3, 16, 48))
        with pytest.raises(ValueError):
            tiny_model.decode(torch.randn(7, 4, 12))

    def test_full_forward_returns_tokens(self, tiny_model):
        cfg = tiny_model.cfg
        feat = torch.randn(2, 3, cfg.freq_bins, cfg.frames)
        recon, tokens, commitment = tiny_model(feat)
        assert recon.shape == feat.shape
        assert tokens.shape == (2, cfg.latent_bands, cfg.latent_frames, cfg.num_quantizers)
        assert commitment.item() >= 0.0


class TestGradients:
    def test_encoder_matches_finite_differences(self):
        torch.manual_seed(2)
        cfg = tiny_rqvae()
        model = RirRqvae(cfg).double().eval()
        feat = torch.randn(3, cfg.freq_bins, cfg.frames, dtype=torch.float64)
        weights = torch.randn(
            cfg.latent_channels, cfg.latent_bands, cfg.latent_frames, dtype=torch.float64
        )

        def f(x):
            return (model.encode(x) * weights).sum()

        feat.requires_grad_(True)
        f(feat).backward()
        grad = feat.grad.clone()
        rng = np.random.default_rng(3)
        eps = 1e-6
        for _ in range(12):
            i = tuple(rng.integers(0, s) for s in feat.shape)
            probe = feat.detach().clone()
            probe[i] += eps
            plus = f(probe).item()
            probe[i] -= 2 * eps
            minus = f(probe).item()
            fd = (plus - minus) / (2 * eps)
            assert fd == pytest.approx(grad[i].item(), rel=1e-3, abs=1e-7)

    def test_decoder_matches_finite_differences(self):
        torch.manual_seed(4)
        cfg = tiny_rqvae()
        model = RirRqvae(cfg).double().eval()
        latent = torch.randn(
            cfg.latent_channels, cfg.latent_bands, cfg.latent_frames, dtype=torch.float64
        )
        weights = torch.randn(3, cfg.freq_bins, cfg.frames, dtype=torch.float64)

        def f(x):
            return (model.decode(x) * weights).sum()

        latent.requires_grad_(True)
        f(latent).backward()
        grad = latent.grad.clone()
        rng = np.random.default_rng(5)
        eps = 1e-6
        for _ in range(12):
            i = tuple(rng.integers(0, s) for s in latent.shape)
            probe = latent.detach().clone()
            probe[i] += eps
            plus = f(probe).item()
            probe[i] -= 2 * eps
            minus = f(probe).item()
            fd = (plus - minus) / (2 * eps)
            assert fd == pytest.approx(grad[i].item(), rel=1e-3, abs=1e-7)


class TestCheckpoint:
    def test_save_load_round_trip(self, tiny_model, tmp_path):
        path = tmp_path / "rqvae.pt"
        save_rqvae(path, tiny_model, tiny_stft(), step=7, extra={"note": "test"})
        loaded, stft, blob = load_rqvae(path)
        assert blob["version"] == 1
        assert blob["step"] == 7
        assert stft == tiny_stft()
        for a, b in zip(tiny_model.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)

    def test_rejects_foreign_blob(self, tmp_path):
        torch.save({"kind": "other"}, tmp_path / "x.pt")
        with pytest.raises(ValueError):
            load_rqvae(tmp_path / "x.pt")


@pytest.mark.slow
def test_overfit_round_trip_mse_below_one_percent():
    # overfitting the quantized autoencoder on 4 fixed RIRs drives the
    # round-trip error below 1% of the feature variance
    import torch.nn.functional as F

    from rirgen import dsp
    from rirgen.config import RqvaeConfig, TrainConfig
    from rirgen.data import synth_rir
    from rirgen.training import Stage1Trainer

    stft = tiny_stft()
    rng = np.random.default_rng(0)
    rirs = [synth_rir(rng, length=48 * 16, rt60_s=0.003 + 0.002 * i) for i in range(4)]
    feats = torch.as_tensor(
        np.stack([dsp.analyze(h, stft) for h in rirs]), dtype=torch.float32
    )
    cfg = RqvaeConfig(
        freq_bins=32, frames=48, channels=(16, 24, 32), latent_channels=32, codebook_size=64
    )
    torch.manual_seed(0)
    model = RirRqvae(cfg)
    train_cfg = TrainConfig(
        stage=1, batch_size=4, peak_lr=3e-3, warmup_steps=50,
        halving_interval=1000, val_interval=10**6, seed=0,
    )
    Stage1Trainer(model, feats, None, train_cfg, stft).train(max_steps=3000)
    model.eval()
    with torch.no_grad():
        recon, _, _ = model(feats)
    ratio = float(F.mse_loss(recon, feats)) / float(feats.var())
    assert ratio <= 0.01


@pytest.mark.slow
def test_paper_scale_shapes():
    torch.manual_seed(6)
    model = RirRqvae(paper_rqvae()).eval()
    feat = torch.randn(3, 256, 768)
    with torch.no_grad():
        latent = model.encode(feat)
        assert latent.shape == (192, 32, 192)
        recon = model.decode(latent)
    assert recon.shape == (3, 256, 768)
