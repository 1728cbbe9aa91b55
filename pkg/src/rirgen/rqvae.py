"""Feature autoencoder with filterbank frequency downsampling and residual VQ.

The encoder halves the frequency axis three times with learnable dense
filterbank matrices (Mel-initialized, so the cascade compresses high
frequencies harder than strided convolutions would compress the lows) and the
time axis twice with strided convolutions. The decoder mirrors it with
transposed filterbanks/convolutions. Checkpoints are self-describing.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import RqvaeConfig, SAMPLE_RATE, StftConfig, config_from_dict
from .quantize import ResidualQuantizer

CHECKPOINT_VERSION = 1


def mel_filterbank(n_out: int, n_in: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(n_out, n_in) triangular Mel filterbank, rows normalized to sum 1.

    Input bins are treated as a linear axis over [0, sample_rate / 2). Band
    edges are Mel-spaced with a one-bin spacing floor, so at a 2:1 reduction
    every band keeps distinct support and high-frequency bands stay wider than
    low-frequency ones.
    """

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    nyquist = sample_rate / 2.0
    mel_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_out + 2))
    edges = np.maximum(mel_hz / nyquist * n_in, np.arange(n_out + 2, dtype=np.float64))
    bins = np.arange(n_in, dtype=np.float64)
    weights = np.zeros((n_out, n_in))
    for k in range(n_out):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        rising = (bins - lo) / max(mid - lo, 1e-9)
        falling = (hi - bins) / max(hi - mid, 1e-9)
        weights[k] = np.clip(np.minimum(rising, falling), 0.0, None)
        if weights[k].sum() <= 0.0:
            weights[k, min(n_in - 1, int(round(mid)))] = 1.0
    return weights / weights.sum(axis=1, keepdims=True)


class FilterbankStage(nn.Module):
    """Learnable dense (F_out, F_in) matrix applied along the frequency axis."""

    def __init__(self, n_in: int, n_out: int, transpose: bool = False):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        if transpose:
            init = np.linalg.pinv(mel_filterbank(n_in, n_out))
        else:
            init = mel_filterbank(n_out, n_in)
        self.matrix = nn.Parameter(torch.as_tensor(init, dtype=torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.n_in:
            raise ValueError(f"expected {self.n_in} bands, got {x.shape[-2]}")
        return torch.einsum("of,bcft->bcot", self.matrix, x)


class ResBlock(nn.Module):
    """Pre-activation residual block: two 3x3 convolutions with a skip."""

    def __init__(self, channels: int):
        super().__init__()
        groups = max(1, channels // 8)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """(B, 3, F, T) -> (B, C_lat, F/8, T/4)."""

    def __init__(self, cfg: RqvaeConfig):
        super().__init__()
        c0, c1, c2 = cfg.channels
        f = cfg.freq_bins
        self.stem = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.act = nn.GELU()
        self.fb1 = FilterbankStage(f, f // 2)
        self.down1 = nn.Conv2d(c0, c0, 3, stride=(1, 2), padding=1)
        self.res1 = ResBlock(c0)
        self.fb2 = FilterbankStage(f // 2, f // 4)
        self.down2 = nn.Conv2d(c0, c1, 3, stride=(1, 2), padding=1)
        self.res2 = ResBlock(c1)
        self.fb3 = FilterbankStage(f // 4, f // 8)
        self.proj = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)
        self.res3 = ResBlock(cfg.latent_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.res1(self.down1(self.act(self.fb1(x))))
        x = self.res2(self.down2(self.act(self.fb2(x))))
        x = self.res3(self.proj(self.act(self.fb3(x))))
        return x


class Decoder(nn.Module):
    """(B, C_lat, F/8, T/4) -> (B, 3, F, T), mirroring the encoder."""

    def __init__(self, cfg: RqvaeConfig):
        super().__init__()
        c0, c1, c2 = cfg.channels
        f = cfg.freq_bins
        self.act = nn.GELU()
        self.res3 = ResBlock(cfg.latent_channels)
        self.proj = nn.Conv2d(cfg.latent_channels, c1, 3, padding=1)
        self.fb3 = FilterbankStage(f // 8, f // 4, transpose=True)
        self.res2 = ResBlock(c1)
        self.up2 = nn.ConvTranspose2d(c1, c0, 3, stride=(1, 2), padding=1, output_padding=(0, 1))
        self.fb2 = FilterbankStage(f // 4, f // 2, transpose=True)
        self.res1 = ResBlock(c0)
        self.up1 = nn.ConvTranspose2d(c0, c0, 3, stride=(1, 2), padding=1, output_padding=(0, 1))
        self.fb1 = FilterbankStage(f // 2, f, transpose=True)
        self.head = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.fb3(self.act(self.proj(self.res3(x))))
        x = self.fb2(self.act(self.up2(self.res2(x))))
        x = self.fb1(self.act(self.up1(self.res1(x))))
        return self.head(x)


class RirRqvae(nn.Module):
    """Autoencoder + residual quantizer over (3, F, T) feature stacks.

    Unbatched (3, F, T) inputs are accepted everywhere and return unbatched
    outputs; training paths use batched (B, 3, F, T) tensors.
    """

    def __init__(self, cfg: RqvaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.quantizer = ResidualQuantizer(
            num_quantizers=cfg.num_quantizers,
            codebook_size=cfg.codebook_size,
            dim=cfg.latent_channels,
            ema_decay=cfg.ema_decay,
            ema_eps=cfg.ema_eps,
            commitment_weight=cfg.commitment_weight,
            stale_threshold=cfg.stale_threshold,
            dropout_enabled=cfg.quantization_dropout,
        )

    def _check_feat(self, feat: torch.Tensor) -> tuple[torch.Tensor, bool]:
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat.unsqueeze(0)
        expected = (self.cfg.in_channels, self.cfg.freq_bins, self.cfg.frames)
        if tuple(feat.shape[1:]) != expected:
            raise ValueError(f"expected feature shape {expected}, got {tuple(feat.shape[1:])}")
        return feat, squeeze

    def encode(self, feat: torch.Tensor) -> torch.Tensor:
        feat, squeeze = self._check_feat(feat)
        latent = self.encoder(feat)
        return latent[0] if squeeze else latent

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        expected = (self.cfg.latent_channels, self.cfg.latent_bands, self.cfg.latent_frames)
        if tuple(latent.shape[1:]) != expected:
            raise ValueError(f"expected latent shape {expected}, got {tuple(latent.shape[1:])}")
        feat = self.decoder(latent)
        return feat[0] if squeeze else feat

    def forward(
        self,
        feat: torch.Tensor,
        active_depth: int | None = None,
        update: bool = False,
        rng: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Full pass: returns (reconstruction, tokens, commitment loss)."""
        latent = self.encode(feat)
        tokens, quantized, commitment = self.quantizer.quantize(
            latent, active_depth=active_depth, update=update, rng=rng
        )
        return self.decode(quantized), tokens, commitment

    @torch.no_grad()
    def tokenize(self, feat: torch.Tensor) -> torch.Tensor:
        """Feature -> full-depth token tensor (F', T', D), eval path."""
        tokens, _, _ = self.quantizer.quantize(self.encode(feat))
        return tokens

    @torch.no_grad()
    def detokenize(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.decode(self.quantizer.dequantize(tokens))


def save_rqvae(
    path: str | Path,
    model: RirRqvae,
    stft: StftConfig,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": "rqvae",
            "rqvae_config": dataclasses.asdict(model.cfg),
            "stft_config": dataclasses.asdict(stft),
            "state_dict": model.state_dict(),
            "step": step,
            "extra": extra or {},
        },
        str(path),
    )


def load_rqvae(path: str | Path) -> tuple[RirRqvae, StftConfig, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "rqvae" or "version" not in blob:
        raise ValueError(f"{path} is not an rqvae checkpoint")
    cfg = config_from_dict("rqvae", blob["rqvae_config"])
    stft = config_from_dict("stft", blob["stft_config"])
    model = RirRqvae(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, stft, blob
