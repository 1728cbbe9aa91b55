"""Reference audio -> band-aligned conditioning latent.

The trunk is a speech-enhancement style downsampling encoder: three
filterbank halvings (same Mel-initialized mapping as the autoencoder, so band
f of the latent aligns with token band f), each followed by time-dilated
convolutions and axial time/frequency self-attention. Attentive pooling with
learned queries collapses the time axis, so the latent shape is independent
of the reference duration.
"""

from __future__ import annotations

import enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dsp
from .config import RefEncoderConfig, StftConfig
from .rqvae import FilterbankStage


class Task(enum.Enum):
    ANALYSIS_SYNTHESIS = "recon"
    BLIND = "blind"
    ACOUSTIC_MATCHING = "match"

    @classmethod
    def from_tag(cls, tag: str) -> "Task":
        for task in cls:
            if task.value == tag:
                return task
        raise ValueError(f"unknown task tag {tag!r}")


class DilatedConvBlock(nn.Module):
    """Residual stack of time-dilated 3x3 convolutions."""

    def __init__(self, channels: int, dilations: tuple[int, ...]):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=(1, d), dilation=(1, d))
            for d in dilations
        )
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = x + conv(self.act(x))
        return x


class AxialSelfAttention(nn.Module):
    """Time-axis then frequency-axis self-attention at reduced width."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        inner = max(heads, channels // 4)
        inner += (-inner) % heads  # head-divisible width
        self.t_qkv = nn.Conv2d(channels, inner * 3, 1)
        self.f_qkv = nn.Conv2d(channels, inner * 3, 1)
        self.t_attn = nn.MultiheadAttention(inner, heads, batch_first=True)
        self.f_attn = nn.MultiheadAttention(inner, heads, batch_first=True)
        self.t_out = nn.Conv2d(inner, channels, 1)
        self.f_out = nn.Conv2d(inner, channels, 1)

    @staticmethod
    def _attend(qkv: torch.Tensor, attn: nn.MultiheadAttention) -> torch.Tensor:
        q, k, v = qkv.chunk(3, dim=-1)
        out, _ = attn(q, k, v, need_weights=False)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, f, t = x.shape
        qkv = self.t_qkv(x).permute(0, 2, 3, 1).reshape(b * f, t, -1)
        h = self._attend(qkv, self.t_attn).reshape(b, f, t, -1).permute(0, 3, 1, 2)
        x = x + self.t_out(h)
        qkv = self.f_qkv(x).permute(0, 3, 2, 1).reshape(b * t, f, -1)
        h = self._attend(qkv, self.f_attn).reshape(b, t, f, -1).permute(0, 3, 2, 1)
        return x + self.f_out(h)


class AttentivePooling(nn.Module):
    """Learned queries attend over time per band; values are the raw features.

    Keeping the value path untouched means time-constant features pool to
    exactly that constant.
    """

    def __init__(self, dim: int, num_queries: int):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.02)
        self.key_proj = nn.Linear(dim, dim)
        self.scale = dim**-0.5

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Attention weights (B, F, Q, T), softmax-normalized over T."""
        keys = self.key_proj(x)  # (B, F, T, D)
        scores = torch.einsum("qd,bftd->bfqt", self.queries, keys) * self.scale
        return F.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, F, T, D) -> (B, F, Q, D)."""
        return torch.einsum("bfqt,bftd->bfqd", self.weights(x), x)


class ReferenceEncoder(nn.Module):
    """(B, 3, F, T) reference features -> conditioning latent (B, D, F/8, Q)."""

    def __init__(self, cfg: RefEncoderConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.freq_bins
        chans = (cfg.base_channels, cfg.base_channels, cfg.bottleneck_channels)
        self.stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        stages = []
        prev = chans[0]
        for i, ch in enumerate(chans):
            stages.append(
                nn.ModuleDict(
                    {
                        "fb": FilterbankStage(f >> i, f >> (i + 1)),
                        "chan": nn.Conv2d(prev, ch, 1),
                        "conv": DilatedConvBlock(ch, cfg.dilations),
                        "attn": AxialSelfAttention(ch, cfg.heads),
                    }
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.act = nn.GELU()
        self.proj = nn.Conv2d(prev, cfg.out_dim, 1)
        self.pool = AttentivePooling(cfg.out_dim, cfg.num_queries)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat.unsqueeze(0)
        if feat.shape[1] != self.cfg.in_channels or feat.shape[2] != self.cfg.freq_bins:
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, {self.cfg.freq_bins}, T), "
                f"got {tuple(feat.shape)}"
            )
        x = self.stem(feat)
        for stage in self.stages:
            x = stage["fb"](x)
            x = stage["chan"](self.act(x))
            x = stage["conv"](x)
            x = stage["attn"](x)
        x = self.proj(x)  # (B, D, F/8, T)
        pooled = self.pool(x.permute(0, 2, 3, 1))  # (B, F/8, Q, D)
        z = pooled.permute(0, 3, 1, 2)  # (B, D, F/8, Q)
        return z[0] if squeeze else z

    def encode_audio(self, audio: np.ndarray, stft: StftConfig) -> torch.Tensor:
        """Waveform -> conditioning latent (unbatched)."""
        audio = np.asarray(audio, dtype=np.float64)
        if audio.size < stft.hop:
            raise ValueError("reference audio shorter than one frame")
        usable = (len(audio) // stft.hop) * stft.hop
        feat = dsp.analyze(audio[:usable], stft)
        param = next(self.parameters())
        return self.forward(torch.as_tensor(feat, dtype=param.dtype, device=param.device))


def condition_for_task(
    task: Task | str,
    inputs: tuple[np.ndarray, ...],
    encoder: ReferenceEncoder,
    stft: StftConfig,
) -> torch.Tensor:
    """Reference latent per task: h, y, or the target-minus-source difference."""
    task = Task.from_tag(task) if isinstance(task, str) else task
    arity = 2 if task is Task.ACOUSTIC_MATCHING else 1
    if len(inputs) != arity:
        raise ValueError(f"{task.name} expects {arity} reference input(s), got {len(inputs)}")
    if task is Task.ACOUSTIC_MATCHING:
        source, target = inputs
        return encoder.encode_audio(target, stft) - encoder.encode_audio(source, stft)
    return encoder.encode_audio(inputs[0], stft)
