"""Axial transformer backbones.

The TF-Transformer alternates a bidirectional frequency-axis layer (time as
batch) with a causal time-axis layer (frequency as batch). The Depth
Transformer is a small causal decoder over quantizer depth at one (band, step)
position. Both count their forward passes so compute-asymmetry claims between
generation strategies can be asserted.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def causal_mask(length: int, device: torch.device) -> torch.Tensor:
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


class TransformerLayer(nn.Module):
    """Pre-LN self-attention + feed-forward over (B, S, D) sequences."""

    def __init__(self, dim: int, ff_dim: int, heads: int, dropout: float):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        h = self.norm_attn(x)
        mask = causal_mask(x.shape[1], x.device) if causal else None
        attn, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        x = x + self.drop(attn)
        x = x + self.drop(self.ff(self.norm_ff(x)))
        return x


class AxialBlock(nn.Module):
    """Frequency-axis encoder layer followed by a time-axis decoder layer."""

    def __init__(self, dim: int, ff_dim: int, heads: int, dropout: float):
        super().__init__()
        self.freq_layer = TransformerLayer(dim, ff_dim, heads, dropout)
        self.time_layer = TransformerLayer(dim, ff_dim, heads, dropout)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        b, d, f, t = x.shape
        # frequency attention: time treated as batch, always bidirectional
        h = x.permute(0, 3, 2, 1).reshape(b * t, f, d)
        h = self.freq_layer(h, causal=False)
        x = h.reshape(b, t, f, d).permute(0, 3, 2, 1)
        # time attention: frequency treated as batch, causal unless disabled
        h = x.permute(0, 2, 3, 1).reshape(b * f, t, d)
        h = self.time_layer(h, causal=causal)
        return h.reshape(b, f, t, d).permute(0, 3, 1, 2)


class TFTransformer(nn.Module):
    """Stack of axial blocks over (B, D, F, L) features, shape preserving."""

    def __init__(
        self, dim: int = 384, ff_dim: int = 1536, heads: int = 4,
        blocks: int = 4, dropout: float = 0.1,
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            AxialBlock(dim, ff_dim, heads, dropout) for _ in range(blocks)
        )
        self.final_norm = nn.LayerNorm(dim)
        self.causal_lengths: list[int] = []
        self.noncausal_lengths: list[int] = []

    def reset_stats(self) -> None:
        self.causal_lengths = []
        self.noncausal_lengths = []

    def forward(self, x: torch.Tensor, causal: bool = True) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (B, D, F, L), got {tuple(x.shape)}")
        if x.shape[-1] < 1:
            raise ValueError("sequence must have at least one column")
        (self.causal_lengths if causal else self.noncausal_lengths).append(x.shape[-1])
        for block in self.blocks:
            x = block(x, causal)
        return self.final_norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class DepthTransformer(nn.Module):
    """Causal decoder over quantizer-depth positions, (B, S, D) in and out."""

    def __init__(
        self, dim: int = 384, ff_dim: int = 1536, heads: int = 4,
        layers: int = 2, dropout: float = 0.1,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerLayer(dim, ff_dim, heads, dropout) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(dim)
        self.calls = 0

    def forward(self, x: torch.Tensor, causal: bool = True) -> torch.Tensor:
        self.calls += x.shape[0]
        for layer in self.layers:
            x = layer(x, causal)
        return self.final_norm(x)
