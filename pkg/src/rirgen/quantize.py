"""Residual vector quantization with EMA codebook learning.

Each depth quantizes the residual left by the previous depths. Codebooks are
trained with exponential-moving-average statistics (no codebook gradient);
the encoder receives gradients through the straight-through estimator plus a
commitment term. Inactive depths (quantization dropout) are marked with the
padding id ``codebook_size + 1`` and ignored by :meth:`dequantize`.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans


def eos_id(codebook_size: int) -> int:
    return codebook_size


def pad_id(codebook_size: int) -> int:
    return codebook_size + 1


class Codebook(nn.Module):
    """One quantizer level: 512 x dim vectors plus EMA and staleness state."""

    def __init__(self, codebook_size: int, dim: int, ema_decay: float, ema_eps: float):
        super().__init__()
        self.codebook_size = codebook_size
        self.dim = dim
        self.ema_decay = ema_decay
        self.ema_eps = ema_eps
        # zeros until kmeans_init; a zero residual then quantizes to a zero code
        self.register_buffer("vectors", torch.zeros(codebook_size, dim))
        self.register_buffer("ema_counts", torch.zeros(codebook_size))
        self.register_buffer("ema_sums", torch.zeros(codebook_size, dim))
        self.register_buffer("stale_batches", torch.zeros(codebook_size, dtype=torch.long))

    def nearest(self, x: torch.Tensor) -> torch.Tensor:
        """Index of the closest code per row of x (N, dim); ties -> lowest index."""
        dist = (
            x.pow(2).sum(dim=1, keepdim=True)
            - 2.0 * x @ self.vectors.T
            + self.vectors.pow(2).sum(dim=1)
        )
        return dist.argmin(dim=1)

    def lookup(self, idx: torch.Tensor) -> torch.Tensor:
        return self.vectors[idx]

    def ema_update(self, x: torch.Tensor, idx: torch.Tensor) -> None:
        """One EMA step from the assigned vectors, then stale-code reset."""
        onehot = torch.zeros(x.shape[0], self.codebook_size, dtype=x.dtype, device=x.device)
        onehot.scatter_(1, idx.unsqueeze(1), 1.0)
        counts = onehot.sum(dim=0)
        sums = onehot.T @ x
        g = self.ema_decay
        self.ema_counts.mul_(g).add_(counts, alpha=1.0 - g)
        self.ema_sums.mul_(g).add_(sums, alpha=1.0 - g)
        self.vectors.copy_(self.ema_sums / (self.ema_counts.unsqueeze(1) + self.ema_eps))
        self.stale_batches.add_(1)
        self.stale_batches[counts > 0] = 0

    def reset_stale(self, pool: torch.Tensor, threshold: int, rng: torch.Generator) -> int:
        """Reinitialize codes unused for ``threshold`` consecutive batches."""
        stale = torch.nonzero(self.stale_batches >= threshold).squeeze(1)
        if stale.numel() == 0 or pool.shape[0] == 0:
            return 0
        picks = torch.randint(0, pool.shape[0], (stale.numel(),), generator=rng)
        fresh = pool[picks]
        self.vectors[stale] = fresh
        self.ema_sums[stale] = fresh
        self.ema_counts[stale] = 1.0
        self.stale_batches[stale] = 0
        return int(stale.numel())


class ResidualQuantizer(nn.Module):
    """Stack of codebooks applied to successive residuals.

    Token layout is (..., F, T, depth); the straight-through output keeps the
    input's gradient path intact.
    """

    def __init__(
        self,
        num_quantizers: int = 3,
        codebook_size: int = 512,
        dim: int = 192,
        ema_decay: float = 0.98,
        ema_eps: float = 1e-5,
        commitment_weight: float = 0.25,
        stale_threshold: int = 2,
        dropout_enabled: bool = True,
    ):
        super().__init__()
        self.num_quantizers = num_quantizers
        self.codebook_size = codebook_size
        self.dim = dim
        self.commitment_weight = commitment_weight
        self.stale_threshold = stale_threshold
        self.dropout_enabled = dropout_enabled
        self.codebooks = nn.ModuleList(
            Codebook(codebook_size, dim, ema_decay, ema_eps) for _ in range(num_quantizers)
        )

    @property
    def sentinel_id(self) -> int:
        return pad_id(self.codebook_size)

    def sample_active_depth(self, rng: torch.Generator | None = None) -> int:
        """Quantization dropout: uniform depth in 1..D while training."""
        if not (self.dropout_enabled and self.training):
            return self.num_quantizers
        return int(torch.randint(1, self.num_quantizers + 1, (1,), generator=rng).item())

    def quantize(
        self,
        latent: torch.Tensor,
        active_depth: int | None = None,
        update: bool = False,
        rng: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """latent (B, C, F, T) or (C, F, T) -> (tokens, quantized, commitment).

        Tokens are (B, F, T, D)/(F, T, D) long; depths >= ``active_depth`` hold
        the sentinel id. ``update`` runs the EMA codebook step (training only).
        """
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        b, c, f, t = latent.shape
        if c != self.dim:
            raise ValueError(f"latent channels {c} != quantizer dim {self.dim}")
        depth = self.num_quantizers if active_depth is None else active_depth
        if not 1 <= depth <= self.num_quantizers:
            raise ValueError(f"active_depth must be in 1..{self.num_quantizers}")
        if update and not self.training:
            raise RuntimeError("codebook updates are only valid in training mode")

        flat = latent.permute(0, 2, 3, 1).reshape(-1, c)
        tokens = torch.full(
            (flat.shape[0], self.num_quantizers), self.sentinel_id,
            dtype=torch.long, device=latent.device,
        )
        residual = flat
        quantized = torch.zeros_like(flat)
        per_depth: list[tuple[torch.Tensor, torch.Tensor]] = []
        with torch.no_grad():
            for d in range(depth):
                book = self.codebooks[d]
                idx = book.nearest(residual)
                chosen = book.lookup(idx)
                # a depth that cannot improve the residual is skipped (sentinel
                # token, zero contribution), so residual norms never grow
                keep = (residual - chosen).pow(2).sum(dim=1) <= residual.pow(2).sum(dim=1)
                chosen = chosen * keep.unsqueeze(1)
                tokens[:, d] = torch.where(keep, idx, idx.new_full(idx.shape, self.sentinel_id))
                per_depth.append((residual[keep], idx[keep]))
                residual = residual - chosen
                quantized = quantized + chosen
        if update:
            self.update_codebooks(per_depth, rng=rng)

        commitment = (flat - quantized).pow(2).mean()
        # straight-through with a value bit-identical to the hard code sum:
        # (flat - flat.detach()) is exactly zero but carries d/dflat = 1
        quantized_st = quantized + (flat - flat.detach())
        quantized_st = quantized_st.reshape(b, f, t, c).permute(0, 3, 1, 2)
        tokens = tokens.reshape(b, f, t, self.num_quantizers)
        if squeeze:
            return tokens[0], quantized_st[0], commitment
        return tokens, quantized_st, commitment

    def update_codebooks(
        self,
        per_depth: list[tuple[torch.Tensor, torch.Tensor]],
        rng: torch.Generator | None = None,
    ) -> None:
        """EMA step per depth from (residual batch, chosen indices) pairs."""
        if not self.training:
            raise RuntimeError("codebook updates are only valid in training mode")
        rng = rng or torch.Generator().manual_seed(0)
        for d, (residuals, idx) in enumerate(per_depth):
            book = self.codebooks[d]
            book.ema_update(residuals.detach(), idx)
            book.reset_stale(residuals.detach(), self.stale_threshold, rng)

    def dequantize(self, tokens: torch.Tensor) -> torch.Tensor:
        """(.., F, T, D) indices -> (.., C, F, T) summed code vectors.

        Ids in [codebook_size, codebook_size + 2) are treated as inactive
        depths; anything outside that range is an error.
        """
        squeeze = tokens.dim() == 3
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.min() < 0 or tokens.max() >= self.codebook_size + 2:
            raise ValueError("token index out of range")
        b, f, t, d = tokens.shape
        if d > self.num_quantizers:
            raise ValueError(f"token depth {d} exceeds {self.num_quantizers}")
        out = torch.zeros(
            b, f, t, self.dim, dtype=self.codebooks[0].vectors.dtype, device=tokens.device
        )
        for level in range(d):
            idx = tokens[..., level]
            valid = idx < self.codebook_size
            safe = torch.where(valid, idx, torch.zeros_like(idx))
            codes = self.codebooks[level].lookup(safe.reshape(-1)).reshape(b, f, t, self.dim)
            out = out + codes * valid.unsqueeze(-1)
        out = out.permute(0, 3, 1, 2)
        return out[0] if squeeze else out

    def kmeans_init(self, samples: torch.Tensor, seed: int = 0, max_iter: int = 50) -> None:
        """Initialize each depth's codes by k-means over successive residuals.

        ``samples`` is (N, dim) with N >= codebook_size. EMA statistics are
        seeded from the resulting cluster sizes so unassigned codes persist
        through subsequent updates.
        """
        if samples.dim() != 2 or samples.shape[1] != self.dim:
            raise ValueError(f"expected samples of shape (N, {self.dim})")
        if samples.shape[0] < self.codebook_size:
            raise ValueError(
                f"need at least {self.codebook_size} samples, got {samples.shape[0]}"
            )
        residual = samples.detach().cpu().double().numpy()
        for d, book in enumerate(self.codebooks):
            if residual.shape[0] == self.codebook_size:
                centers = residual.copy()
                labels = np.arange(self.codebook_size)
            else:
                km = KMeans(
                    n_clusters=self.codebook_size,
                    n_init=1,
                    max_iter=max_iter,
                    random_state=seed + d,
                ).fit(residual)
                centers, labels = km.cluster_centers_, km.labels_
            counts = np.bincount(labels, minlength=self.codebook_size).astype(np.float64)
            counts = np.maximum(counts, 1.0)
            like = book.vectors
            book.vectors.copy_(torch.as_tensor(centers, dtype=like.dtype, device=like.device))
            book.ema_counts.copy_(
                torch.as_tensor(counts, dtype=like.dtype, device=like.device)
            )
            book.ema_sums.copy_(book.vectors * book.ema_counts.unsqueeze(1))
            book.stale_batches.zero_()
            residual = residual - centers[labels]
