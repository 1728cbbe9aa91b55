"""Conditional token generators over (band, frame, depth) index tensors.

Three factorizations share one backbone family:

* ``audiolm``: one causal TF-Transformer over the flattened (time, depth)
  axis; every step emits a whole frequency column.
* ``rqt``: a causal TF-Transformer over time only, plus a small causal Depth
  Transformer that decodes the quantizer depths at each (band, step).
* ``valle``: causal depth-0 decoding (AudioLM-style), then a second
  non-causal TF-Transformer fills the deeper levels in one pass per depth.

Conditioning latents are prepended to the transformer input as band-aligned
prefix columns. Inputs are always dequantized code sums projected to the
model width; special ids (end-of-sequence, padding) embed to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GeneratorConfig, SamplerConfig
from .quantize import ResidualQuantizer
from .transformer import DepthTransformer, TFTransformer


def sample_categorical(
    logits: torch.Tensor, sampler: SamplerConfig, gen: torch.Generator
) -> torch.Tensor:
    """Temperature, then top-k, then the smallest top-p prefix; ties by index.

    ``logits`` is (..., V); returns long ids of shape (...).
    """
    shape = logits.shape[:-1]
    flat = logits.reshape(-1, logits.shape[-1])
    if sampler.temperature == 0.0:
        return flat.argmax(dim=-1).reshape(shape)
    probs = F.softmax(flat / sampler.temperature, dim=-1)
    # stable descending sort keeps index order on ties
    sorted_probs, order = torch.sort(probs, dim=-1, descending=True, stable=True)
    k = min(sampler.top_k, probs.shape[-1])
    sorted_probs[:, k:] = 0.0
    cum = torch.cumsum(sorted_probs, dim=-1)
    beyond = (cum - sorted_probs) >= sampler.top_p  # everything after the crossing bin
    sorted_probs[beyond] = 0.0
    sorted_probs = sorted_probs / sorted_probs.sum(dim=-1, keepdim=True)
    picks = torch.multinomial(sorted_probs, 1, generator=gen)
    return order.gather(-1, picks).squeeze(-1).reshape(shape)


@dataclass
class GenerationResult:
    tokens: torch.Tensor  # (F, T, D) long, padded to full length
    steps: int  # decoded time steps
    stopped_early: bool


class TokenGenerator(nn.Module):
    """One generation strategy: backbone(s), heads, embeddings, sampling."""

    def __init__(self, cfg: GeneratorConfig, codebooks: ResidualQuantizer | None = None):
        super().__init__()
        self.cfg = cfg
        dm = cfg.model_dim
        self.tf = TFTransformer(dm, cfg.ff_dim, cfg.heads, cfg.blocks, cfg.dropout)
        if cfg.strategy == "rqt":
            self.depth_tf = DepthTransformer(
                dm, cfg.ff_dim, cfg.heads, cfg.depth_layers, cfg.dropout
            )
            self.depth_input_proj = nn.Linear(cfg.latent_channels, dm)
            self.depth_pos_embed = nn.Parameter(torch.zeros(cfg.num_quantizers, dm))
        if cfg.strategy == "valle":
            self.stage_b = TFTransformer(dm, cfg.ff_dim, cfg.heads, cfg.blocks, cfg.dropout)
        if cfg.strategy in ("audiolm", "valle"):
            self.depth_embed = nn.Parameter(torch.zeros(cfg.num_quantizers, dm))
        self.input_proj = nn.Linear(cfg.latent_channels, dm)
        self.start_column = nn.Parameter(torch.zeros(cfg.num_bands, dm))  # x_S
        self.band_embed = nn.Parameter(torch.zeros(cfg.num_bands, dm))
        self.time_embed = nn.Parameter(torch.zeros(cfg.num_frames, dm))
        self.cond_pos_embed = nn.Parameter(torch.zeros(cfg.cond_columns, dm))
        self.heads = nn.ModuleList(
            nn.Linear(dm, cfg.vocab_size) for _ in range(cfg.num_quantizers)
        )
        self._init_weights()
        # frozen code vectors for input dequantization, (D, K, C)
        if codebooks is not None:
            codes = torch.stack([b.vectors.detach().clone() for b in codebooks.codebooks])
        else:
            codes = torch.randn(cfg.num_quantizers, cfg.codebook_size, cfg.latent_channels)
        self.register_buffer("codes", codes)

    def _init_weights(self) -> None:
        for p in (self.start_column, self.band_embed, self.time_embed, self.cond_pos_embed):
            nn.init.normal_(p, std=0.02)
        if self.cfg.strategy == "rqt":
            nn.init.normal_(self.depth_pos_embed, std=0.02)
        if self.cfg.strategy in ("audiolm", "valle"):
            nn.init.normal_(self.depth_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.MultiheadAttention):
                nn.init.normal_(m.in_proj_weight, std=0.02)
                nn.init.zeros_(m.in_proj_bias)

    def set_codebooks(self, quantizer: ResidualQuantizer) -> None:
        self.codes.copy_(torch.stack([b.vectors.detach() for b in quantizer.codebooks]))

    # ---------------------------------------------------------------- helpers

    def _check_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 3
        if squeeze:
            tokens = tokens.unsqueeze(0)
        cfg = self.cfg
        expected = (cfg.num_bands, cfg.num_frames, cfg.num_quantizers)
        if tuple(tokens.shape[1:]) != expected:
            raise ValueError(f"expected tokens {expected}, got {tuple(tokens.shape[1:])}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary")
        return tokens

    def _lookup(self, level: int, ids: torch.Tensor) -> torch.Tensor:
        """Code vectors for one depth; special ids contribute zero."""
        valid = ids < self.cfg.codebook_size
        safe = ids.clamp(max=self.cfg.codebook_size - 1)
        return self.codes[level][safe] * valid.unsqueeze(-1)

    def _cumulative_codes(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, F, T, D) ids -> (B, F, T, D, C) partial code sums over depth."""
        vecs = torch.stack(
            [self._lookup(d, tokens[..., d]) for d in range(self.cfg.num_quantizers)], dim=-2
        )
        return torch.cumsum(vecs, dim=-2)

    def condition_prefix(self, z: torch.Tensor) -> torch.Tensor:
        """Reference latent (B, Dm, F, P) -> band-aligned prefix (B, F, P, Dm).

        The column at band f enters only band-f rows of the time-axis input;
        positional and band embeddings are added here.
        """
        if z.dim() == 3:
            z = z.unsqueeze(0)
        b, dm, f, p = z.shape
        if dm != self.cfg.model_dim or f != self.cfg.num_bands or p != self.cfg.cond_columns:
            raise ValueError(
                f"condition shape {(dm, f, p)} does not match "
                f"({self.cfg.model_dim}, {self.cfg.num_bands}, {self.cfg.cond_columns})"
            )
        out = z.permute(0, 2, 3, 1)
        return out + self.cond_pos_embed + self.band_embed.unsqueeze(1)

    def _run_tf(
        self, seq: torch.Tensor, condition: torch.Tensor | None, causal: bool,
        backbone: TFTransformer | None = None,
    ) -> torch.Tensor:
        """seq (B, F, L, Dm) [+ prefix] -> backbone outputs (B, F, L, Dm)."""
        prefix_len = 0
        if condition is not None:
            prefix = self.condition_prefix(condition)
            if prefix.shape[0] == 1 and seq.shape[0] > 1:
                prefix = prefix.expand(seq.shape[0], -1, -1, -1)
            seq = torch.cat([prefix, seq], dim=2)
            prefix_len = prefix.shape[2]
        tf = backbone or self.tf
        out = tf(seq.permute(0, 3, 1, 2), causal=causal)
        return out.permute(0, 2, 3, 1)[:, :, prefix_len:]

    def _with_band(self, seq: torch.Tensor) -> torch.Tensor:
        return seq + self.band_embed.unsqueeze(1)

    def _audiolm_inputs(self, tokens: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        """Input embeddings for the flattened axis: (B, F, S, Dm), x_S first.

        Position k embeds the (k-1)-th flattened column as its partial code
        sum; predictions at position k target flattened column k.
        """
        cfg = self.cfg
        b = tokens.shape[0]
        cums = self._cumulative_codes(tokens)  # (B, F, T, D, C)
        emb = self.input_proj(cums)
        emb = emb + self.time_embed.unsqueeze(1) + self.depth_embed
        flat = emb.reshape(b, cfg.num_bands, cfg.num_frames * cfg.num_quantizers, -1)
        start = self.start_column.unsqueeze(1).expand(b, -1, 1, -1).reshape(
            b, cfg.num_bands, 1, -1
        )
        seq = torch.cat([start, flat[:, :, :-1]], dim=2)
        if steps is not None:
            seq = seq[:, :, :steps]
        return self._with_band(seq)

    def _rqt_inputs(self, tokens: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        """Fully-dequantized column embeddings for the time axis, x_S first."""
        cfg = self.cfg
        b = tokens.shape[0]
        full = self._cumulative_codes(tokens)[..., -1, :]  # (B, F, T, C)
        emb = self.input_proj(full) + self.time_embed
        start = self.start_column.unsqueeze(1).expand(b, -1, 1, -1).reshape(
            b, cfg.num_bands, 1, -1
        )
        seq = torch.cat([start, emb[:, :, :-1]], dim=2)
        if steps is not None:
            seq = seq[:, :, :steps]
        return self._with_band(seq)

    def _valle_stage_a_inputs(self, tokens: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        """Depth-0 column embeddings for the causal first stage, x_S first."""
        cfg = self.cfg
        b = tokens.shape[0]
        vec0 = self._lookup(0, tokens[..., 0])  # (B, F, T, C)
        emb = self.input_proj(vec0) + self.time_embed
        start = self.start_column.unsqueeze(1).expand(b, -1, 1, -1).reshape(
            b, cfg.num_bands, 1, -1
        )
        seq = torch.cat([start, emb[:, :, :-1]], dim=2)
        if steps is not None:
            seq = seq[:, :, :steps]
        return self._with_band(seq)

    def _non_ar_inputs(self, batch: int) -> torch.Tensor:
        """Learned query columns for the one-pass ablation (no token inputs)."""
        cfg = self.cfg
        seq = self.start_column.unsqueeze(1) + self.time_embed.unsqueeze(1).transpose(0, 1)
        seq = seq.unsqueeze(0).expand(batch, -1, -1, -1)
        return self._with_band(seq)

    def _depth_logits(
        self, context: torch.Tensor, tokens: torch.Tensor, causal: bool
    ) -> torch.Tensor:
        """Depth Transformer pass: context (B, F, L, Dm) + ids -> (B, F, L, D, V)."""
        cfg = self.cfg
        b, f, l, dm = context.shape
        rows = [context + self.depth_pos_embed[0]]
        for d in range(1, cfg.num_quantizers):
            if causal:
                vec = self._lookup(d - 1, tokens[..., d - 1])
                rows.append(self.depth_input_proj(vec) + self.depth_pos_embed[d])
            else:
                rows.append(
                    self.depth_pos_embed[d].expand(b, f, l, dm)
                )
        seq = torch.stack(rows, dim=3).reshape(b * f * l, cfg.num_quantizers, dm)
        out = self.depth_tf(seq, causal=causal).reshape(b, f, l, cfg.num_quantizers, dm)
        return torch.stack(
            [self.heads[d](out[..., d, :]) for d in range(cfg.num_quantizers)], dim=3
        )

    # ------------------------------------------------------- teacher forcing

    def forward_logits(
        self,
        tokens: torch.Tensor,
        condition: torch.Tensor | None = None,
        length: int | None = None,
    ) -> torch.Tensor:
        """Teacher-forced logits (B, F, T, D, V) under the strategy's order.

        Tokens beyond ``length`` time steps are canonicalized to the padding
        id before embedding, so they cannot influence any retained position.
        """
        cfg = self.cfg
        squeeze = tokens.dim() == 3
        tokens = self._check_tokens(tokens)
        if length is not None and length < cfg.num_frames:
            if cfg.pad_id is None:
                raise ValueError("length masking requires padding ids")
            tokens = tokens.clone()
            tokens[:, :, length:, :] = cfg.pad_id

        if cfg.strategy == "audiolm":
            seq = self._audiolm_inputs(tokens)
            out = self._run_tf(seq, condition, causal=True)
            out = out.reshape(
                tokens.shape[0], cfg.num_bands, cfg.num_frames, cfg.num_quantizers, -1
            )
            logits = torch.stack(
                [self.heads[d](out[..., d, :]) for d in range(cfg.num_quantizers)], dim=3
            )
        elif cfg.strategy == "rqt":
            if cfg.non_ar:
                seq = self._non_ar_inputs(tokens.shape[0])
                context = self._run_tf(seq, condition, causal=False)
                logits = self._depth_logits(context, tokens, causal=False)
            else:
                seq = self._rqt_inputs(tokens)
                context = self._run_tf(seq, condition, causal=True)
                logits = self._depth_logits(context, tokens, causal=True)
        else:  # valle
            seq = self._valle_stage_a_inputs(tokens)
            out_a = self._run_tf(seq, condition, causal=True)
            pieces = [self.heads[0](out_a)]
            cums = self._cumulative_codes(tokens)
            for d in range(1, cfg.num_quantizers):
                emb = self.input_proj(cums[..., d - 1, :])
                emb = emb + self.time_embed + self.depth_embed[d]
                out_b = self._run_tf(
                    self._with_band(emb), condition, causal=False, backbone=self.stage_b
                )
                pieces.append(self.heads[d](out_b))
            logits = torch.stack(pieces, dim=3)
        return logits[0] if squeeze else logits

    def loglik(
        self,
        tokens: torch.Tensor,
        condition: torch.Tensor | None = None,
        length: int | None = None,
    ) -> torch.Tensor:
        """Teacher-forced log-likelihood per batch item, (B,).

        With ``length`` set, positions at t >= length are excluded and the
        end-of-sequence column at t = length (depth 0, every band) is scored.
        """
        cfg = self.cfg
        squeeze = tokens.dim() == 3
        batched = tokens.unsqueeze(0) if squeeze else tokens
        logits = self.forward_logits(batched, condition, length)
        logp = F.log_softmax(logits, dim=-1)
        gathered = logp.gather(-1, batched.clamp(max=cfg.vocab_size - 1).unsqueeze(-1))
        gathered = gathered.squeeze(-1)  # (B, F, T, D)
        t_limit = cfg.num_frames if length is None else min(length, cfg.num_frames)
        total = gathered[:, :, :t_limit, :].sum(dim=(1, 2, 3))
        if length is not None and length < cfg.num_frames:
            if cfg.eos_id is None:
                raise ValueError("length masking requires an end-of-sequence id")
            total = total + logp[:, :, length, 0, cfg.eos_id].sum(dim=1)
        return total[0] if squeeze else total

    def forward_stats(self) -> dict:
        """Forward-position counters for compute-asymmetry checks."""
        stats = {
            "causal_lengths": list(self.tf.causal_lengths),
            "noncausal_lengths": list(self.tf.noncausal_lengths),
        }
        if self.cfg.strategy == "valle":
            stats["stage_b_passes"] = len(self.stage_b.noncausal_lengths)
            stats["noncausal_lengths"] += list(self.stage_b.noncausal_lengths)
        if self.cfg.strategy == "rqt":
            stats["depth_positions"] = self.depth_tf.calls
        return stats

    def reset_stats(self) -> None:
        self.tf.reset_stats()
        if self.cfg.strategy == "valle":
            self.stage_b.reset_stats()
        if self.cfg.strategy == "rqt":
            self.depth_tf.calls = 0

    # ------------------------------------------------------------ generation

    def _column_eos_stop(self, ids: torch.Tensor) -> bool:
        if self.cfg.eos_id is None:
            return False
        return (ids == self.cfg.eos_id).float().mean().item() >= self.cfg.eos_fraction

    @torch.no_grad()
    def generate(
        self,
        condition: torch.Tensor | None = None,
        sampler: SamplerConfig | None = None,
        max_steps: int | None = None,
    ) -> GenerationResult:
        """Autoregressive sampling under the strategy's factorization.

        Stops when enough band heads emit end-of-sequence at a depth-0 column
        or after ``max_steps`` time steps; the returned tensor is always
        padded to the full (F, T, D) shape.
        """
        cfg = self.cfg
        sampler = sampler or SamplerConfig()
        gen = torch.Generator().manual_seed(sampler.seed)
        steps = min(max_steps or cfg.num_frames, cfg.num_frames)
        fill = cfg.pad_id if cfg.pad_id is not None else 0
        tokens = torch.full(
            (1, cfg.num_bands, cfg.num_frames, cfg.num_quantizers), fill, dtype=torch.long
        )
        stopped = False
        done_steps = steps

        if cfg.strategy == "audiolm":
            flat_total = steps * cfg.num_quantizers
            for k in range(flat_total):
                t, d = divmod(k, cfg.num_quantizers)
                seq = self._audiolm_inputs(tokens, steps=k + 1)
                out = self._run_tf(seq, condition, causal=True)[:, :, -1]
                ids = sample_categorical(self.heads[d](out)[0], sampler, gen)
                if d == 0 and self._column_eos_stop(ids):
                    stopped, done_steps = True, t
                    break
                tokens[0, :, t, d] = ids
        elif cfg.strategy == "rqt" and not cfg.non_ar:
            for t in range(steps):
                seq = self._rqt_inputs(tokens, steps=t + 1)
                context = self._run_tf(seq, condition, causal=True)[:, :, -1:]
                column = tokens[:, :, t : t + 1, :]
                hit_eos = False
                for d in range(cfg.num_quantizers):
                    logits = self._depth_logits(context, column, causal=True)
                    ids = sample_categorical(logits[0, :, 0, d], sampler, gen)
                    if d == 0 and self._column_eos_stop(ids):
                        stopped, done_steps, hit_eos = True, t, True
                        break
                    column[0, :, 0, d] = ids
                if hit_eos:
                    break
                tokens[:, :, t] = column[:, :, 0]
        elif cfg.strategy == "rqt" and cfg.non_ar:
            logits = self.forward_logits(tokens, condition)
            tokens[0] = sample_categorical(logits[0], sampler, gen)
            done_steps = steps
        else:  # valle
            for t in range(steps):
                seq = self._valle_stage_a_inputs(tokens, steps=t + 1)
                out = self._run_tf(seq, condition, causal=True)[:, :, -1]
                ids = sample_categorical(self.heads[0](out)[0], sampler, gen)
                if self._column_eos_stop(ids):
                    stopped, done_steps = True, t
                    break
                tokens[0, :, t, 0] = ids
            cums = self._cumulative_codes(tokens)
            for d in range(1, cfg.num_quantizers):
                emb = self.input_proj(cums[..., d - 1, :])
                emb = emb + self.time_embed + self.depth_embed[d]
                out_b = self._run_tf(
                    self._with_band(emb), condition, causal=False, backbone=self.stage_b
                )
                ids = sample_categorical(self.heads[d](out_b)[0], sampler, gen)
                ids[:, done_steps:] = fill
                tokens[0, :, :, d] = ids
                cums = self._cumulative_codes(tokens)

        if cfg.pad_id is not None:
            tokens[:, :, done_steps:, :] = cfg.pad_id
        return GenerationResult(tokens=tokens[0], steps=done_steps, stopped_early=stopped)


TOKEN_FILE_VERSION = 1


def save_tokens(path: str | Path, tokens: torch.Tensor, cfg: GeneratorConfig) -> None:
    """Token tensor + header (F, T, D, vocab, strategy) as an npz file."""
    np.savez(
        str(path),
        version=TOKEN_FILE_VERSION,
        indices=tokens.detach().cpu().numpy().astype(np.int64),
        num_bands=cfg.num_bands,
        num_frames=cfg.num_frames,
        num_quantizers=cfg.num_quantizers,
        vocab=cfg.vocab_size,
        strategy=cfg.strategy,
    )


def load_tokens(path: str | Path) -> tuple[torch.Tensor, dict]:
    blob = np.load(str(path), allow_pickle=False)
    meta = {
        "version": int(blob["version"]),
        "num_bands": int(blob["num_bands"]),
        "num_frames": int(blob["num_frames"]),
        "num_quantizers": int(blob["num_quantizers"]),
        "vocab": int(blob["vocab"]),
        "strategy": str(blob["strategy"]),
    }
    indices = torch.from_numpy(blob["indices"])
    expected = (meta["num_bands"], meta["num_frames"], meta["num_quantizers"])
    if tuple(indices.shape) != expected:
        raise ValueError(f"token file shape {tuple(indices.shape)} != header {expected}")
    if int(indices.max()) >= meta["vocab"] or int(indices.min()) < 0:
        raise ValueError("token file contains ids outside its declared vocabulary")
    return indices, meta
