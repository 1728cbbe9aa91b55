"""Two-stage training: feature autoencoding, then conditional token generation.

Stage 1 fits the autoencoder + residual quantizer with the weighted
magnitude/complex MSE and EMA codebook updates (k-means initialized from the
first batches). Stage 2 freezes the tokenizer and trains a reference encoder
jointly with one generation strategy under smoothed cross-entropy.

Every trainer owns all of its randomness (batch sampling, quantization
dropout, stale resets, parameter init) so that checkpoint resume reproduces
an uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dsp
from .config import StftConfig, TrainConfig, config_from_dict
from .data import TrainingPair
from .generator import TokenGenerator
from .reference import ReferenceEncoder
from .rqvae import CHECKPOINT_VERSION, RirRqvae


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; diagnostics are dumped first."""


def stage1_loss(
    feat_pred: torch.Tensor,
    feat_true: torch.Tensor,
    commitment: torch.Tensor | float = 0.0,
    mag_weight: float = 3.0,
    complex_weight: float = 1.0,
    commitment_weight: float = 0.25,
) -> torch.Tensor:
    """(3 * magnitude MSE + complex MSE) / 4 plus the commitment term."""
    if feat_pred.shape != feat_true.shape:
        raise ValueError("feature shape mismatch")
    mag = F.mse_loss(feat_pred[..., 0, :, :], feat_true[..., 0, :, :])
    cplx = F.mse_loss(feat_pred[..., 1:3, :, :], feat_true[..., 1:3, :, :])
    recon = (mag_weight * mag + complex_weight * cplx) / (mag_weight + complex_weight)
    return recon + commitment_weight * commitment


def stage2_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    label_smoothing: float = 0.001,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean smoothed cross-entropy: (1 - eps) on the target, eps/(V-1) elsewhere."""
    v = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError("target id outside vocabulary")
    logp = F.log_softmax(logits, dim=-1)
    true = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    eps = label_smoothing
    per_pos = -((1.0 - eps) * true + eps / (v - 1) * (logp.sum(dim=-1) - true))
    if mask is not None:
        per_pos = per_pos[mask]
    return per_pos.mean()


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak, then halve every ``halving_interval`` steps."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    halvings = (step - cfg.warmup_steps) // cfg.halving_interval
    return cfg.peak_lr * 2.0 ** (-halvings)


def token_accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    return float((logits.argmax(dim=-1) == targets).float().mean())


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.peak_lr, betas=cfg.betas,
                             weight_decay=cfg.weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class JsonlLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _dump_divergence(path: Path | None, record: dict) -> None:
    if path:
        path.write_text(json.dumps(record, indent=2, sort_keys=True))


class _TrainerBase:
    """Shared step loop: schedule, clipping, validation, early stop."""

    def __init__(self, cfg: TrainConfig, log_path: str | Path | None = None):
        self.cfg = cfg
        self.step_count = 0
        self.best_val = math.inf
        self.stale_validations = 0
        self.logger = JsonlLogger(log_path)
        self.data_rng = np.random.default_rng(cfg.seed)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed)

    def _clip_and_step(self, model_params, optimizer, loss, extra: dict) -> dict:
        if not torch.isfinite(loss):
            record = {"step": self.step_count, "loss": float(loss.detach()), **extra}
            _dump_divergence(getattr(self, "divergence_path", None), record)
            raise TrainingDiverged(f"non-finite loss at step {self.step_count}")
        optimizer.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model_params, self.cfg.clip_norm)
        lr = lr_schedule(self.step_count, self.cfg)
        _set_lr(optimizer, lr)
        optimizer.step()
        self.step_count += 1
        record = {
            "step": self.step_count,
            "loss": float(loss.detach()),
            "lr": lr,
            "grad_norm": float(grad_norm),
            **extra,
        }
        self.logger.write(record)
        return record

    def _early_stop(self, val_metric: float) -> bool:
        if val_metric < self.best_val - 1e-12:
            self.best_val = val_metric
            self.stale_validations = 0
        else:
            self.stale_validations += 1
        return self.stale_validations >= self.cfg.patience

    def _rng_state(self) -> dict:
        return {
            "data_rng": self.data_rng.bit_generator.state,
            "torch_rng": self.torch_rng.get_state(),
            "global_torch_rng": torch.get_rng_state(),  # dropout uses the global stream
            "step": self.step_count,
            "best_val": self.best_val,
            "stale_validations": self.stale_validations,
        }

    def _restore_rng(self, state: dict) -> None:
        self.data_rng.bit_generator.state = state["data_rng"]
        self.torch_rng.set_state(state["torch_rng"])
        torch.set_rng_state(state["global_torch_rng"])
        self.step_count = state["step"]
        self.best_val = state["best_val"]
        self.stale_validations = state["stale_validations"]


class Stage1Trainer(_TrainerBase):
    """RQ-VAE reconstruction training over precomputed feature tensors."""

    def __init__(
        self,
        model: RirRqvae,
        train_feats: torch.Tensor,
        val_feats: torch.Tensor | None,
        cfg: TrainConfig,
        stft: StftConfig,
        log_path: str | Path | None = None,
        divergence_path: str | Path | None = None,
        kmeans_batches: int = 4,
    ):
        super().__init__(cfg, log_path)
        self.model = model
        self.stft = stft
        self.train_feats = train_feats
        self.val_feats = val_feats
        self.divergence_path = Path(divergence_path) if divergence_path else None
        self.kmeans_batches = kmeans_batches
        self.kmeans_done = False
        self.optimizer = _make_optimizer(self.model.parameters(), cfg)

    def _batch(self) -> torch.Tensor:
        n = self.train_feats.shape[0]
        idx = self.data_rng.integers(0, n, size=min(self.cfg.batch_size, n))
        return self.train_feats[torch.as_tensor(idx)]

    def _maybe_kmeans_init(self) -> None:
        if self.kmeans_done:
            return
        need = self.model.cfg.codebook_size
        samples = []
        with torch.no_grad():
            got = 0
            while got < need:
                latent = self.model.encode(self._batch())
                flat = latent.permute(0, 2, 3, 1).reshape(-1, latent.shape[1])
                samples.append(flat)
                got += flat.shape[0]
        self.model.quantizer.kmeans_init(torch.cat(samples), seed=self.cfg.seed)
        self.kmeans_done = True

    def step(self) -> dict:
        self.model.train()
        self._maybe_kmeans_init()
        batch = self._batch()
        depth = self.model.quantizer.sample_active_depth(self.torch_rng)
        recon, _, commitment = self.model(
            batch, active_depth=depth, update=True, rng=self.torch_rng
        )
        loss = stage1_loss(
            recon,
            batch,
            commitment,
            mag_weight=self.cfg.mag_weight,
            complex_weight=self.cfg.complex_weight,
            commitment_weight=self.model.cfg.commitment_weight,
        )
        return self._clip_and_step(
            self.model.parameters(), self.optimizer, loss, {"active_depth": depth}
        )

    @torch.no_grad()
    def validate(self) -> float:
        feats = self.val_feats if self.val_feats is not None else self.train_feats
        self.model.eval()
        recon, _, _ = self.model(feats)
        return float(F.mse_loss(recon, feats))

    def train(self, max_steps: int | None = None) -> list[dict]:
        history = []
        limit = max_steps if max_steps is not None else self.cfg.max_steps
        while self.step_count < limit:
            history.append(self.step())
            if self.step_count % self.cfg.val_interval == 0:
                val = self.validate()
                self.logger.write({"step": self.step_count, "val_mse": val})
                if self._early_stop(val):
                    break
        return history

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "kind": "rqvae",
                "rqvae_config": dataclasses.asdict(self.model.cfg),
                "stft_config": dataclasses.asdict(self.stft),
                "train_config": dataclasses.asdict(self.cfg),
                "state_dict": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": self._rng_state(),
                "kmeans_done": self.kmeans_done,
                "step": self.step_count,
                "extra": {},
            },
            str(path),
        )

    @classmethod
    def resume(
        cls,
        path: str | Path,
        train_feats: torch.Tensor,
        val_feats: torch.Tensor | None = None,
        log_path: str | Path | None = None,
    ) -> "Stage1Trainer":
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
        if blob.get("kind") != "rqvae":
            raise ValueError(f"{path} is not an rqvae checkpoint")
        cfg = config_from_dict("train", blob["train_config"])
        stft = config_from_dict("stft", blob["stft_config"])
        model = RirRqvae(config_from_dict("rqvae", blob["rqvae_config"]))
        model.load_state_dict(blob["state_dict"])
        trainer = cls(model, train_feats, val_feats, cfg, stft, log_path=log_path)
        trainer.optimizer.load_state_dict(blob["optimizer"])
        trainer._restore_rng(blob["rng"])
        trainer.kmeans_done = blob["kmeans_done"]
        return trainer


@dataclass
class PreparedPair:
    """A TrainingPair pre-tokenized against the frozen stage-1 model."""

    tokens: torch.Tensor  # (F', T', D) long
    ref_feats: tuple[torch.Tensor, ...]  # analyze() of each reference signal
    task: str


def prepare_pairs(
    pairs: list[TrainingPair], rqvae: RirRqvae, stft: StftConfig
) -> list[PreparedPair]:
    prepared = []
    for pair in pairs:
        feat = torch.as_tensor(dsp.analyze(pair.target_rir, stft), dtype=torch.float32)
        tokens = rqvae.tokenize(feat)
        refs = []
        for ref in pair.reference:
            usable = (len(ref) // stft.hop) * stft.hop
            refs.append(
                torch.as_tensor(dsp.analyze(ref[:usable], stft), dtype=torch.float32)
            )
        prepared.append(PreparedPair(tokens=tokens, ref_feats=tuple(refs), task=pair.task))
    return prepared


class Stage2Trainer(_TrainerBase):
    """Token-generation training with a frozen stage-1 tokenizer."""

    def __init__(
        self,
        generator: TokenGenerator,
        ref_encoder: ReferenceEncoder,
        rqvae: RirRqvae,
        pairs: list[PreparedPair],
        cfg: TrainConfig,
        stft: StftConfig,
        val_pairs: list[PreparedPair] | None = None,
        log_path: str | Path | None = None,
        divergence_path: str | Path | None = None,
    ):
        super().__init__(cfg, log_path)
        self.generator = generator
        self.ref_encoder = ref_encoder
        self.rqvae = rqvae
        self.rqvae.eval()
        for p in self.rqvae.parameters():
            p.requires_grad_(False)
        self.generator.set_codebooks(self.rqvae.quantizer)
        self.pairs = pairs
        self.val_pairs = val_pairs or pairs
        self.stft = stft
        self.divergence_path = Path(divergence_path) if divergence_path else None
        params = list(self.generator.parameters()) + list(self.ref_encoder.parameters())
        self.optimizer = _make_optimizer(params, cfg)

    def _condition(self, pair: PreparedPair) -> torch.Tensor:
        if pair.task == "match":
            source, target = pair.ref_feats
            return self.ref_encoder(target) - self.ref_encoder(source)
        return self.ref_encoder(pair.ref_feats[0])

    def _forward_batch(self, batch: list[PreparedPair]) -> tuple[torch.Tensor, torch.Tensor]:
        # references may have differing lengths, so items run one by one and
        # their logits stack (desk-scale batches)
        logits, targets = [], []
        for pair in batch:
            z = self._condition(pair)
            logits.append(self.generator.forward_logits(pair.tokens, condition=z))
            targets.append(pair.tokens)
        return torch.stack(logits), torch.stack(targets)

    def step(self) -> dict:
        self.generator.train()
        self.ref_encoder.train()
        idx = self.data_rng.integers(0, len(self.pairs), size=min(self.cfg.batch_size, len(self.pairs)))
        batch = [self.pairs[i] for i in idx]
        logits, targets = self._forward_batch(batch)
        loss = stage2_loss(logits, targets, label_smoothing=self.cfg.label_smoothing)
        params = list(self.generator.parameters()) + list(self.ref_encoder.parameters())
        record = self._clip_and_step(
            params, self.optimizer, loss, {"accuracy": token_accuracy(logits, targets)}
        )
        return record

    @torch.no_grad()
    def validate(self) -> tuple[float, float]:
        """(teacher-forced loss, token accuracy) over the validation pairs."""
        self.generator.eval()
        self.ref_encoder.eval()
        logits, targets = self._forward_batch(self.val_pairs)
        loss = stage2_loss(logits, targets, label_smoothing=self.cfg.label_smoothing)
        return float(loss), token_accuracy(logits, targets)

    def train(self, max_steps: int | None = None) -> list[dict]:
        history = []
        limit = max_steps if max_steps is not None else self.cfg.max_steps
        while self.step_count < limit:
            history.append(self.step())
            if self.step_count % self.cfg.val_interval == 0:
                val_loss, val_acc = self.validate()
                self.logger.write(
                    {"step": self.step_count, "val_loss": val_loss, "val_accuracy": val_acc}
                )
                if self._early_stop(val_loss):
                    break
        return history

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "kind": "generator",
                "generator_config": dataclasses.asdict(self.generator.cfg),
                "ref_encoder_config": dataclasses.asdict(self.ref_encoder.cfg),
                "train_config": dataclasses.asdict(self.cfg),
                "stft_config": dataclasses.asdict(self.stft),
                "generator_state": self.generator.state_dict(),
                "ref_encoder_state": self.ref_encoder.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": self._rng_state(),
                "step": self.step_count,
                "task": self.cfg.task,
                "strategy": self.generator.cfg.strategy,
            },
            str(path),
        )

    @classmethod
    def resume(
        cls,
        path: str | Path,
        rqvae: RirRqvae,
        pairs: list[PreparedPair],
        val_pairs: list[PreparedPair] | None = None,
        log_path: str | Path | None = None,
    ) -> "Stage2Trainer":
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
        if blob.get("kind") != "generator":
            raise ValueError(f"{path} is not a generator checkpoint")
        generator, ref_encoder, cfg, stft = load_generator_parts(blob)
        trainer = cls(generator, ref_encoder, rqvae, pairs, cfg, stft, val_pairs=val_pairs,
                      log_path=log_path)
        trainer.optimizer.load_state_dict(blob["optimizer"])
        trainer._restore_rng(blob["rng"])
        return trainer


def load_generator_parts(
    blob: dict,
) -> tuple[TokenGenerator, ReferenceEncoder, TrainConfig, StftConfig]:
    gen_cfg = config_from_dict("generator", blob["generator_config"])
    ref_cfg = config_from_dict("ref_encoder", blob["ref_encoder_config"])
    cfg = config_from_dict("train", blob["train_config"])
    stft = config_from_dict("stft", blob["stft_config"])
    generator = TokenGenerator(gen_cfg)
    generator.load_state_dict(blob["generator_state"])
    generator.eval()
    ref_encoder = ReferenceEncoder(ref_cfg)
    ref_encoder.load_state_dict(blob["ref_encoder_state"])
    ref_encoder.eval()
    return generator, ref_encoder, cfg, stft


def load_generator_checkpoint(
    path: str | Path,
) -> tuple[TokenGenerator, ReferenceEncoder, TrainConfig, StftConfig, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    generator, ref_encoder, cfg, stft = load_generator_parts(blob)
    return generator, ref_encoder, cfg, stft, blob
