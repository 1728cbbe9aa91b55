"""Command-line entry points.

Subcommands: prepare-data, train-rqvae, train-generator, estimate, evaluate.
Every run is reproducible from (config, seed, manifests); artifacts embed the
producing config hash in their provenance. Exit codes: 0 success, 2
validation failure, 3 runtime abort. Logs go to stderr, artifacts to files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, dsp, metrics
from .config import (
    SAMPLE_RATE,
    GeneratorConfig,
    RefEncoderConfig,
    RqvaeConfig,
    SamplerConfig,
    StftConfig,
    TrainConfig,
    config_from_dict,
    config_hash,
    load_yaml,
)
from .generator import TokenGenerator, save_tokens
from .pipeline import CheckpointMismatchError, estimate_rir
from .reference import ReferenceEncoder
from .rqvae import RirRqvae, load_rqvae
from .training import Stage1Trainer, Stage2Trainer, prepare_pairs

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _device() -> torch.device:
    return torch.device(os.environ.get("RIRGEN_DEVICE", "cpu"))


def _load_configs(path: str | None, stage: int = 1) -> dict:
    """Parse a YAML config file into config dataclasses, defaults elsewhere.

    The paper uses batch size 16 for stage 1 and 6 for stage 2; a config file
    value wins over either.
    """
    sections = {
        "stft": StftConfig(),
        "rqvae": RqvaeConfig(),
        "generator": GeneratorConfig(),
        "ref_encoder": RefEncoderConfig(),
        "train": TrainConfig(batch_size=16 if stage == 1 else 6),
    }
    if path:
        raw = load_yaml(path)
        for name in sections:
            if name in raw:
                base = dataclasses.asdict(sections[name])
                base.update(raw[name])
                sections[name] = config_from_dict(name, base)
    return sections


# ----------------------------------------------------------------- commands


def cmd_prepare_data(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[data.ManifestEntry] = []
    if args.synthetic:
        manifest = data.generate_corpus(
            out_dir / "synthetic",
            num_rirs=args.num_rirs,
            num_micirs=args.num_micirs,
            num_speech=args.num_speech,
            rir_length=args.rir_length,
            seed=args.seed,
        )
        entries += data.read_manifest(manifest)
        log(f"synthetic corpus written under {out_dir / 'synthetic'}")
    for path in args.manifest or []:
        entries += data.read_manifest(path)
    if not entries:
        log("no manifest entries given")
        return EXIT_VALIDATION

    violations = data.split_violations(entries)
    if violations:
        for group, splits in sorted(violations.items()):
            log(f"group {group} appears in multiple splits: {sorted(splits)}")
        return EXIT_VALIDATION

    data.write_manifest(out_dir / "manifest.jsonl", entries)
    _write_stats(out_dir, entries, args.rir_length)
    report = {
        "num_entries": len(entries),
        "config_hash": config_hash([dataclasses.asdict(e) for e in entries]),
        "counts": _split_counts(entries),
    }
    (out_dir / "prepare_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    log(f"validated {len(entries)} entries -> {out_dir / 'manifest.jsonl'}")
    return EXIT_OK


def _split_counts(entries: list[data.ManifestEntry]) -> dict:
    counts: dict = {}
    for e in entries:
        bucket = counts.setdefault(e.split, {}).setdefault(e.kind, {"files": 0, "groups": set()})
        bucket["files"] += 1
        bucket["groups"].add(e.group_id)
    return {
        split: {kind: {"files": v["files"], "groups": len(v["groups"])} for kind, v in kinds.items()}
        for split, kinds in counts.items()
    }


def _write_stats(out_dir: Path, entries: list[data.ManifestEntry], rir_length: int) -> None:
    """Per-split file counts plus T30/DRR histograms over the RIR entries."""
    with (out_dir / "split_stats.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "kind", "files", "groups"])
        for split, kinds in sorted(_split_counts(entries).items()):
            for kind, v in sorted(kinds.items()):
                writer.writerow([split, kind, v["files"], v["groups"]])

    values: list[tuple[str, str, str, float]] = []
    for e in entries:
        if e.kind != "rir":
            continue
        try:
            h = data.standardize_rir(*dsp.read_wav(e.path), length=rir_length)
        except (ValueError, FileNotFoundError):
            continue
        for param, fn in (("t30", metrics.t30), ("drr", metrics.drr)):
            for band in (None, *metrics.OCTAVE_CENTERS_HZ):
                try:
                    value = fn(h, band=band)
                except metrics.InsufficientDecayError:
                    continue
                values.append((e.split, param, "full" if band is None else str(band), float(value)))

    with (out_dir / "param_hist.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "param", "band_hz", "bin_lo", "bin_hi", "count"])
        keys = sorted({(s, p, b) for s, p, b, _ in values})
        for split, param, band in keys:
            sel = [v for s, p, b, v in values if (s, p, b) == (split, param, band)]
            hist, edges = np.histogram(sel, bins=10)
            for count, lo, hi in zip(hist, edges[:-1], edges[1:]):
                writer.writerow([split, param, band, f"{lo:.6g}", f"{hi:.6g}", int(count)])


def _stage1_features(entries, stft: StftConfig, rqvae_cfg: RqvaeConfig, split: str):
    length = rqvae_cfg.frames * stft.hop
    pool = data.load_pool(entries, "rir", split, rir_length=length)
    if not pool:
        return None
    feats = [dsp.analyze(p.samples, stft) for p in pool]
    return torch.as_tensor(np.stack(feats), dtype=torch.float32)


def cmd_train_rqvae(args: argparse.Namespace) -> int:
    cfgs = _load_configs(args.config, stage=1)
    stft, rqvae_cfg = cfgs["stft"], cfgs["rqvae"]
    train_cfg = dataclasses.replace(cfgs["train"], stage=1, seed=args.seed)
    if args.max_steps:
        train_cfg = dataclasses.replace(train_cfg, max_steps=args.max_steps)
    entries = data.read_manifest(args.manifest)
    train_feats = _stage1_features(entries, stft, rqvae_cfg, "train")
    if train_feats is None:
        log("no training RIRs in manifest")
        return EXIT_VALIDATION
    val_feats = _stage1_features(entries, stft, rqvae_cfg, "valid")

    torch.manual_seed(train_cfg.seed)
    model = RirRqvae(rqvae_cfg).to(_device())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer = Stage1Trainer(
        model, train_feats, val_feats, train_cfg, stft,
        log_path=out.with_suffix(".log.jsonl"),
        divergence_path=out.with_suffix(".divergence.json"),
    )
    log(f"stage 1: {train_feats.shape[0]} features, config {config_hash(stft, rqvae_cfg, train_cfg)}")
    trainer.train()
    trainer.save(out)
    log(f"checkpoint -> {out}")
    return EXIT_OK


def _build_pairs(entries, task, stft, rqvae_cfg, cfg: data.AugmentConfig,
                 num_pairs: int, seed: int, split: str, speech_seconds: float | None):
    length = rqvae_cfg.frames * stft.hop
    rng = np.random.default_rng(seed)
    rir_pool = data.load_pool(entries, "rir", split, rir_length=length)
    micir_pool = data.load_pool(entries, "micir", split)
    speech_pool = data.load_pool(
        entries, "speech", split, speech_seconds=speech_seconds, rng=rng
    )
    if not rir_pool:
        raise ValueError(f"no {split} RIRs in manifest")
    if task != "recon" and not speech_pool:
        raise ValueError(f"task {task} needs {split} speech in the manifest")
    return [
        data.build_pair(task, rir_pool, micir_pool, speech_pool, cfg, seed=seed * 100003 + i)
        for i in range(num_pairs)
    ]


def cmd_train_generator(args: argparse.Namespace) -> int:
    cfgs = _load_configs(args.config, stage=2)
    stft = cfgs["stft"]
    gen_cfg = dataclasses.replace(
        cfgs["generator"], strategy=args.strategy, non_ar=args.non_ar
    )
    ref_cfg = cfgs["ref_encoder"]
    train_cfg = dataclasses.replace(
        cfgs["train"], stage=2, task=args.task, strategy=args.strategy, seed=args.seed
    )
    if args.max_steps:
        train_cfg = dataclasses.replace(train_cfg, max_steps=args.max_steps)

    rqvae, rq_stft, _ = load_rqvae(args.rqvae)
    if rq_stft != stft:
        log("config stft does not match the stage-1 checkpoint; using the checkpoint's")
        stft = rq_stft
    entries = data.read_manifest(args.manifest)
    aug = data.AugmentConfig() if args.augment else data.AugmentConfig(
        prob_decay=0.0, prob_pitch=0.0, prob_eq=0.0, prob_micir=0.0, prob_source_micir=0.0
    )
    pairs = _build_pairs(entries, args.task, stft, rqvae.cfg, aug,
                         args.num_pairs, args.seed, "train", args.speech_seconds)
    prepared = prepare_pairs(pairs, rqvae, stft)

    torch.manual_seed(train_cfg.seed)
    generator = TokenGenerator(gen_cfg, codebooks=rqvae.quantizer)
    ref_encoder = ReferenceEncoder(ref_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer = Stage2Trainer(
        generator, ref_encoder, rqvae, prepared, train_cfg, stft,
        log_path=out.with_suffix(".log.jsonl"),
        divergence_path=out.with_suffix(".divergence.json"),
    )
    tf_len = gen_cfg.num_frames * (gen_cfg.num_quantizers if args.strategy == "audiolm" else 1)
    log(f"stage 2 [{args.strategy}/{args.task}] TF sequence length {tf_len}"
        f"{' (non-AR)' if args.non_ar else ''}")
    trainer.logger.write({"tf_sequence_length": tf_len, "strategy": args.strategy,
                          "task": args.task, "non_ar": args.non_ar})
    trainer.train()
    trainer.save(out)
    log(f"checkpoint -> {out}")
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    refs = [dsp.read_wav(args.reference)]
    if args.task == "match":
        if not args.source:
            log("--task match requires --source")
            return EXIT_VALIDATION
        refs.insert(0, dsp.read_wav(args.source))
    signals = tuple(data.resample_to(x, sr) for x, sr in refs)
    sampler = SamplerConfig(
        top_k=args.top_k, top_p=args.top_p, temperature=args.temperature, seed=args.seed
    )
    result = estimate_rir(
        args.task, signals, args.rqvae, args.generator, sampler=sampler,
        griffin_lim_iters=args.griffin_lim_iters,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(out, result.rir, SAMPLE_RATE)
    save_tokens(out.with_suffix(".tokens.npz"), result.generation.tokens,
                _generator_cfg_for(args.generator))
    provenance = dict(result.provenance)
    provenance["reference"] = str(args.reference)
    if args.source:
        provenance["source"] = str(args.source)
    out.with_suffix(".provenance.json").write_text(
        json.dumps(provenance, indent=2, sort_keys=True)
    )
    log(f"RIR ({provenance['output_samples']} samples) -> {out}")
    return EXIT_OK


def _generator_cfg_for(path: str) -> GeneratorConfig:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return config_from_dict("generator", blob["generator_config"])


def cmd_evaluate(args: argparse.Namespace) -> int:
    lines = [json.loads(l) for l in Path(args.pairs).read_text().splitlines() if l.strip()]
    if not lines:
        log("empty pairs manifest")
        return EXIT_VALIDATION
    reports = []
    for row in lines:
        est, _ = dsp.read_wav(row["estimate"])
        ref, _ = dsp.read_wav(row["reference"])
        if est.shape != ref.shape:
            log(f"length mismatch for {row['estimate']}")
            return EXIT_VALIDATION
        reports.append(metrics.evaluate_pair(est, ref))
    report = metrics.aggregate(reports)
    report["config_hash"] = config_hash({"pairs": lines})
    report["lsd_note"] = "LSD computed on the full-RIR magnitude response"
    import jsonschema

    jsonschema.validate(report, metrics.REPORT_SCHEMA)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    log(f"evaluated {len(reports)} pairs -> {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rirgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="validate manifests, emit stats")
    p.add_argument("--manifest", action="append", help="input manifest(s), JSONL")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--synthetic", action="store_true", help="also generate a synthetic corpus")
    p.add_argument("--num-rirs", type=int, default=12)
    p.add_argument("--num-micirs", type=int, default=4)
    p.add_argument("--num-speech", type=int, default=8)
    p.add_argument("--rir-length", type=int, default=49152)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prepare_data)

    p = sub.add_parser("train-rqvae", help="stage 1: feature autoencoder + RVQ")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML with stft/rqvae/train sections")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_rqvae)

    p = sub.add_parser("train-generator", help="stage 2: conditional token generator")
    p.add_argument("--strategy", choices=["audiolm", "rqt", "valle"], required=True)
    p.add_argument("--task", choices=["recon", "blind", "match"], required=True)
    p.add_argument("--non-ar", action="store_true", help="drop causal masks (ablation)")
    p.add_argument("--rqvae", required=True, help="stage-1 checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML with generator/ref_encoder/train sections")
    p.add_argument("--num-pairs", type=int, default=32)
    p.add_argument("--speech-seconds", type=float)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_generator)

    p = sub.add_parser("estimate", help="reference audio -> estimated RIR")
    p.add_argument("--task", choices=["recon", "blind", "match"], required=True)
    p.add_argument("--reference", required=True, help="RIR (recon) or wet speech")
    p.add_argument("--source", help="dry source speech (match)")
    p.add_argument("--rqvae", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--top-p", type=float, default=0.995)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--griffin-lim-iters", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("evaluate", help="metric report over estimate/reference pairs")
    p.add_argument("--pairs", required=True, help="JSONL: {estimate, reference} per line")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, CheckpointMismatchError) as err:
        log(f"validation error: {err}")
        return EXIT_VALIDATION
    except Exception as err:  # noqa: BLE001 - CLI boundary maps to exit codes
        log(f"runtime abort: {type(err).__name__}: {err}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
