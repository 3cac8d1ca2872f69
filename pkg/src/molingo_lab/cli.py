"""Single entry-point command-line tool wiring all pipeline stages.

Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 numerical abort.
Every command that writes an artifact writes a `<artifact>.manifest.json`
beside it with config hash, input hashes, seed and wall time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import container
from .autoencoder import AutoencoderConfig
from .checkpoints import load_checkpoint
from .corpus_io import read_corpus, write_corpus
from .evaluation import EvaluatorBundle, EvaluatorConfig, evaluate_run
from .generator import GeneratorConfig
from .motion import to_joint_positions
from .pipeline import AutoencoderBundle, GeneratorBundle
from .sampler import SampleConfig, generate
from .synthetic import SynthSpec, default_cells, synth_corpus
from .text_encoding import ToyTextEncoder, export_embeddings
from .training import TrainParams, TrainingDiverged, train_autoencoder, train_evaluator, train_generator

ARCHETYPE_ORDER = ["walk_straight", "walk_circle", "raise_arm", "squat", "wave"]


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(artifact: Path, command: str, config: dict, inputs: list[Path], seed, t0: float) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "config_hash": _config_hash(config),
        "input_hashes": {str(p): _sha256(Path(p)) for p in inputs},
        "seed": seed,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "artifacts": [str(artifact)],
        "threads": torch.get_num_threads(),
    }
    with open(str(artifact) + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _merged(config_file: dict, section: str, overrides: dict) -> dict:
    merged = dict(config_file.get(section, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _train_params(args, config_file: dict) -> TrainParams:
    merged = _merged(config_file, "train", {
        "steps": args.steps,
        "batch_size": args.batch,
        "lr": args.lr,
        "seed": args.seed,
        "warmup_steps": getattr(args, "warmup", None),
    })
    return TrainParams(**merged)


def cmd_synth_data(args) -> int:
    t0 = time.perf_counter()
    archetypes = ARCHETYPE_ORDER[: args.classes]
    cells = tuple(c for c in default_cells() if c.archetype in archetypes)
    spec = SynthSpec(length_range=(args.min_len, args.max_len), cells=cells)
    corpus = synth_corpus(spec, args.count, args.seed)
    write_corpus(args.out, corpus)
    config = {
        "classes": args.classes,
        "count": args.count,
        "length_range": [args.min_len, args.max_len],
        "cells": [c.name for c in cells],
    }
    write_manifest(Path(args.out), "synth-data", config, [], args.seed, t0)
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return 0


def cmd_train_ae(args) -> int:
    t0 = time.perf_counter()
    config_file = _load_config_file(args.config)
    corpus = read_corpus(args.corpus)
    cfg = AutoencoderConfig.from_dict(
        _merged(config_file, "autoencoder", {"variant": args.variant})
    )
    params = _train_params(args, config_file)
    try:
        bundle, history = train_autoencoder(corpus, cfg, params)
    except TrainingDiverged as e:
        e.bundle.save(args.out)  # keep the last finite checkpoint
        raise
    bundle.save(args.out)
    write_manifest(
        Path(args.out), "train-ae", {"autoencoder": cfg.to_dict(), "train": params.__dict__},
        [Path(args.corpus)], params.seed, t0,
    )
    final = {k: v[-1] for k, v in history.losses.items()}
    print(f"trained {cfg.variant} autoencoder ({params.steps} steps), final losses {final}")
    return 0


def cmd_train_gen(args) -> int:
    t0 = time.perf_counter()
    config_file = _load_config_file(args.config)
    corpus = read_corpus(args.corpus)
    ae = AutoencoderBundle.load(args.ae)
    cfg = GeneratorConfig.from_dict(
        _merged(config_file, "generator", {"latent_dim": ae.cfg.latent_dim})
    )
    params = _train_params(args, config_file)
    try:
        bundle, history = train_generator(corpus, ae, cfg, params)
    except TrainingDiverged as e:
        e.bundle.save(args.out)  # keep the last finite checkpoint
        raise
    bundle.save(args.out)
    write_manifest(
        Path(args.out), "train-gen", {"generator": cfg.to_dict(), "train": params.__dict__},
        [Path(args.corpus), Path(args.ae)], params.seed, t0,
    )
    print(f"trained generator ({params.steps} steps), final flow loss {history.losses['flow_loss'][-1]:.5f}")
    return 0


def cmd_train_eval(args) -> int:
    t0 = time.perf_counter()
    config_file = _load_config_file(args.config)
    corpus = read_corpus(args.corpus)
    cfg = EvaluatorConfig.from_dict(_merged(config_file, "evaluator", {}))
    params = _train_params(args, config_file)
    try:
        bundle, history = train_evaluator(corpus, cfg, params)
    except TrainingDiverged as e:
        e.bundle.save(args.out)  # keep the last finite checkpoint
        raise
    bundle.save(args.out)
    write_manifest(
        Path(args.out), "train-eval", {"evaluator": cfg.to_dict(), "train": params.__dict__},
        [Path(args.corpus)], params.seed, t0,
    )
    print(f"trained evaluator ({params.steps} steps), final loss {history.losses['info_nce'][-1]:.5f}")
    return 0


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    ae = AutoencoderBundle.load(args.ae)
    gen_bundle = GeneratorBundle.load(args.gen)
    config = SampleConfig(
        inference_steps=args.steps,
        denoise_steps=args.denoise_steps,
        cfg_scale=args.cfg,
        churn=args.churn,
        seed=args.seed,
        use_ema=not args.no_ema,
    )
    t_sample = time.perf_counter()
    motion = generate(args.prompt, args.length, ae, gen_bundle, config)
    dt = time.perf_counter() - t_sample
    write_corpus(args.out, [motion])
    write_manifest(
        Path(args.out), "generate", {"sample": config.to_dict(), "prompt": args.prompt, "length": args.length},
        [Path(args.ae), Path(args.gen)], args.seed, t0,
    )
    if args.export_joints:
        joints = to_joint_positions(motion).positions.reshape(-1, 3)
        np.savetxt(args.export_joints, joints.numpy(), delimiter=",", fmt="%.6f")
    if args.plot:
        _plot_motion(motion, args.plot)
    print(f"generated {args.length} frames in {dt:.2f}s ({dt:.2f} s/sample) -> {args.out}")
    return 0


def _plot_motion(motion, out_path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos = to_joint_positions(motion).positions.numpy()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(pos[:, 0, 0], pos[:, 0, 2], marker=".", markersize=2)
    ax1.set_title("root trajectory (x-z)")
    ax1.set_xlabel("x [m]")
    ax1.set_ylabel("z [m]")
    ax1.axis("equal")
    for j in range(pos.shape[1]):
        ax2.plot(pos[:, j, 1], label=f"joint {j}")
    ax2.set_title("joint heights")
    ax2.set_xlabel("frame")
    ax2.set_ylabel("y [m]")
    ax2.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    ae = AutoencoderBundle.load(args.ae)
    gen_bundle = GeneratorBundle.load(args.gen)
    evaluator = EvaluatorBundle.load(args.evaluator)
    corpus = read_corpus(args.corpus)
    report = evaluate_run(
        gen_bundle,
        ae,
        evaluator,
        corpus,
        runs=args.runs,
        sample_config=SampleConfig(cfg_scale=args.cfg, seed=args.seed),
        samples_per_run=args.samples,
        seed=args.seed,
    )
    with open(args.report, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    write_manifest(
        Path(args.report), "evaluate", {"runs": args.runs, "samples": args.samples, "cfg": args.cfg},
        [Path(args.ae), Path(args.gen), Path(args.evaluator), Path(args.corpus)], args.seed, t0,
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_export_embeddings(args) -> int:
    t0 = time.perf_counter()
    with open(args.prompts) as f:
        prompts = [line.strip() for line in f if line.strip()]
    enc = ToyTextEncoder()
    export_embeddings(args.out, {p: enc.encode(p).tokens for p in prompts})
    write_manifest(Path(args.out), "export-embeddings", {"count": len(prompts)}, [Path(args.prompts)], None, t0)
    print(f"exported {len(prompts)} prompt embeddings to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == b"MLCKPT01":
        ckpt = load_checkpoint(path)
        print(f"checkpoint kind: {ckpt.kind}")
        print("config:", json.dumps(ckpt.config, indent=2, sort_keys=True))
        print("tensors:")
        for name in sorted(ckpt.tensors):
            print(f"  {name}  {tuple(ckpt.tensors[name].shape)}")
    elif magic == b"MLCORP01":
        corpus = read_corpus(path)
        lengths = [len(m) for m in corpus]
        print(f"corpus with {len(corpus)} sequences")
        if corpus:
            print(f"rep: {corpus[0].spec.to_dict()}")
            print(f"lengths: min {min(lengths)} max {max(lengths)}")
            labels = {m.labels[0] for m in corpus if m.labels}
            print(f"labels: {sorted(labels)}")
    else:
        raise ValueError(f"unrecognized file magic {magic!r}")
    manifest = Path(str(path) + ".manifest.json")
    if manifest.exists():
        print("manifest:", manifest.read_text().strip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molingo-lab", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="torch thread count (default: MOLINGO_LAB_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled corpus")
    p.add_argument("--classes", type=int, default=5, help="number of motion archetypes (4..5)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=36)
    p.add_argument("--max-len", type=int, default=72)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    for name, fn, extra in [
        ("train-ae", cmd_train_ae, "variant"),
        ("train-gen", cmd_train_gen, "ae"),
        ("train-eval", cmd_train_eval, None),
    ]:
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a corpus")
        p.add_argument("--corpus", required=True)
        p.add_argument("--config", default=None, help="JSON config file; flags win")
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--warmup", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if extra == "variant":
            p.add_argument("--variant", choices=["ae", "vae", "sae"], default=None)
        if extra == "ae":
            p.add_argument("--ae", required=True, help="frozen autoencoder checkpoint")
        p.set_defaults(fn=fn)

    p = sub.add_parser("generate", help="sample a motion from a text prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--cfg", type=float, default=6.0)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--denoise-steps", type=int, default=32)
    p.add_argument("--churn", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--export-joints", default=None, help="CSV of N*J rows of x,y,z")
    p.add_argument("--plot", default=None, help="SVG with root trajectory and joint heights")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="run the metric suite")
    p.add_argument("--gen", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--evaluator", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--cfg", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="export toy embeddings for a prompt list")
    p.add_argument("--prompts", required=True, help="text file, one prompt per line")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_embeddings)

    p = sub.add_parser("inspect", help="print checkpoint/corpus structure and manifest")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("MOLINGO_LAB_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    try:
        return args.fn(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError, container.ContainerError) as e:
        print(f"io-error: {e}", file=sys.stderr)
        return 3
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numerical-abort: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"usage-error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
