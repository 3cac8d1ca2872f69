"""Contrastive text-motion evaluator and the metric suite.

The evaluator maps motions (temporal convs + masked mean pooling) and texts
(token pooling + MLP) into a shared feature space. Raw features feed FID and
MModality; L2-normalized features feed retrieval, Matching Score and the
CLIP-style score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoints import load_checkpoint, pack_state_dict, save_checkpoint, unpack_state_dict
from .motion import (
    JointTrajectory,
    MotionSequence,
    NormalizationStats,
    RepresentationSpec,
    normalize,
    to_joint_positions,
)
from .text_encoding import ToyTextEncoder, collate_token_batch

log = logging.getLogger(__name__)

COV_REG = 1e-6


@dataclass
class EvaluatorConfig:
    feature_dim: int = 32
    hidden: int = 64
    text_embed_dim: int = 64
    init_temperature: float = 0.07

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "EvaluatorConfig":
        return EvaluatorConfig(**d)


class MotionFeatureEncoder(nn.Module):
    """Strided temporal convs + masked mean pooling -> feature vector."""

    def __init__(self, dim: int, cfg: EvaluatorConfig):
        super().__init__()
        h = cfg.hidden
        self.conv1 = nn.Conv1d(dim, h, 4, stride=2, padding=1)
        self.conv2 = nn.Conv1d(h, h, 4, stride=2, padding=1)
        self.out = nn.Sequential(nn.Linear(h, h), nn.SiLU(), nn.Linear(h, cfg.feature_dim))

    def forward(self, frames: Tensor, mask: Tensor) -> Tensor:
        """frames (B, N, D) normalized, mask (B, N) bool -> (B, F) raw features."""
        x = frames * mask[..., None].to(frames.dtype)
        x = F.silu(self.conv1(x.transpose(1, 2)))
        x = F.silu(self.conv2(x))
        pooled_mask = mask[:, ::4][:, : x.shape[-1]].to(frames.dtype)
        if pooled_mask.shape[1] < x.shape[-1]:
            pooled_mask = F.pad(pooled_mask, (0, x.shape[-1] - pooled_mask.shape[1]))
        denom = torch.clamp(pooled_mask.sum(dim=1, keepdim=True), min=1.0)
        pooled = (x * pooled_mask[:, None, :]).sum(dim=-1) / denom
        return self.out(pooled)


class TextFeatureEncoder(nn.Module):
    """Masked mean over token embeddings + MLP -> feature vector."""

    def __init__(self, cfg: EvaluatorConfig):
        super().__init__()
        self.out = nn.Sequential(
            nn.Linear(cfg.text_embed_dim, cfg.hidden), nn.SiLU(), nn.Linear(cfg.hidden, cfg.feature_dim)
        )

    def forward(self, tokens: Tensor, mask: Tensor) -> Tensor:
        m = mask[..., None].to(tokens.dtype)
        pooled = (tokens * m).sum(dim=1) / torch.clamp(m.sum(dim=1), min=1.0)
        return self.out(pooled)


class ContrastiveEvaluator(nn.Module):
    def __init__(self, dim: int, cfg: EvaluatorConfig):
        super().__init__()
        self.cfg = cfg
        self.motion_enc = MotionFeatureEncoder(dim, cfg)
        self.text_enc = TextFeatureEncoder(cfg)
        # positivity via exponential parameterization
        self.log_inv_temp = nn.Parameter(torch.tensor(math.log(1.0 / cfg.init_temperature)))

    @property
    def temperature(self) -> Tensor:
        return torch.exp(-self.log_inv_temp.detach())

    def info_nce(self, motion_feats: Tensor, text_feats: Tensor) -> Tensor:
        """Symmetric InfoNCE over in-batch pairs."""
        if motion_feats.shape[0] < 2:
            raise ValueError("InfoNCE needs a batch of at least 2 pairs")
        m = F.normalize(motion_feats, dim=-1)
        t = F.normalize(text_feats, dim=-1)
        logits = m @ t.T * torch.exp(self.log_inv_temp)
        target = torch.arange(m.shape[0], device=m.device)
        return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class EvaluatorBundle:
    model: ContrastiveEvaluator
    cfg: EvaluatorConfig
    rep: RepresentationSpec
    stats: NormalizationStats
    text_encoder: ToyTextEncoder
    text_seed: int = 1234

    def motion_features(self, motions: Sequence[MotionSequence]) -> Tensor:
        """Raw (n, F) features of raw-unit motions (normalization handled here)."""
        frames = [normalize(m, self.stats).frames for m in motions]
        n_max = max(f.shape[0] for f in frames)
        batch = torch.zeros(len(frames), n_max, self.rep.dim)
        mask = torch.zeros(len(frames), n_max, dtype=torch.bool)
        for i, f in enumerate(frames):
            batch[i, : f.shape[0]] = f
            mask[i, : f.shape[0]] = True
        with torch.no_grad():
            return self.model.motion_enc(batch, mask)

    def text_features(self, prompts: Sequence[str]) -> Tensor:
        tokens, mask = collate_token_batch([self.text_encoder.encode(p) for p in prompts])
        with torch.no_grad():
            return self.model.text_enc(tokens, mask)

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            kind="evaluator",
            config={
                "eval": self.cfg.to_dict(),
                "rep": self.rep.to_dict(),
                "text_seed": self.text_seed,
                "vocab": sorted(self.text_encoder._refine),
            },
            tensors=pack_state_dict(self.model, "model."),
            stats=self.stats,
        )

    @staticmethod
    def load(path: str | Path) -> "EvaluatorBundle":
        ckpt = load_checkpoint(path, expect_kind="evaluator")
        cfg = EvaluatorConfig.from_dict(ckpt.config["eval"])
        rep = RepresentationSpec.from_dict(ckpt.config["rep"])
        model = ContrastiveEvaluator(rep.dim, cfg)
        model.load_state_dict(unpack_state_dict(ckpt.tensors, "model."))
        model.eval()
        enc = ToyTextEncoder(cfg.text_embed_dim, ckpt.config["text_seed"], ckpt.config["vocab"])
        return EvaluatorBundle(model, cfg, rep, ckpt.stats, enc, ckpt.config["text_seed"])


# ---------------------------------------------------------------------------
# metrics


def _gaussian_fit(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    regularized = feats.shape[0] < feats.shape[1] + 1
    if regularized:
        log.warning(
            "covariance from %d samples in %d dims is degenerate; adding %g*I",
            feats.shape[0], feats.shape[1], COV_REG,
        )
        cov = cov + COV_REG * np.eye(feats.shape[1])
    return mu, cov, regularized


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Closed-form Frechet distance between two Gaussians."""
    s1 = _psd_sqrt(np.asarray(cov1, dtype=np.float64))
    inner = s1 @ np.asarray(cov2, dtype=np.float64) @ s1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(real_features: Tensor | np.ndarray, gen_features: Tensor | np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two raw feature sets."""
    r = np.asarray(torch.as_tensor(real_features).detach().cpu().numpy(), dtype=np.float64)
    g = np.asarray(torch.as_tensor(gen_features).detach().cpu().numpy(), dtype=np.float64)
    if not (np.isfinite(r).all() and np.isfinite(g).all()):
        raise ValueError("non-finite features")
    mu_r, cov_r, _ = _gaussian_fit(r)
    mu_g, cov_g, _ = _gaussian_fit(g)
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


def r_precision_and_matching(
    motion_feats: Tensor,
    text_feats: Tensor,
    rng: np.random.Generator,
    pool: int = 32,
    pools: Optional[int] = None,
) -> tuple[float, float, float, float]:
    """Retrieval metrics over random pools of 1 true + (pool-1) distractor texts.

    Returns (top1, top2, top3, matching_score); matching score is the mean
    Euclidean distance between matched normalized feature pairs.
    """
    n = motion_feats.shape[0]
    if n < pool:
        raise ValueError(f"need at least {pool} pairs, got {n}")
    m = F.normalize(motion_feats, dim=-1)
    t = F.normalize(text_feats, dim=-1)
    if pools is None:
        pools = n
    hits = np.zeros(3)
    for _ in range(pools):
        target = int(rng.integers(n))
        others = rng.choice(n - 1, size=pool - 1, replace=False)
        others = others + (others >= target)  # skip the target row
        cand = torch.cat([t[target : target + 1], t[others]], dim=0)
        sims = cand @ m[target]
        rank = int((sims > sims[0]).sum())  # strictly-better candidates
        for k in range(3):
            hits[k] += rank <= k
    matching = float((m - t).norm(dim=-1).mean())
    top1, top2, top3 = (hits / pools).tolist()
    return top1, top2, top3, matching


def clip_score(motion_feats: Tensor, text_feats: Tensor) -> float:
    """Mean cosine similarity between matched feature pairs."""
    if motion_feats.shape[0] == 0:
        raise ValueError("empty feature set")
    m = F.normalize(motion_feats, dim=-1)
    t = F.normalize(text_feats, dim=-1)
    return float((m * t).sum(dim=-1).mean())


def mmodality(
    generate_fn: Callable[[str, int], list[MotionSequence]],
    prompts: Sequence[str],
    repeats: int,
    evaluator: EvaluatorBundle,
    rng: np.random.Generator,
) -> float:
    """Mean pairwise feature distance among motions generated from one prompt.

    generate_fn(prompt, seed) must return `repeats` motions; repeats are paired
    off disjointly ((0,1), (2,3), ...) before averaging distances.
    """
    if repeats < 2:
        raise ValueError("mmodality needs repeats >= 2")
    dists = []
    for prompt in prompts:
        seed = int(rng.integers(2**31))
        feats = evaluator.motion_features(generate_fn(prompt, seed))
        for i in range(0, repeats - 1, 2):
            dists.append(float((feats[i] - feats[i + 1]).norm()))
    return float(np.mean(dists))


def mpjpe(x: MotionSequence, x_hat: MotionSequence) -> float:
    """Mean per-joint position error in millimeters (raw-unit inputs)."""
    a = to_joint_positions(x).positions
    b = to_joint_positions(x_hat).positions
    n = min(a.shape[0], b.shape[0])
    return float((a[:n] - b[:n]).norm(dim=-1).mean()) * 1000.0


def rfid(
    corpus: Sequence[MotionSequence],
    reconstruct_fn: Callable[[MotionSequence], MotionSequence],
    evaluator: EvaluatorBundle,
) -> float:
    """Reconstruction FID: evaluator features of real vs round-tripped motions."""
    real = evaluator.motion_features(list(corpus))
    recon = evaluator.motion_features([reconstruct_fn(m) for m in corpus])
    return fid(real, recon)


@dataclass
class MetricReport:
    fid: float
    r_top1: float
    r_top2: float
    r_top3: float
    matching_score: float
    clip_score: float
    mmodality: Optional[float] = None
    mpjpe: Optional[float] = None
    runs: int = 1
    half_widths: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "r_precision": {"top1": self.r_top1, "top2": self.r_top2, "top3": self.r_top3},
            "matching_score": self.matching_score,
            "clip_score": self.clip_score,
            "mmodality": self.mmodality,
            "mpjpe_mm": self.mpjpe,
            "runs": self.runs,
            "confidence_95_half_widths": self.half_widths,
            "notes": self.notes,
        }


def summarize_runs(per_run: dict[str, list[float]], runs: int) -> tuple[dict, dict]:
    """Means and normal-approximation 95% half-widths over >= 2 runs."""
    means, half = {}, {}
    for k, vals in per_run.items():
        arr = np.asarray(vals, dtype=np.float64)
        means[k] = float(arr.mean())
        if runs >= 2:
            half[k] = float(1.96 * arr.std(ddof=1) / math.sqrt(runs))
        else:
            half[k] = None
    return means, half


def evaluate_run(
    gen_bundle,
    ae_bundle,
    evaluator: EvaluatorBundle,
    corpus: Sequence[MotionSequence],
    runs: int = 20,
    sample_config=None,
    samples_per_run: int = 64,
    mmodality_prompts: int = 4,
    mmodality_repeats: int = 10,
    seed: int = 0,
) -> MetricReport:
    """Repeat the generation + metric pipeline `runs` times with derived seeds."""
    from .sampler import SampleConfig, generate_batch

    if runs < 1:
        raise ValueError("runs must be >= 1")
    if sample_config is None:
        sample_config = SampleConfig()
    prompted = [m for m in corpus if m.prompts]
    if len(prompted) < 32:
        raise ValueError("need at least 32 prompted sequences for retrieval pools")

    real_feats = evaluator.motion_features(list(corpus))
    recon_sample = prompted[: min(64, len(prompted))]
    mpjpe_mm = float(
        np.mean([mpjpe(m, ae_bundle.reconstruct(m)) for m in recon_sample])
    )

    def batched_generate(prompt_length_pairs: list[tuple[str, int]], run_seed: int) -> list[MotionSequence]:
        h = ae_bundle.cfg.downsample
        groups: dict[int, list[int]] = {}
        for j, (_, n) in enumerate(prompt_length_pairs):
            groups.setdefault((n + h - 1) // h, []).append(j)
        out: list[Optional[MotionSequence]] = [None] * len(prompt_length_pairs)
        for gi, (l, members) in enumerate(sorted(groups.items())):
            cfg_g = SampleConfig(**{**sample_config.to_dict(), "seed": run_seed + 7919 * gi})
            motions = generate_batch(
                [prompt_length_pairs[j][0] for j in members],
                [prompt_length_pairs[j][1] for j in members],
                ae_bundle,
                gen_bundle,
                cfg_g,
            )
            for j, m in zip(members, motions):
                out[j] = m
        return out  # type: ignore[return-value]

    per_run: dict[str, list[float]] = {}
    master = np.random.SeedSequence(seed)
    for run, child in enumerate(master.spawn(runs)):
        rng = np.random.Generator(np.random.PCG64(child))
        run_seed = int(rng.integers(2**31))
        chosen = rng.choice(len(prompted), size=min(samples_per_run, len(prompted)), replace=False)
        pairs = []
        for i in chosen:
            m = prompted[int(i)]
            pairs.append((m.prompts[int(rng.integers(len(m.prompts)))], len(m)))
        gen_motions = batched_generate(pairs, run_seed)

        gen_feats = evaluator.motion_features(gen_motions)
        text_feats = evaluator.text_features([p for p, _ in pairs])
        top1, top2, top3, matching = r_precision_and_matching(gen_feats, text_feats, rng)

        mm_prompts = [pairs[int(rng.integers(len(pairs)))][0] for _ in range(mmodality_prompts)]
        mm = mmodality(
            lambda prompt, s: batched_generate([(prompt, 48)] * mmodality_repeats, s),
            mm_prompts,
            mmodality_repeats,
            evaluator,
            rng,
        )

        values = {
            "fid": fid(real_feats, gen_feats),
            "r_top1": top1,
            "r_top2": top2,
            "r_top3": top3,
            "matching_score": matching,
            "clip_score": clip_score(gen_feats, text_feats),
            "mmodality": mm,
        }
        for k, v in values.items():
            per_run.setdefault(k, []).append(v)
        log.info("evaluation run %d/%d: %s", run + 1, runs, {k: round(v, 4) for k, v in values.items()})

    means, half = summarize_runs(per_run, runs)
    return MetricReport(
        fid=means["fid"],
        r_top1=means["r_top1"],
        r_top2=means["r_top2"],
        r_top3=means["r_top3"],
        matching_score=means["matching_score"],
        clip_score=means["clip_score"],
        mmodality=means["mmodality"],
        mpjpe=mpjpe_mm,
        runs=runs,
        half_widths=half,
        notes=[
            "clip_score uses the lab contrastive evaluator in place of CLIP",
            "retrieval pools of 32 (1 true + 31 distractors)",
            f"samples_per_run={samples_per_run}, mmodality {mmodality_prompts}x{mmodality_repeats}",
        ],
    )
