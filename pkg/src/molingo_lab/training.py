"""Training loops for the autoencoder, the flow generator and the evaluator.

All loops are deterministic given (seed, thread count): batch order comes
from a numpy generator, torch noise from a torch generator, and weights are
initialized under torch.manual_seed. On divergence (non-finite loss) training
aborts and the last periodic snapshot is restored.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .autoencoder import (
    AutoencoderConfig,
    build_autoencoder,
    class_tokens,
    filter_repetitive,
    kl_loss,
    reconstruction_losses,
    semantic_loss,
)
from .evaluation import ContrastiveEvaluator, EvaluatorBundle, EvaluatorConfig
from .generator import (
    Ema,
    GeneratorConfig,
    MotionGenerator,
    flow_loss_given,
    sample_mask,
    should_drop_prompt,
)
from .motion import MotionSequence, RepresentationSpec, compute_stats, normalize
from .pipeline import AutoencoderBundle, GeneratorBundle, pad_feature_batch
from .text_encoding import NULL_PROMPT, ToyTextEncoder, collate_token_batch

log = logging.getLogger(__name__)

TEXT_SEED = 1234


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; `bundle` holds the last finite snapshot."""

    def __init__(self, message: str, bundle, history):
        super().__init__(message)
        self.bundle = bundle
        self.history = history


@dataclass
class TrainParams:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 0
    seed: int = 0
    snapshot_every: int = 50
    log_every: int = 200


def _epoch_stream(n: int, rng: np.random.Generator):
    """Endless stream of indices, reshuffled every epoch."""
    while True:
        yield from rng.permutation(n).tolist()


def _take_batch(stream, k: int) -> list[int]:
    return [next(stream) for _ in range(k)]


def _lr_at(step: int, base: float, warmup: int) -> float:
    if warmup <= 0 or step >= warmup:
        return base
    return base * (step + 1) / warmup


@dataclass
class History:
    steps: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)

    def push(self, step: int, **values):
        self.steps.append(step)
        for k, v in values.items():
            if isinstance(v, Tensor):
                v = v.detach()
            self.losses.setdefault(k, []).append(float(v))


def train_autoencoder(
    corpus: Sequence[MotionSequence],
    cfg: AutoencoderConfig,
    params: TrainParams,
    text_encoder: Optional[ToyTextEncoder] = None,
) -> tuple[AutoencoderBundle, History]:
    if not corpus:
        raise ValueError("empty corpus")
    rep = corpus[0].spec
    stats = compute_stats(corpus)
    normalized = [normalize(m, stats) for m in corpus]
    h = cfg.downsample

    if text_encoder is None:
        text_encoder = ToyTextEncoder(seed=TEXT_SEED)

    # teacher token ingredients are frozen; compute raw window embeddings once
    use_sem = cfg.variant == "sae"
    labeled = [i for i, m in enumerate(corpus) if m.labels is not None]
    if use_sem and not labeled:
        raise ValueError("SAE training needs at least one labeled sequence")

    torch.manual_seed(params.seed)
    model = build_autoencoder(rep.dim, cfg, text_encoder.embed_dim)
    opt = torch.optim.Adam(model.parameters(), lr=params.lr)
    rng = np.random.Generator(np.random.PCG64(params.seed))
    torch_gen = torch.Generator().manual_seed(params.seed + 1)
    stream = _epoch_stream(len(corpus), rng)

    raw_kappa: dict[int, tuple[Tensor, Tensor]] = {}
    if use_sem:
        ident = torch.nn.Identity()
        for i in labeled:
            toks = class_tokens(
                corpus[i].labels, text_encoder, ident, h,
                n_latents=math.ceil(len(corpus[i]) / h),
            )
            raw_kappa[i] = (toks.tokens, toks.valid_mask)

    history = History()
    snapshot = copy.deepcopy(model.state_dict())
    for step in range(params.steps):
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, params.lr, params.warmup_steps)
        idx = _take_batch(stream, params.batch_size)
        batch = [normalized[i] for i in idx]
        x, frame_mask = pad_feature_batch(batch, h)

        sample, mean, log_var = model.encode_batch(x, torch_gen)
        x_hat = model.decode_batch(sample)
        parts = reconstruction_losses(
            x, x_hat, stats, rep, cfg.lambda_joint, cfg.lambda_vel, frame_mask
        )
        loss = parts["l_recon"]

        lat_lens = torch.tensor([math.ceil(len(m) / h) for m in batch])
        l_max = x.shape[1] // h
        lat_valid = torch.arange(l_max)[None, :] < lat_lens[:, None]

        extras = {}
        if cfg.is_variational:
            kl = kl_loss(mean[lat_valid], log_var[lat_valid])
            loss = loss + cfg.lambda_kl * kl
            extras["l_kl"] = kl
        if use_sem:
            m_rows, k_rows, valid_rows, seq_rows = [], [], [], []
            for row, i in enumerate(idx):
                if i not in raw_kappa:
                    continue
                li = int(lat_lens[row])
                raw, valid = raw_kappa[i]
                m_rows.append(sample[row, :li])
                k_rows.append(model.label_proj(raw))
                valid_rows.append(valid)
                seq_rows.append(torch.full((li,), row, dtype=torch.long))
            if m_rows:
                m_flat = torch.cat(m_rows)
                k_flat = torch.cat(k_rows)
                kept = filter_repetitive(
                    k_flat.detach(), cfg.tau, torch.cat(valid_rows), torch.cat(seq_rows)
                )
                sem = semantic_loss(m_flat, k_flat, kept)
                loss = loss + cfg.lambda_sem * sem
                extras["l_sem"] = sem

        if not bool(torch.isfinite(loss)):
            log.error("autoencoder training diverged at step %d; restoring snapshot", step)
            model.load_state_dict(snapshot)
            model.eval()
            raise TrainingDiverged(
                f"autoencoder loss non-finite at step {step}",
                AutoencoderBundle(model, cfg, rep, stats, text_seed=TEXT_SEED),
                history,
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % params.snapshot_every == 0:
            snapshot = copy.deepcopy(model.state_dict())
        if step % params.log_every == 0 or step == params.steps - 1:
            history.push(step, l_total=loss, **{k: v for k, v in parts.items()}, **extras)
            log.info(
                "ae step %d: %s", step, {k: round(float(v.detach()), 5) for k, v in parts.items()}
            )

    model.eval()
    return AutoencoderBundle(model, cfg, rep, stats, text_seed=TEXT_SEED), history


def _encode_corpus_posteriors(
    ae: AutoencoderBundle, corpus: Sequence[MotionSequence], batch: int = 64
) -> list[tuple[Tensor, Optional[Tensor]]]:
    """Frozen-encoder pass over the corpus: per sequence (mean, std) or (z, None)."""
    out = []
    h = ae.cfg.downsample
    normalized = [normalize(m, ae.stats) for m in corpus]
    with torch.no_grad():
        for start in range(0, len(corpus), batch):
            chunk = normalized[start : start + batch]
            x, _ = pad_feature_batch(chunk, h)
            enc = ae.model.encoder(x)
            for row, m in enumerate(chunk):
                li = math.ceil(len(m) / h)
                if ae.cfg.is_variational:
                    mean, log_var = enc[row, :li].chunk(2, dim=-1)
                    out.append((mean.clone(), torch.exp(0.5 * log_var.clone())))
                else:
                    out.append((enc[row, :li].clone(), None))
    return out


def train_generator(
    corpus: Sequence[MotionSequence],
    ae: AutoencoderBundle,
    cfg: GeneratorConfig,
    params: TrainParams,
) -> tuple[GeneratorBundle, History]:
    if cfg.latent_dim != ae.cfg.latent_dim:
        raise ValueError("generator latent_dim must match the autoencoder")
    text_encoder = ToyTextEncoder(seed=ae.text_seed)
    posteriors = _encode_corpus_posteriors(ae, corpus)

    # channel-wise latent standardization keeps the flow prior N(0, I) sensible
    all_means = torch.cat([p[0] for p in posteriors])
    lat_mean = all_means.mean(dim=0)
    lat_std = torch.clamp(all_means.std(dim=0), min=1e-4)

    prompt_tokens = {}
    for m in corpus:
        for p in m.prompts:
            if p not in prompt_tokens:
                prompt_tokens[p] = text_encoder.encode(p)
    null_tokens = text_encoder.encode(NULL_PROMPT)

    torch.manual_seed(params.seed)
    model = MotionGenerator(cfg)
    ema = Ema(model, cfg.ema_decay)
    opt = torch.optim.Adam(model.parameters(), lr=params.lr)
    rng = np.random.Generator(np.random.PCG64(params.seed))
    torch_gen = torch.Generator().manual_seed(params.seed + 1)
    stream = _epoch_stream(len(corpus), rng)

    history = History()
    snapshot = copy.deepcopy(model.state_dict())
    ema_snapshot = copy.deepcopy(ema.shadow)
    for step in range(params.steps):
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, params.lr, params.warmup_steps)
        idx = _take_batch(stream, params.batch_size)

        lengths = torch.tensor([posteriors[i][0].shape[0] for i in idx])
        l_max = int(lengths.max())
        lat = torch.zeros(len(idx), l_max, cfg.latent_dim)
        for row, i in enumerate(idx):
            mean, std = posteriors[i]
            li = mean.shape[0]
            z = mean
            if std is not None:
                eps = torch.empty_like(std).normal_(generator=torch_gen)
                z = mean + std * eps
            lat[row, :li] = (z - lat_mean) / lat_std
        lat_valid = torch.arange(l_max)[None, :] < lengths[:, None]

        masks = sample_mask(lengths, l_max, rng, cfg.mask_ratio_min, cfg.mask_ratio_max)
        # mask token replaces hidden and padded positions; it trains through here
        inputs = torch.where((masks | ~lat_valid)[..., None], model.mask_token.expand_as(lat), lat)

        embs = []
        for i in idx:
            drop = should_drop_prompt(rng, cfg.cfg_dropout)
            prompts = corpus[i].prompts
            if drop or not prompts:
                embs.append(null_tokens)
            else:
                embs.append(prompt_tokens[prompts[int(rng.integers(len(prompts)))]])
        tokens, tok_mask = collate_token_batch(embs)
        w = model.adapter(tokens, tok_mask)

        z = model.conditioning_forward(inputs, w, lat_valid)
        sel = masks & lat_valid
        loss = flow_loss_given(
            model.flow_head,
            z[sel],
            lat[sel],
            t=torch.empty(int(sel.sum())).uniform_(generator=torch_gen),
            eps=torch.empty(int(sel.sum()), cfg.latent_dim).normal_(generator=torch_gen),
        )

        if not bool(torch.isfinite(loss)):
            log.error("generator training diverged at step %d; restoring snapshot", step)
            model.load_state_dict(snapshot)
            model.eval()
            raise TrainingDiverged(
                f"generator flow loss non-finite at step {step}",
                GeneratorBundle(
                    model=model,
                    ema=ema_snapshot,
                    cfg=cfg,
                    text_encoder=text_encoder,
                    text_seed=ae.text_seed,
                    ae_fingerprint={"latent_dim": ae.cfg.latent_dim, "downsample": ae.cfg.downsample},
                    latent_mean=lat_mean,
                    latent_std=lat_std,
                ),
                history,
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(model)

        if step % params.snapshot_every == 0:
            snapshot = copy.deepcopy(model.state_dict())
            ema_snapshot = copy.deepcopy(ema.shadow)
        if step % params.log_every == 0 or step == params.steps - 1:
            history.push(step, flow_loss=loss)
            log.info("gen step %d: flow loss %.5f", step, float(loss.detach()))

    model.eval()
    bundle = GeneratorBundle(
        model=model,
        ema=ema.state_dict(),
        cfg=cfg,
        text_encoder=text_encoder,
        text_seed=ae.text_seed,
        ae_fingerprint={"latent_dim": ae.cfg.latent_dim, "downsample": ae.cfg.downsample},
        latent_mean=lat_mean,
        latent_std=lat_std,
    )
    return bundle, history


def train_evaluator(
    corpus: Sequence[MotionSequence],
    cfg: EvaluatorConfig,
    params: TrainParams,
    text_encoder: Optional[ToyTextEncoder] = None,
) -> tuple[EvaluatorBundle, History]:
    if params.batch_size < 2:
        raise ValueError("contrastive training needs batch_size >= 2")
    paired = [m for m in corpus if m.prompts]
    if len(paired) < params.batch_size:
        raise ValueError("not enough prompted sequences for one batch")
    rep = paired[0].spec
    stats = compute_stats(paired)
    normalized = [normalize(m, stats) for m in paired]
    if text_encoder is None:
        text_encoder = ToyTextEncoder(seed=TEXT_SEED)
    prompt_tokens = {}
    for m in paired:
        for p in m.prompts:
            prompt_tokens.setdefault(p, text_encoder.encode(p))

    torch.manual_seed(params.seed)
    model = ContrastiveEvaluator(rep.dim, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=params.lr)
    rng = np.random.Generator(np.random.PCG64(params.seed))
    stream = _epoch_stream(len(paired), rng)

    history = History()
    snapshot = copy.deepcopy(model.state_dict())
    for step in range(params.steps):
        idx = _take_batch(stream, params.batch_size)
        frames, mask = pad_feature_batch([normalized[i] for i in idx], h=1)
        embs = []
        for i in idx:
            prompts = paired[i].prompts
            embs.append(prompt_tokens[prompts[int(rng.integers(len(prompts)))]])
        tokens, tok_mask = collate_token_batch(embs)

        m_feat = model.motion_enc(frames, mask)
        t_feat = model.text_enc(tokens, tok_mask)
        loss = model.info_nce(m_feat, t_feat)

        if not bool(torch.isfinite(loss)):
            log.error("evaluator training diverged at step %d; restoring snapshot", step)
            model.load_state_dict(snapshot)
            model.eval()
            raise TrainingDiverged(
                f"evaluator loss non-finite at step {step}",
                EvaluatorBundle(model, cfg, rep, stats, text_encoder, TEXT_SEED),
                history,
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % params.snapshot_every == 0:
            snapshot = copy.deepcopy(model.state_dict())
        if step % params.log_every == 0 or step == params.steps - 1:
            history.push(step, info_nce=loss)
            log.info("eval step %d: loss %.5f", step, float(loss.detach()))

    model.eval()
    return EvaluatorBundle(model, cfg, rep, stats, text_encoder, TEXT_SEED), history
