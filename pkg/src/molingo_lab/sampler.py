"""Fully-masked iterative inference with classifier-free guidance.

Generation starts from a sequence of learnable mask tokens. A cosine count
schedule decides how many positions become clean at each of the S inference
steps; the scheduled positions are integrated from t=1 to t=0 along the
learned velocity field (reverse Euler), optionally with a stochastic noise
refresh ("churn") between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .autoencoder import LatentSequence
from .generator import FlowHead, MotionGenerator
from .motion import MotionSequence
from .pipeline import AutoencoderBundle, GeneratorBundle
from .text_encoding import NULL_PROMPT, TextConditioning, collate_token_batch


@dataclass
class SampleConfig:
    inference_steps: int = 16
    denoise_steps: int = 32
    cfg_scale: float = 6.0
    churn: float = 0.1
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self):
        if self.inference_steps < 1 or self.denoise_steps < 1:
            raise ValueError("inference_steps and denoise_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be nonnegative")
        if not 0.0 <= self.churn < 1.0:
            raise ValueError("churn must be in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "SampleConfig":
        return SampleConfig(**d)


@dataclass
class UnmaskSchedule:
    """Ordered disjoint position sets whose union is {0..l-1}."""

    steps: list[Tensor] = field(default_factory=list)

    def __iter__(self):
        return iter(self.steps)


def cumulative_unmask_counts(l: int, steps: int) -> list[int]:
    """Cosine schedule: after step s, ceil(l * (1 - cos(pi*s/S)) / 2) positions are clean."""
    counts = []
    prev = 0
    for s in range(1, steps + 1):
        raw = math.ceil(l * (1.0 - math.cos(math.pi * s / steps)) / 2.0)
        prev = max(prev, min(raw, l))
        counts.append(prev)
    counts[-1] = l
    return counts


def build_schedule(l: int, config: SampleConfig, rng: np.random.Generator) -> UnmaskSchedule:
    """Partition positions 0..l-1 into inference_steps sets, cosine-sized, random membership."""
    if l < 1:
        raise ValueError("need at least one latent position")
    counts = cumulative_unmask_counts(l, config.inference_steps)
    order = rng.permutation(l)
    steps, prev = [], 0
    for c in counts:
        steps.append(torch.from_numpy(np.sort(order[prev:c]).copy()).long())
        prev = c
    return UnmaskSchedule(steps)


def cfg_velocity(v_cond: Tensor, v_null: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance: v_null + scale * (v_cond - v_null).

    The endpoints are returned exactly so s=1 and s=0 reduce to the plain
    conditional / null velocities bit for bit.
    """
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_null
    return v_null + scale * (v_cond - v_null)


def denoise_positions(
    head: FlowHead,
    z_cond: Tensor,
    z_null: Tensor,
    config: SampleConfig,
    generator: torch.Generator,
    init_noise: Optional[Tensor] = None,
) -> Tensor:
    """Integrate (M, d) latents from t=1 to t=0 with CFG and optional churn refresh.

    Each Euler step moves by m <- m - dt * v. With churn > 0 the state is
    re-noised after every step but the last: the clean estimate x_hat is
    pushed back to time t'' = t' + churn * (t_prev - t') with fresh noise,
    and integration resumes from t''. churn = 0 is the plain reverse ODE.
    """
    m = (
        init_noise.clone()
        if init_noise is not None
        else torch.empty(z_cond.shape[0], head.output_proj.out_features).normal_(generator=generator)
    )
    steps = config.denoise_steps
    t = 1.0
    for k in range(steps):
        t_next = 1.0 - (k + 1) / steps
        dt = t - t_next
        t_vec = m.new_full((m.shape[0],), t)
        v_c = head(m, t_vec, z_cond)
        v = cfg_velocity(v_c, head(m, t_vec, z_null), config.cfg_scale) if config.cfg_scale != 1.0 else v_c
        m = m - dt * v
        t_prev, t = t, t_next
        if config.churn > 0.0 and k < steps - 1:
            x_hat = m - t * v
            t = t + config.churn * (t_prev - t)
            eps_new = torch.empty_like(m).normal_(generator=generator)
            m = (1.0 - t) * x_hat + t * eps_new
        if not bool(torch.isfinite(m).all()):
            raise FloatingPointError(f"non-finite sampler state at denoise step {k}")
    return m


def _adapt_prompt(model: MotionGenerator, bundle: GeneratorBundle, prompt: str) -> TextConditioning:
    tokens, mask = collate_token_batch([bundle.text_encoder.encode(prompt)])
    return model.adapter(tokens, mask)


def generate(
    prompt: str,
    n_frames: int,
    ae: AutoencoderBundle,
    gen: GeneratorBundle,
    config: SampleConfig,
) -> MotionSequence:
    """Sample one motion of n_frames frames from a text prompt."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    gen.check_compatible(ae)
    model = gen.ema_model() if config.use_ema else gen.model
    model.eval()

    h = ae.cfg.downsample
    l = (n_frames + h - 1) // h
    d = gen.cfg.latent_dim

    ss = np.random.SeedSequence(config.seed)
    np_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    torch_gen = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] % (2**63)))

    schedule = build_schedule(l, config, np_rng)
    with torch.no_grad():
        w_cond = _adapt_prompt(model, gen, prompt)
        w_null = _adapt_prompt(model, gen, NULL_PROMPT)

        state = model.mask_token.detach().clone().expand(l, d).contiguous()
        is_masked = torch.ones(l, dtype=torch.bool)
        for positions in schedule:
            if positions.numel() == 0:
                continue
            z_cond = model.conditioning_forward(state[None], w_cond)[0]
            z_null = model.conditioning_forward(state[None], w_null)[0]
            clean = denoise_positions(
                model.flow_head, z_cond[positions], z_null[positions], config, torch_gen
            )
            state[positions] = clean
            is_masked[positions] = False
        assert not bool(is_masked.any()), "schedule left masked positions behind"

    latents = LatentSequence(latents=gen.unstandardize(state), h=h, n_frames=n_frames)
    out = ae.decode(latents)
    out.prompts = [prompt]
    return out


def generate_batch(
    prompts: list[str],
    n_frames: int | list[int],
    ae: AutoencoderBundle,
    gen: GeneratorBundle,
    config: SampleConfig,
) -> list[MotionSequence]:
    """Sample one motion per prompt in one batched pass.

    All requested lengths must map to the same latent count l. Equivalent to
    repeated `generate` calls up to the random stream layout; kept as a
    throughput optimization for evaluation runs.
    """
    if not prompts:
        return []
    gen.check_compatible(ae)
    model = gen.ema_model() if config.use_ema else gen.model
    model.eval()

    b = len(prompts)
    h = ae.cfg.downsample
    lengths = [n_frames] * b if isinstance(n_frames, int) else list(n_frames)
    if len(lengths) != b:
        raise ValueError("one target length per prompt required")
    ls = {(n + h - 1) // h for n in lengths}
    if len(ls) > 1:
        raise ValueError(f"lengths map to different latent counts {sorted(ls)}")
    l = ls.pop()
    d = gen.cfg.latent_dim

    ss = np.random.SeedSequence(config.seed)
    np_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    torch_gen = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] % (2**63)))

    schedule = build_schedule(l, config, np_rng)
    with torch.no_grad():
        tokens, mask = collate_token_batch([gen.text_encoder.encode(p) for p in prompts])
        w_cond = model.adapter(tokens, mask)
        null_tokens, null_mask = collate_token_batch(
            [gen.text_encoder.encode(NULL_PROMPT)] * b
        )
        w_null = model.adapter(null_tokens, null_mask)

        state = model.mask_token.detach().clone().expand(b, l, d).contiguous()
        for positions in schedule:
            k = positions.numel()
            if k == 0:
                continue
            z_cond = model.conditioning_forward(state, w_cond)
            z_null = model.conditioning_forward(state, w_null)
            clean = denoise_positions(
                model.flow_head,
                z_cond[:, positions].reshape(b * k, -1),
                z_null[:, positions].reshape(b * k, -1),
                config,
                torch_gen,
            )
            state[:, positions] = clean.reshape(b, k, d)

    out = []
    for i, prompt in enumerate(prompts):
        latents = LatentSequence(latents=gen.unstandardize(state[i]), h=h, n_frames=lengths[i])
        motion = ae.decode(latents)
        motion.prompts = [prompt]
        out.append(motion)
    return out
