"""Masked auto-regressive transformer with a rectified-flow denoising head.

The transformer sees the latent sequence with a learnable mask token at the
hidden positions (bidirectional self-attention, text cross-attention) and
emits one conditioning vector z per position. A small AdaLN MLP head learns
the flow velocity field v(m_t, t, z); the linear interpolation path

    m_t = (1 - t) * m + t * eps

makes the regression target eps - m, constant in t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .text_encoding import TextAdapter, TextConditioning


@dataclass
class GeneratorConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128  # transformer hidden size D_h
    flow_blocks: int = 8
    flow_width: int = 256
    latent_dim: int = 16
    mask_ratio_min: float = 0.7
    mask_ratio_max: float = 1.0
    cfg_dropout: float = 0.10
    ema_decay: float = 0.995
    max_positions: int = 256
    adapter_depth: int = 6
    text_embed_dim: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ValueError("cfg_dropout must be in [0, 1)")
        if not 0.0 < self.mask_ratio_min <= self.mask_ratio_max <= 1.0:
            raise ValueError("mask ratio range must satisfy 0 < min <= max <= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        return GeneratorConfig(**d)


@dataclass
class MaskedLatents:
    """Latent sequence with masked positions replaced by the shared mask token."""

    latents: Tensor  # (l, d)
    mask_set: Tensor  # (k,) long indices of masked positions

    def __post_init__(self):
        if self.mask_set.numel() < 1:
            raise ValueError("at least one position must be masked")


def should_drop_prompt(rng: np.random.Generator, p: float) -> bool:
    """Per-sample CFG decision: replace the prompt with the null prompt w.p. p."""
    return bool(rng.uniform() < p)


def sample_mask(
    lengths: Tensor, l_max: int, rng: np.random.Generator, r_min: float, r_max: float
) -> Tensor:
    """Per-sequence Bernoulli-free masking: ceil(r * l) positions without replacement."""
    b = lengths.shape[0]
    mask = torch.zeros(b, l_max, dtype=torch.bool)
    for i in range(b):
        li = int(lengths[i])
        r = rng.uniform(r_min, r_max)
        k = max(1, math.ceil(r * li))
        chosen = rng.choice(li, size=min(k, li), replace=False)
        mask[i, torch.from_numpy(np.sort(chosen))] = True
    return mask


def mask_latents(m: Tensor, mask_token: Tensor, rng: np.random.Generator,
                 r_min: float = 0.7, r_max: float = 1.0) -> MaskedLatents:
    """Mask one (l, d) latent sequence for training."""
    l = m.shape[0]
    mask = sample_mask(torch.tensor([l]), l, rng, r_min, r_max)[0]
    out = m.clone()
    out[mask] = mask_token.to(m.dtype)
    return MaskedLatents(latents=out, mask_set=mask.nonzero(as_tuple=False).squeeze(1))


class DecoderBlock(nn.Module):
    """Pre-norm: bidirectional self-attention -> text cross-attention -> MLP."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: Tensor, text: Tensor, text_pad: Tensor, latent_pad: Optional[Tensor]) -> Tensor:
        h = self.norm1(x)
        sa, _ = self.self_attn(h, h, h, key_padding_mask=latent_pad, need_weights=False)
        x = x + sa
        h = self.norm2(x)
        ca, _ = self.cross_attn(h, text, text, key_padding_mask=text_pad, need_weights=False)
        x = x + ca
        return x + self.mlp(self.norm3(x))


class MotionTransformer(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.latent_dim, cfg.width)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_positions, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg.width, cfg.heads) for _ in range(cfg.layers))
        self.norm_out = nn.LayerNorm(cfg.width)

    def forward(self, latents: Tensor, text: TextConditioning, latent_mask: Optional[Tensor] = None) -> Tensor:
        """latents (B, l, d), latent_mask (B, l) True = real position -> z (B, l, D_h)."""
        b, l, _ = latents.shape
        if l > self.cfg.max_positions:
            raise ValueError(f"sequence of {l} latents exceeds the {self.cfg.max_positions} position table")
        x = self.embed(latents) + self.pos_emb[:l]
        latent_pad = None if latent_mask is None else ~latent_mask
        text_pad = ~text.mask
        for block in self.blocks:
            x = block(x, text.w, text_pad, latent_pad)
        return self.norm_out(x)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal features of flow time t in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class AdaLNBlock(nn.Module):
    """LayerNorm -> linear -> SiLU -> linear with residual; LN modulated by cond."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.modulation = nn.Linear(width, 2 * width)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        scale, shift = self.modulation(cond).chunk(2, dim=-1)
        h = self.norm(x) * (1 + scale) + shift
        h = self.fc2(torch.nn.functional.silu(self.fc1(h)))
        return x + h


class FlowHead(nn.Module):
    """Velocity MLP v(m_t, t, z): residual blocks with AdaLN time/conditioning."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        w = cfg.flow_width
        self.input_proj = nn.Linear(cfg.latent_dim, w)
        self.cond_proj = nn.Linear(cfg.width, w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(AdaLNBlock(w) for _ in range(cfg.flow_blocks))
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False)
        self.final_modulation = nn.Linear(w, 2 * w)
        self.output_proj = nn.Linear(w, cfg.latent_dim)
        nn.init.zeros_(self.final_modulation.weight)
        nn.init.zeros_(self.final_modulation.bias)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, m_t: Tensor, t: Tensor, z: Tensor) -> Tensor:
        """m_t (M, d), t (M,), z (M, D_h) -> velocity (M, d)."""
        w = self.input_proj.out_features
        cond = self.cond_proj(z) + self.time_mlp(timestep_embedding(t, w))
        h = self.input_proj(m_t)
        for block in self.blocks:
            h = block(h, cond)
        scale, shift = self.final_modulation(cond).chunk(2, dim=-1)
        h = self.norm_out(h) * (1 + scale) + shift
        return self.output_proj(h)


class MotionGenerator(nn.Module):
    """Mask token + text adapter + conditioning transformer + flow head."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_token = nn.Parameter(torch.randn(cfg.latent_dim) * 0.02)
        self.adapter = TextAdapter(cfg.text_embed_dim, cfg.width, cfg.adapter_depth)
        self.transformer = MotionTransformer(cfg)
        self.flow_head = FlowHead(cfg)

    def conditioning_forward(
        self, latents: Tensor, text: TextConditioning, latent_mask: Optional[Tensor] = None
    ) -> Tensor:
        return self.transformer(latents, text, latent_mask)


# ---------------------------------------------------------------------------
# rectified flow primitives


def flow_interpolate(m: Tensor, eps: Tensor, t: Tensor) -> Tensor:
    """Noisy latent on the linear path: (1 - t) * m + t * eps."""
    while t.ndim < m.ndim:
        t = t[..., None]
    return (1.0 - t) * m + t * eps


def flow_target(m: Tensor, eps: Tensor) -> Tensor:
    """Velocity target along the linear path (independent of t)."""
    return eps - m


def flow_loss_given(head: FlowHead, z: Tensor, m: Tensor, t: Tensor, eps: Tensor) -> Tensor:
    """MSE between predicted velocity and eps - m at supplied (t, eps)."""
    if m.shape[0] == 0:
        raise ValueError("flow loss needs at least one masked position")
    v = head(flow_interpolate(m, eps, t), t, z)
    return (v - flow_target(m, eps)).square().mean()


def flow_loss(head: FlowHead, z: Tensor, m: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """Flow matching loss over (M, d) masked latents with t ~ U[0,1], eps ~ N(0,I)."""
    t = torch.empty(m.shape[0], dtype=m.dtype).uniform_(generator=generator)
    eps = torch.empty_like(m).normal_(generator=generator)
    return flow_loss_given(head, z, m, t, eps)


class Ema:
    """Exponential moving average of module parameters: ema <- decay*ema + (1-decay)*theta."""

    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for k, v in module.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self) -> dict[str, Tensor]:
        return self.shadow
