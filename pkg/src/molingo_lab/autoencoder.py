"""Causal temporal-convolution motion autoencoder: AE, VAE and the
semantically aligned variant (SAE) with repetitive class-token filtering.

Encoder plan (downsample h = 2^stages):

    CausalConv(D->hidden, k3, replicate pad) -> SiLU
    stages x [CausalConv(k4, s2) -> 3 dilated residual blocks (dil 9, 3, 1)]
    CausalConv(k3) -> Linear(hidden -> d)          (VAE/SAE: hidden -> 2d)

The decoder mirrors it with nearest-neighbor x2 upsampling between stages.
All convolutions pad on the left only, so latent i never sees frames beyond
h*i + h (verified by the causality tests).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .motion import (
    MotionSequence,
    NormalizationStats,
    RepresentationSpec,
    joint_positions_from_features,
    pad_to_multiple,
)
from .text_encoding import ToyTextEncoder

log = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@dataclass
class AutoencoderConfig:
    variant: str = "sae"  # ae | vae | sae
    hidden: int = 128
    latent_dim: int = 16
    downsample: int = 4
    lambda_joint: float = 1.0
    lambda_vel: float = 10.0
    lambda_kl: float = 1e-5
    lambda_sem: float = 0.05
    tau: float = 0.995
    dilations: tuple[int, ...] = (9, 3, 1)

    def __post_init__(self):
        if self.variant not in ("ae", "vae", "sae"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.downsample not in (2, 4):
            raise ValueError("downsample must be 2 or 4")
        for name in ("lambda_joint", "lambda_vel", "lambda_kl", "lambda_sem"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        self.dilations = tuple(self.dilations)

    @property
    def stages(self) -> int:
        return int(round(math.log2(self.downsample)))

    @property
    def is_variational(self) -> bool:
        return self.variant in ("vae", "sae")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "hidden": self.hidden,
            "latent_dim": self.latent_dim,
            "downsample": self.downsample,
            "lambda_joint": self.lambda_joint,
            "lambda_vel": self.lambda_vel,
            "lambda_kl": self.lambda_kl,
            "lambda_sem": self.lambda_sem,
            "tau": self.tau,
            "dilations": list(self.dilations),
        }

    @staticmethod
    def from_dict(d: dict) -> "AutoencoderConfig":
        d = dict(d)
        d["dilations"] = tuple(d.get("dilations", (9, 3, 1)))
        return AutoencoderConfig(**d)


@dataclass
class LatentSequence:
    """Continuous motion latents (l, d), plus mean/log-variance for VAE/SAE."""

    latents: Tensor
    h: int
    n_frames: int
    mean: Optional[Tensor] = None
    log_var: Optional[Tensor] = None


@dataclass
class ClassTokenSequence:
    """Text-derived teacher tokens for each latent position."""

    tokens: Tensor  # (l, d)
    valid_mask: Tensor  # (l,) bool


def reparameterize(mean: Tensor, log_var: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """mean + exp(log_var / 2) * eps; log_var -> -inf collapses to the mean path."""
    eps = torch.empty_like(mean).normal_(generator=generator)
    return mean + torch.exp(0.5 * log_var) * eps


class CausalConv1d(nn.Module):
    """Left-padded 1-D convolution; output index t only sees inputs <= t*stride + stride - 1."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, dilation=1, pad_mode="zero", bias=True):
        super().__init__()
        self.pad = dilation * (kernel - 1) - (stride - 1)
        self.pad_mode = pad_mode
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride, dilation=dilation, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        if self.pad > 0:
            mode = "replicate" if self.pad_mode == "replicate" else "constant"
            x = F.pad(x, (self.pad, 0), mode=mode)
        return self.conv(x)


class ResConvBlock(nn.Module):
    def __init__(self, width: int, dilation: int):
        super().__init__()
        self.conv1 = CausalConv1d(width, width, 3, dilation=dilation)
        self.conv2 = CausalConv1d(width, width, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return x + h


class Resnet1d(nn.Sequential):
    def __init__(self, width: int, dilations: Sequence[int]):
        super().__init__(*[ResConvBlock(width, d) for d in dilations])


class MotionEncoder(nn.Module):
    def __init__(self, dim: int, cfg: AutoencoderConfig):
        super().__init__()
        self.conv_in = CausalConv1d(dim, cfg.hidden, 3, pad_mode="replicate")
        self.stages = nn.ModuleList()
        for _ in range(cfg.stages):
            self.stages.append(
                nn.Sequential(
                    CausalConv1d(cfg.hidden, cfg.hidden, 4, stride=2),
                    Resnet1d(cfg.hidden, cfg.dilations),
                )
            )
        self.conv_out = CausalConv1d(cfg.hidden, cfg.hidden, 3)
        out = 2 * cfg.latent_dim if cfg.is_variational else cfg.latent_dim
        self.head = nn.Linear(cfg.hidden, out)
        if cfg.is_variational:
            # start with a tight posterior so early reconstruction is not drowned in noise
            with torch.no_grad():
                self.head.bias[cfg.latent_dim :] = -6.0

    def forward(self, x: Tensor) -> Tensor:
        """x (B, T, D) -> (B, T/h, d or 2d)."""
        h = F.silu(self.conv_in(x.transpose(1, 2)))
        for stage in self.stages:
            h = stage(h)
        h = self.conv_out(h)
        return self.head(h.transpose(1, 2))


class MotionDecoder(nn.Module):
    def __init__(self, dim: int, cfg: AutoencoderConfig):
        super().__init__()
        self.conv_in = CausalConv1d(cfg.latent_dim, cfg.hidden, 3)
        self.stages = nn.ModuleList()
        for _ in range(cfg.stages):
            self.stages.append(
                nn.Sequential(
                    Resnet1d(cfg.hidden, cfg.dilations),
                    nn.Upsample(scale_factor=2.0, mode="nearest"),
                    CausalConv1d(cfg.hidden, cfg.hidden, 3),
                )
            )
        self.conv_mid = CausalConv1d(cfg.hidden, cfg.hidden, 3)
        self.conv_out = CausalConv1d(cfg.hidden, dim, 3)

    def forward(self, z: Tensor) -> Tensor:
        """z (B, l, d) -> (B, l*h, D)."""
        h = F.silu(self.conv_in(z.transpose(1, 2)))
        for stage in self.stages:
            h = stage(h)
        h = self.conv_out(F.silu(self.conv_mid(h)))
        return h.transpose(1, 2)


class MotionAutoencoder(nn.Module):
    """Encoder + latent head + decoder, plus the SAE label projector."""

    def __init__(self, dim: int, cfg: AutoencoderConfig, text_embed_dim: int = 64):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.encoder = MotionEncoder(dim, cfg)
        self.decoder = MotionDecoder(dim, cfg)
        # label-side projection for the semantic loss; trains jointly with the encoder
        self.label_proj = nn.Linear(text_embed_dim, cfg.latent_dim)

    def encode_batch(
        self, x: Tensor, generator: Optional[torch.Generator] = None
    ) -> tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
        """x (B, T, D), T divisible by h -> (sample, mean, log_var)."""
        out = self.encoder(x)
        if not self.cfg.is_variational:
            return out, None, None
        mean, log_var = out.chunk(2, dim=-1)
        return reparameterize(mean, log_var, generator), mean, log_var

    def decode_batch(self, z: Tensor) -> Tensor:
        return self.decoder(z)


def build_autoencoder(spec_dim: int, cfg: AutoencoderConfig, text_embed_dim: int = 64) -> MotionAutoencoder:
    return MotionAutoencoder(spec_dim, cfg, text_embed_dim)


def encode(
    model: MotionAutoencoder,
    motion: MotionSequence,
    generator: Optional[torch.Generator] = None,
) -> LatentSequence:
    """Encode one normalized motion into latents (pads to a multiple of h first)."""
    h = model.cfg.downsample
    frames = pad_to_multiple(motion.frames, h)
    with torch.no_grad():
        if generator is None and model.cfg.is_variational:
            generator = torch.Generator().manual_seed(0)
        sample, mean, log_var = model.encode_batch(frames[None], generator)
    return LatentSequence(
        latents=sample[0],
        h=h,
        n_frames=len(motion),
        mean=None if mean is None else mean[0],
        log_var=None if log_var is None else log_var[0],
    )


def decode(model: MotionAutoencoder, latents: LatentSequence, spec: RepresentationSpec) -> MotionSequence:
    """Decode latents back to a normalized motion, truncated to the original length."""
    if latents.latents.shape[-1] != model.cfg.latent_dim:
        raise ValueError(
            f"latent dim {latents.latents.shape[-1]} does not match model ({model.cfg.latent_dim})"
        )
    if latents.h != model.cfg.downsample:
        raise ValueError(f"latent stride {latents.h} does not match model ({model.cfg.downsample})")
    with torch.no_grad():
        frames = model.decode_batch(latents.latents[None])[0]
    return MotionSequence(frames=frames[: latents.n_frames], spec=spec)


# ---------------------------------------------------------------------------
# losses


def reconstruction_losses(
    x: Tensor,
    x_hat: Tensor,
    stats: NormalizationStats,
    spec: RepresentationSpec,
    lambda_joint: float = 1.0,
    lambda_vel: float = 10.0,
    frame_mask: Optional[Tensor] = None,
) -> dict[str, Tensor]:
    """Feature, joint and joint-velocity losses on normalized (B, N, D) batches.

    Joint terms are computed in meters after denormalizing; the velocity term
    averages squared first differences over the N-1 transitions.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if frame_mask is None:
        frame_mask = torch.ones(x.shape[:-1], dtype=torch.bool, device=x.device)
    fm = frame_mask.to(x.dtype)
    denom = fm.sum() * x.shape[-1]

    l_feat = ((x - x_hat).square() * fm[..., None]).sum() / denom

    mean = stats.mean.to(x.dtype)
    std = stats.std.to(x.dtype)
    joints = joint_positions_from_features(x * std + mean, spec)
    joints_hat = joint_positions_from_features(x_hat * std + mean, spec)
    jm = fm[..., None, None]
    l_joint = ((joints - joints_hat).square() * jm).sum() / (fm.sum() * joints.shape[-2] * 3)

    vmask = frame_mask[..., 1:] & frame_mask[..., :-1]
    if int(vmask.sum()) == 0:
        log.warning("velocity loss undefined for single-frame input; using 0")
        l_vel = x.new_zeros(())
    else:
        dv = (joints[..., 1:, :, :] - joints[..., :-1, :, :]) - (
            joints_hat[..., 1:, :, :] - joints_hat[..., :-1, :, :]
        )
        vm = vmask.to(x.dtype)[..., None, None]
        l_vel = (dv.square() * vm).sum() / (vm.sum() * joints.shape[-2] * 3)

    l_recon = l_feat + lambda_joint * l_joint + lambda_vel * l_vel
    return {"l_feat": l_feat, "l_joint": l_joint, "l_vel": l_vel, "l_recon": l_recon}


def recon_loss(
    x: MotionSequence,
    x_hat: MotionSequence,
    stats: NormalizationStats,
    lambda_joint: float = 1.0,
    lambda_vel: float = 10.0,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Single-sequence reconstruction losses (L_feat, L_joint, L_vel, L_recon)."""
    parts = reconstruction_losses(
        x.frames[None], x_hat.frames[None], stats, x.spec, lambda_joint, lambda_vel
    )
    return parts["l_feat"], parts["l_joint"], parts["l_vel"], parts["l_recon"]


def kl_loss(mean: Tensor, log_var: Tensor) -> Tensor:
    """KL(q || N(0, I)) averaged over latent positions and dimensions."""
    if mean.shape != log_var.shape:
        raise ValueError("mean/log_var shape mismatch")
    return 0.5 * (torch.exp(log_var) + mean.square() - 1.0 - log_var).mean()


def latent_label_window(i: int, h: int) -> tuple[int, int]:
    """Inclusive frame window feeding latent i (4i-16 .. 4i+4 for h=4), before clamping."""
    return h * i - 4 * h, h * i + h


def class_tokens(
    labels: Sequence[Optional[str]],
    text_encoder: ToyTextEncoder,
    projector: nn.Linear,
    h: int,
    n_latents: Optional[int] = None,
) -> ClassTokenSequence:
    """Teacher tokens: per latent, project the mean embedding of window labels.

    Each frame in the (clamped) window contributes its label's mean token
    embedding; frames without labels are skipped. Windows with no labeled
    frame are marked invalid.
    """
    n = len(labels)
    if n_latents is None:
        n_latents = (n + h - 1) // h
    cache: dict[str, Tensor] = {}

    def embed(label: str) -> Tensor:
        if label not in cache:
            cache[label] = text_encoder.encode(label).tokens.mean(dim=0)
        return cache[label]

    raw = torch.zeros(n_latents, text_encoder.embed_dim)
    valid = torch.zeros(n_latents, dtype=torch.bool)
    for i in range(n_latents):
        lo, hi = latent_label_window(i, h)
        window = [labels[f] for f in range(max(lo, 0), min(hi, n - 1) + 1)]
        present = [embed(s) for s in window if s is not None]
        if present:
            raw[i] = torch.stack(present).mean(dim=0)
            valid[i] = True
    return ClassTokenSequence(tokens=projector(raw), valid_mask=valid)


def filter_repetitive(
    kappa: Tensor,
    tau: float,
    valid_mask: Optional[Tensor] = None,
    seq_ids: Optional[Tensor] = None,
) -> Tensor:
    """Keep-mask over flattened class tokens after dropping near-duplicates.

    Within each sequence, consecutive valid tokens with cosine similarity
    strictly above tau mark the earlier one as discarded; the last valid
    token of every sequence has no successor and is always kept.
    """
    b = kappa.shape[0]
    if valid_mask is None:
        valid_mask = torch.ones(b, dtype=torch.bool)
    if seq_ids is None:
        seq_ids = torch.zeros(b, dtype=torch.long)
    kept = valid_mask.clone()
    idx = valid_mask.nonzero(as_tuple=False).squeeze(1)
    if idx.numel() < 2:
        return kept
    a, nxt = idx[:-1], idx[1:]
    ka, kn = kappa[a], kappa[nxt]
    denom = torch.clamp(ka.norm(dim=-1) * kn.norm(dim=-1), min=COSINE_EPS)
    delta = (ka * kn).sum(dim=-1) / denom
    # filtering never crosses sequence boundaries; each sequence's last valid
    # position has no successor and stays kept
    discard = (seq_ids[a] == seq_ids[nxt]) & (delta > tau)
    kept[a[discard]] = False
    return kept


def semantic_loss(m: Tensor, kappa: Tensor, kept_mask: Tensor) -> Tensor:
    """Mean (1 - cos) between motion latents and their teacher tokens over kept positions."""
    if int(kept_mask.sum()) == 0:
        log.warning("semantic loss has no kept positions; using 0")
        return m.new_zeros(())
    mi, ki = m[kept_mask], kappa[kept_mask]
    m_norm, k_norm = mi.norm(dim=-1), ki.norm(dim=-1)
    ok = (m_norm > COSINE_EPS) & (k_norm > COSINE_EPS)
    if not bool(ok.all()):
        log.warning("semantic loss skipped %d zero-norm positions", int((~ok).sum()))
        if int(ok.sum()) == 0:
            return m.new_zeros(())
        mi, ki, m_norm, k_norm = mi[ok], ki[ok], m_norm[ok], k_norm[ok]
    cos = (mi * ki).sum(dim=-1) / (m_norm * k_norm)
    return (1.0 - cos).mean()
