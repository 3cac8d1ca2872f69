"""Bundles tying trained modules to their configs, stats and text encoders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import Tensor

from .autoencoder import (
    AutoencoderConfig,
    LatentSequence,
    MotionAutoencoder,
    build_autoencoder,
    decode as decode_latents,
    encode as encode_motion,
)
from .checkpoints import Checkpoint, load_checkpoint, pack_state_dict, save_checkpoint, unpack_state_dict
from .generator import GeneratorConfig, MotionGenerator
from .motion import (
    MotionSequence,
    NormalizationStats,
    RepresentationSpec,
    denormalize,
    normalize,
    pad_to_multiple,
)
from .text_encoding import ToyTextEncoder


def _text_encoder_config(enc: ToyTextEncoder, seed: int) -> dict:
    return {"embed_dim": enc.embed_dim, "seed": seed, "vocab": sorted(enc._refine)}


def _text_encoder_from_config(d: dict) -> ToyTextEncoder:
    return ToyTextEncoder(embed_dim=d["embed_dim"], seed=d["seed"], vocabulary=d["vocab"])


@dataclass
class AutoencoderBundle:
    model: MotionAutoencoder
    cfg: AutoencoderConfig
    rep: RepresentationSpec
    stats: NormalizationStats
    text_seed: int = 1234

    def encode(self, motion: MotionSequence, generator: Optional[torch.Generator] = None) -> LatentSequence:
        """Normalize, pad and encode one raw motion."""
        return encode_motion(self.model, normalize(motion, self.stats), generator)

    def decode(self, latents: LatentSequence) -> MotionSequence:
        """Decode latents and denormalize back to raw feature units."""
        return denormalize(decode_latents(self.model, latents, self.rep), self.stats)

    def reconstruct(self, motion: MotionSequence) -> MotionSequence:
        """Mean-path round trip through the autoencoder (deterministic)."""
        lat = self.encode(motion)
        if lat.mean is not None:
            lat = LatentSequence(lat.mean, lat.h, lat.n_frames)
        out = self.decode(lat)
        out.labels, out.prompts = motion.labels, list(motion.prompts)
        return out

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            kind="autoencoder",
            config={
                "ae": self.cfg.to_dict(),
                "rep": self.rep.to_dict(),
                "text_seed": self.text_seed,
            },
            tensors=pack_state_dict(self.model, "model."),
            stats=self.stats,
        )

    @staticmethod
    def load(path: str | Path) -> "AutoencoderBundle":
        ckpt = load_checkpoint(path, expect_kind="autoencoder")
        cfg = AutoencoderConfig.from_dict(ckpt.config["ae"])
        rep = RepresentationSpec.from_dict(ckpt.config["rep"])
        model = build_autoencoder(rep.dim, cfg)
        model.load_state_dict(unpack_state_dict(ckpt.tensors, "model."))
        model.eval()
        return AutoencoderBundle(model, cfg, rep, ckpt.stats, ckpt.config.get("text_seed", 1234))


@dataclass
class GeneratorBundle:
    model: MotionGenerator
    ema: dict[str, Tensor]
    cfg: GeneratorConfig
    text_encoder: ToyTextEncoder
    text_seed: int
    ae_fingerprint: dict
    # channel-wise standardization applied to latents before flow training;
    # sampled latents are mapped back before decoding
    latent_mean: Optional[Tensor] = None
    latent_std: Optional[Tensor] = None

    def __post_init__(self):
        d = self.cfg.latent_dim
        if self.latent_mean is None:
            self.latent_mean = torch.zeros(d)
        if self.latent_std is None:
            self.latent_std = torch.ones(d)

    def unstandardize(self, latents: Tensor) -> Tensor:
        return latents * self.latent_std + self.latent_mean

    def ema_model(self) -> MotionGenerator:
        model = MotionGenerator(self.cfg)
        model.load_state_dict(self.ema)
        model.eval()
        return model

    def check_compatible(self, ae: AutoencoderBundle) -> None:
        fp = {"latent_dim": ae.cfg.latent_dim, "downsample": ae.cfg.downsample}
        if fp != self.ae_fingerprint:
            raise ValueError(
                f"generator was trained against autoencoder {self.ae_fingerprint}, got {fp}"
            )

    def save(self, path: str | Path) -> None:
        tensors = pack_state_dict(self.model, "model.")
        tensors.update({"ema." + k: v for k, v in self.ema.items()})
        tensors["latent_stats.mean"] = self.latent_mean
        tensors["latent_stats.std"] = self.latent_std
        save_checkpoint(
            path,
            kind="generator",
            config={
                "gen": self.cfg.to_dict(),
                "text": _text_encoder_config(self.text_encoder, self.text_seed),
                "ae_fingerprint": self.ae_fingerprint,
            },
            tensors=tensors,
        )

    @staticmethod
    def load(path: str | Path) -> "GeneratorBundle":
        ckpt = load_checkpoint(path, expect_kind="generator")
        cfg = GeneratorConfig.from_dict(ckpt.config["gen"])
        model = MotionGenerator(cfg)
        model.load_state_dict(unpack_state_dict(ckpt.tensors, "model."))
        model.eval()
        return GeneratorBundle(
            model=model,
            ema=unpack_state_dict(ckpt.tensors, "ema."),
            cfg=cfg,
            text_encoder=_text_encoder_from_config(ckpt.config["text"]),
            text_seed=ckpt.config["text"]["seed"],
            ae_fingerprint=ckpt.config["ae_fingerprint"],
            latent_mean=ckpt.tensors["latent_stats.mean"],
            latent_std=ckpt.tensors["latent_stats.std"],
        )


def pad_feature_batch(
    corpus: Sequence[MotionSequence], h: int
) -> tuple[Tensor, Tensor]:
    """Stack raw frames into (B, N_max, D) padded by edge replication, plus validity mask."""
    padded = [pad_to_multiple(m.frames, h) for m in corpus]
    n_max = max(p.shape[0] for p in padded)
    d = padded[0].shape[1]
    out = torch.zeros(len(padded), n_max, d)
    mask = torch.zeros(len(padded), n_max, dtype=torch.bool)
    for i, (p, m) in enumerate(zip(padded, corpus)):
        n = p.shape[0]
        out[i, :n] = p
        if n < n_max:
            out[i, n:] = p[-1]  # replicate the edge so convs see sane context
        mask[i, : len(m)] = True
    return out, mask
