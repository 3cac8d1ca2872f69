"""Versioned checkpoint container: named f32 tensor records with per-record CRC."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import Tensor

from . import container as c
from .motion import NormalizationStats

MAGIC = b"MLCKPT01"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, Tensor]
    stats: Optional[NormalizationStats] = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    tensors: dict[str, Tensor],
    stats: Optional[NormalizationStats] = None,
    extra: Optional[dict] = None,
) -> None:
    names = sorted(tensors)
    with open(path, "wb") as f:
        c.write_header(f, MAGIC, VERSION)
        c.write_json_block(
            f,
            {
                "kind": kind,
                "config": config,
                "stats": stats.to_dict() if stats is not None else None,
                "extra": extra or {},
                "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
            },
        )
        for n in names:
            c.write_array_block(f, tensors[n].detach().cpu().numpy())


def load_checkpoint(path: str | Path, expect_kind: Optional[str] = None) -> Checkpoint:
    with open(path, "rb") as f:
        c.read_header(f, MAGIC, VERSION)
        meta = c.read_json_block(f)
        if expect_kind is not None and meta["kind"] != expect_kind:
            raise ValueError(f"checkpoint is a {meta['kind']!r}, expected {expect_kind!r}")
        tensors = {}
        for rec in meta["tensors"]:
            tensors[rec["name"]] = torch.from_numpy(c.read_array_block(f, tuple(rec["shape"])))
    stats = NormalizationStats.from_dict(meta["stats"]) if meta["stats"] else None
    return Checkpoint(meta["kind"], meta["config"], tensors, stats, meta["extra"])


def pack_state_dict(module: torch.nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def unpack_state_dict(tensors: dict[str, Tensor], prefix: str = "") -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}
