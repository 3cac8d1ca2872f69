"""Frozen per-token text embeddings (toy + precomputed import) and the text adapter."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import container as c

log = logging.getLogger(__name__)

MAGIC = b"MLEMB001"
VERSION = 1

EMBED_DIM = 64
HASH_TABLE_ROWS = 8192
NULL_PROMPT = ""
TEXT_TOKENS = 128  # fixed cross-attention width


@dataclass
class TokenEmbeddings:
    """Per-token embeddings of one prompt, (k, E)."""

    tokens: Tensor
    is_null: bool = False

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be (k>=1, E), got {tuple(self.tokens.shape)}")


@dataclass
class TextConditioning:
    """Adapted text tokens for cross-attention: w (B, l_text, D_h), validity mask (B, l_text)."""

    w: Tensor
    mask: Tensor  # bool, True where a real token lives


def _tokenize(prompt: str) -> list[str]:
    return [t.strip(".,!?;:").lower() for t in prompt.split() if t.strip(".,!?;:")]


class ToyTextEncoder:
    """Deterministic hash-table token embedder standing in for a large frozen encoder.

    Every token hashes into a fixed 8192-row Gaussian table; tokens from the
    synthetic-corpus vocabulary additionally receive a near-orthogonal
    refinement vector so the toy vocabulary stays well separated. The whole
    thing is frozen: same string, same embeddings, forever.
    """

    def __init__(self, embed_dim: int = EMBED_DIM, seed: int = 1234, vocabulary: list[str] | None = None):
        self.embed_dim = embed_dim
        rng = np.random.Generator(np.random.PCG64(seed))
        self._table = torch.from_numpy(
            rng.standard_normal((HASH_TABLE_ROWS, embed_dim)) / np.sqrt(embed_dim)
        ).float()
        self._null_row = torch.from_numpy(rng.standard_normal(embed_dim) / np.sqrt(embed_dim)).float()
        self._refine: dict[str, Tensor] = {}
        if vocabulary is None:
            vocabulary = _default_vocabulary()
        if vocabulary:
            gauss = rng.standard_normal((embed_dim, embed_dim))
            q, _ = np.linalg.qr(gauss)
            for i, word in enumerate(sorted(set(vocabulary))):
                self._refine[word] = torch.from_numpy(q[i % embed_dim].copy()).float()

    def _token_row(self, token: str) -> Tensor:
        digest = hashlib.sha1(token.encode("utf-8")).digest()
        idx = int.from_bytes(digest[:4], "little") % HASH_TABLE_ROWS
        row = self._table[idx]
        refine = self._refine.get(token)
        return row if refine is None else row + refine

    def encode(self, prompt: str) -> TokenEmbeddings:
        if prompt == NULL_PROMPT:
            return TokenEmbeddings(self._null_row[None].clone(), is_null=True)
        tokens = _tokenize(prompt)
        if not tokens:
            return TokenEmbeddings(self._null_row[None].clone(), is_null=True)
        return TokenEmbeddings(torch.stack([self._token_row(t) for t in tokens]))


def _default_vocabulary() -> list[str]:
    from .synthetic import default_cells

    vocab = set()
    for cell in default_cells():
        vocab.update(_tokenize(cell.label))
        for p in cell.prompt_templates:
            vocab.update(_tokenize(p))
    return sorted(vocab)


class PrecomputedTextEncoder:
    """Prompt-to-embedding map exported offline, with a toy-encoder fallback."""

    def __init__(self, mapping: dict[str, Tensor], fallback: ToyTextEncoder):
        widths = {int(v.shape[1]) for v in mapping.values()}
        if len(widths) > 1:
            raise ValueError(f"imported embeddings mix widths {sorted(widths)}")
        if mapping and widths != {fallback.embed_dim}:
            raise ValueError(
                f"imported embedding width {widths.pop()} does not match "
                f"model width {fallback.embed_dim}"
            )
        self.mapping = mapping
        self.fallback = fallback
        self.embed_dim = fallback.embed_dim

    def encode(self, prompt: str) -> TokenEmbeddings:
        if prompt == NULL_PROMPT:
            return self.fallback.encode(prompt)
        found = self.mapping.get(prompt)
        if found is None:
            log.warning("prompt not in imported embeddings, falling back to toy encoder: %r", prompt)
            return self.fallback.encode(prompt)
        return TokenEmbeddings(found.clone())


def export_embeddings(path: str | Path, mapping: dict[str, Tensor]) -> None:
    with open(path, "wb") as f:
        c.write_header(f, MAGIC, VERSION)
        c.write_json_block(f, {"count": len(mapping)})
        for prompt, tokens in mapping.items():
            k, e = tokens.shape
            c.write_json_block(f, {"prompt": prompt, "k": int(k), "e": int(e)})
            c.write_array_block(f, tokens.detach().cpu().numpy())


def import_embeddings(path: str | Path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        c.read_header(f, MAGIC, VERSION)
        meta = c.read_json_block(f)
        mapping = {}
        for _ in range(meta["count"]):
            rec = c.read_json_block(f)
            mapping[rec["prompt"]] = torch.from_numpy(c.read_array_block(f, (rec["k"], rec["e"])))
    return mapping


class AdapterBlock(nn.Module):
    """Pre-norm transformer encoder block over text tokens."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, x: Tensor, pad_mask: Tensor) -> Tensor:
        h = self.norm1(x)
        attn, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + attn
        return x + self.mlp(self.norm2(x))


class TextAdapter(nn.Module):
    """Projects raw token embeddings to the model width and refines them.

    depth=0 reduces to the bare linear projection (the "no adapter" ablation).
    Output is always right-padded/truncated to TEXT_TOKENS positions.
    """

    def __init__(self, embed_dim: int, width: int, depth: int = 6, heads: int = 4):
        super().__init__()
        self.embed_dim = embed_dim
        self.width = width
        self.depth = depth
        self.proj = nn.Linear(embed_dim, width)
        self.blocks = nn.ModuleList(AdapterBlock(width, heads) for _ in range(depth))

    def forward(self, tokens: Tensor, mask: Tensor) -> TextConditioning:
        """tokens (B, k, E), mask (B, k) bool with True = real token."""
        if tokens.shape[-1] != self.embed_dim:
            raise ValueError(
                f"token embedding width {tokens.shape[-1]} does not match adapter width {self.embed_dim}"
            )
        x = self.proj(tokens)
        pad_mask = ~mask  # MultiheadAttention wants True = ignore
        for block in self.blocks:
            x = block(x, pad_mask)
        b, k, w = x.shape
        if k >= TEXT_TOKENS:
            return TextConditioning(x[:, :TEXT_TOKENS], mask[:, :TEXT_TOKENS])
        pad = x.new_zeros(b, TEXT_TOKENS - k, w)
        pad_mask_tail = mask.new_zeros(b, TEXT_TOKENS - k)
        return TextConditioning(torch.cat([x, pad], dim=1), torch.cat([mask, pad_mask_tail], dim=1))


def collate_token_batch(embeddings: list[TokenEmbeddings]) -> tuple[Tensor, Tensor]:
    """Stack variable-length token matrices into (B, k_max, E) plus validity mask."""
    k_max = max(e.tokens.shape[0] for e in embeddings)
    e_dim = embeddings[0].tokens.shape[1]
    out = torch.zeros(len(embeddings), k_max, e_dim)
    mask = torch.zeros(len(embeddings), k_max, dtype=torch.bool)
    for i, emb in enumerate(embeddings):
        k = emb.tokens.shape[0]
        out[i, :k] = emb.tokens
        mask[i, :k] = True
    return out, mask
