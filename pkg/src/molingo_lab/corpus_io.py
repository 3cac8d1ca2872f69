"""Corpus container file (.mcorp): bit-exact round trip of frames, labels, prompts."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import torch

from . import container as c
from .motion import MotionSequence, RepresentationSpec

MAGIC = b"MLCORP01"
VERSION = 1


def _run_length(ids: list[int]) -> list[list[int]]:
    runs = []
    for i in ids:
        if runs and runs[-1][0] == i:
            runs[-1][1] += 1
        else:
            runs.append([i, 1])
    return runs


def write_corpus(path: str | Path, corpus: Sequence[MotionSequence]) -> None:
    specs = {m.spec for m in corpus}
    if len(specs) > 1:
        raise ValueError("corpus mixes representation specs")
    rep = corpus[0].spec if corpus else None

    strings: dict[str, int] = {}

    def intern(s: str) -> int:
        if s not in strings:
            strings[s] = len(strings)
        return strings[s]

    records = []
    for m in corpus:
        meta = {
            "n": len(m),
            "prompts": [intern(p) for p in m.prompts],
            "labels": _run_length([intern(s) for s in m.labels]) if m.labels is not None else None,
        }
        records.append((meta, m.frames))

    with open(path, "wb") as f:
        c.write_header(f, MAGIC, VERSION)
        c.write_json_block(
            f,
            {
                "count": len(corpus),
                "rep": rep.to_dict() if rep else None,
                "strings": [s for s, _ in sorted(strings.items(), key=lambda kv: kv[1])],
            },
        )
        for meta, frames in records:
            c.write_json_block(f, meta)
            c.write_array_block(f, frames.detach().cpu().numpy())


def read_corpus(path: str | Path) -> list[MotionSequence]:
    with open(path, "rb") as f:
        c.read_header(f, MAGIC, VERSION)
        meta = c.read_json_block(f)
        strings = meta["strings"]
        rep = RepresentationSpec.from_dict(meta["rep"]) if meta["rep"] else None
        corpus = []
        for _ in range(meta["count"]):
            rec = c.read_json_block(f)
            frames = torch.from_numpy(c.read_array_block(f, (rec["n"], rep.dim)))
            labels = None
            if rec["labels"] is not None:
                labels = []
                for sid, run in rec["labels"]:
                    labels.extend([strings[sid]] * run)
            corpus.append(
                MotionSequence(
                    frames=frames,
                    spec=rep,
                    labels=labels,
                    prompts=[strings[i] for i in rec["prompts"]],
                )
            )
    return corpus
