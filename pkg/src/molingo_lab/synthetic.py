"""Synthetic labeled motion corpus.

Five parameterized archetypes on a 5-joint toy skeleton (root, two hands,
two feet), split into semantic cells (e.g. "walk fast", "circle left slow").
Every sequence carries a constant frame label and 1-3 sentence prompts that
mention the cell's distinguishing factors, so retrieval metrics have signal
beyond the base archetype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .motion import (
    JointTrajectory,
    MotionSequence,
    RepresentationSpec,
    TOY_SPEC,
    from_joint_positions,
)

ROOT, L_HAND, R_HAND, L_FOOT, R_FOOT = range(5)

_BASE_OFFSETS = np.array(
    [
        [0.00, 0.90, 0.00],  # root (pelvis)
        [0.05, 0.95, -0.35],  # left hand
        [0.05, 0.95, 0.35],  # right hand
        [0.00, 0.10, -0.18],  # left foot
        [0.00, 0.10, 0.18],  # right foot
    ]
)


@dataclass(frozen=True)
class MotionCell:
    """One semantic cell: an archetype variant with its own label and prompts."""

    archetype: str
    name: str
    label: str
    prompt_templates: tuple[str, ...]
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthSpec:
    """Corpus recipe: representation, length range and the cell inventory."""

    rep: RepresentationSpec = TOY_SPEC
    length_range: tuple[int, int] = (36, 72)
    cells: tuple[MotionCell, ...] = ()
    distinct_margin: float = 0.05  # meters, pairwise mean joint distance between archetypes

    def __post_init__(self):
        cells = self.cells or default_cells()
        object.__setattr__(self, "cells", cells)
        if len({c.archetype for c in self.cells}) < 4:
            raise ValueError("need at least 4 distinct motion archetypes")
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise ValueError(f"bad length range {self.length_range}")
        if self.rep.joint_count != 5:
            raise ValueError("the synthetic generator targets the 5-joint toy skeleton")


def default_cells() -> tuple[MotionCell, ...]:
    cells = []

    def add(archetype, name, label, prompts, **params):
        cells.append(MotionCell(archetype, name, label, tuple(prompts), params))

    for pace, speed, freq in [("slow", 0.5, 0.8), ("fast", 1.4, 1.6)]:
        adverb = "slowly" if pace == "slow" else "quickly"
        add(
            "walk_straight",
            f"walk {pace}",
            f"walk {pace}",
            (
                f"a person walks straight ahead {adverb}",
                f"someone is walking forward at a {pace} pace",
                f"a person walks {adverb} in a straight line",
            ),
            speed=speed,
            freq=freq,
        )
    for side in ("left", "right"):
        for pace, speed in [("slow", 0.5), ("fast", 1.1)]:
            adverb = "slowly" if pace == "slow" else "quickly"
            add(
                "walk_circle",
                f"circle {side} {pace}",
                f"circle {side} {pace}",
                (
                    f"a person walks {adverb} in a circle to the {side}",
                    f"someone turns {side} while walking at a {pace} pace",
                    f"walking {adverb}, a person curves around to the {side}",
                ),
                side=side,
                speed=speed,
            )
    for side in ("left", "right"):
        add(
            "raise_arm",
            f"raise {side} arm",
            f"raise {side} arm",
            (
                f"a person raises the {side} arm above the head",
                f"someone lifts the {side} hand straight up",
                f"a person puts the {side} arm up high and holds it",
            ),
            side=side,
        )
    for pace, freq in [("slow", 0.35), ("fast", 0.9)]:
        adverb = "slowly" if pace == "slow" else "quickly"
        add(
            "squat",
            f"squat {pace}",
            f"squat {pace}",
            (
                f"a person does squats {adverb}",
                f"someone bends the knees and squats at a {pace} tempo",
                f"a person repeatedly squats down {adverb} and stands back up",
            ),
            freq=freq,
        )
    for side in ("left", "right"):
        add(
            "wave",
            f"wave {side} hand",
            f"wave {side} hand",
            (
                f"a person waves the {side} hand overhead",
                f"someone waves with the {side} arm raised",
                f"a person holds the {side} hand up and waves it from side to side",
            ),
            side=side,
        )
    return tuple(cells)


def _standing(n: int) -> np.ndarray:
    return np.repeat(_BASE_OFFSETS[None], n, axis=0).astype(np.float64)


def _apply_heading(pos: np.ndarray, yaw: np.ndarray, root_xz: np.ndarray) -> np.ndarray:
    """Rotate body-local joints by per-frame yaw and translate to root_xz."""
    out = pos.copy()
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x, z = pos[..., 0], pos[..., 2]
    out[..., 0] = c * x - s * z + root_xz[:, None, 0]
    out[..., 2] = s * x + c * z + root_xz[:, None, 1]
    return out


def _gait(pos: np.ndarray, t: np.ndarray, freq: float, phase: float, amp: float) -> None:
    """Add leg/arm swing (in body frame, forward = +x) in place."""
    swing = np.sin(2 * math.pi * freq * t + phase)
    lift = np.maximum(0.0, np.cos(2 * math.pi * freq * t + phase))
    pos[:, L_FOOT, 0] += amp * swing
    pos[:, R_FOOT, 0] -= amp * swing
    pos[:, L_FOOT, 1] += 0.06 * np.maximum(0.0, swing) * lift
    pos[:, R_FOOT, 1] += 0.06 * np.maximum(0.0, -swing) * lift
    pos[:, L_HAND, 0] -= 0.6 * amp * swing
    pos[:, R_HAND, 0] += 0.6 * amp * swing
    pos[:, ROOT, 1] += 0.015 * np.cos(4 * math.pi * freq * t + 2 * phase)


def _walk_straight(params, n, fps, rng):
    t = np.arange(n) / fps
    speed = params["speed"] * rng.uniform(0.9, 1.1)
    freq = params["freq"] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * math.pi)
    pos = _standing(n)
    _gait(pos, t, freq, phase, amp=0.12 + 0.06 * speed)
    root_xz = np.stack([speed * t, np.zeros(n)], axis=1)
    return _apply_heading(pos, np.zeros(n), root_xz)


def _walk_circle(params, n, fps, rng):
    t = np.arange(n) / fps
    speed = params["speed"] * rng.uniform(0.9, 1.1)
    radius = rng.uniform(0.8, 1.4)
    sgn = 1.0 if params["side"] == "left" else -1.0
    omega = sgn * speed / radius
    freq = 0.8 + 0.5 * speed
    phase = rng.uniform(0, 2 * math.pi)
    pos = _standing(n)
    _gait(pos, t, freq, phase, amp=0.12 + 0.06 * speed)
    yaw = omega * t
    # closed-form integral of speed along the rotating heading
    root_xz = np.stack(
        [(speed / omega) * np.sin(omega * t), (speed / omega) * (1 - np.cos(omega * t))], axis=1
    )
    return _apply_heading(pos, yaw, root_xz)


def _raise_arm(params, n, fps, rng):
    t = np.arange(n) / fps
    hand = L_HAND if params["side"] == "left" else R_HAND
    rise_time = max(0.4, 0.35 * n / fps) * rng.uniform(0.9, 1.1)
    pos = _standing(n)
    progress = np.clip(t / rise_time, 0.0, 1.0)
    smooth = 0.5 - 0.5 * np.cos(math.pi * progress)
    pos[:, hand, 1] += 0.78 * smooth
    pos[:, hand, 0] += 0.06 * smooth
    pos[:, hand, 2] *= 1.0 - 0.75 * smooth  # arm comes in over the head
    pos[:, ROOT, 1] += 0.01 * np.sin(2 * math.pi * 0.4 * t + rng.uniform(0, 2 * math.pi))
    return _apply_heading(pos, np.zeros(n), np.zeros((n, 2)))


def _squat(params, n, fps, rng):
    t = np.arange(n) / fps
    freq = params["freq"] * rng.uniform(0.9, 1.1)
    depth = rng.uniform(0.28, 0.38)
    phase = rng.uniform(0, 2 * math.pi)
    dip = 0.5 - 0.5 * np.cos(2 * math.pi * freq * t + phase)
    pos = _standing(n)
    pos[:, ROOT, 1] -= depth * dip
    for hand in (L_HAND, R_HAND):
        pos[:, hand, 1] -= (depth + 0.15) * dip
        pos[:, hand, 0] += 0.28 * dip  # arms reach forward for balance
    return _apply_heading(pos, np.zeros(n), np.zeros((n, 2)))


def _wave(params, n, fps, rng):
    t = np.arange(n) / fps
    hand = L_HAND if params["side"] == "left" else R_HAND
    freq = rng.uniform(1.6, 2.2)
    phase = rng.uniform(0, 2 * math.pi)
    pos = _standing(n)
    pos[:, hand, 1] += 0.45
    pos[:, hand, 0] += 0.12
    pos[:, hand, 2] *= 1.15  # hand stays out to the side
    pos[:, hand, 2] += 0.28 * np.sin(2 * math.pi * freq * t + phase)
    pos[:, ROOT, 1] += 0.008 * np.sin(2 * math.pi * 0.5 * t + phase)
    return _apply_heading(pos, np.zeros(n), np.zeros((n, 2)))


_GENERATORS: dict[str, Callable] = {
    "walk_straight": _walk_straight,
    "walk_circle": _walk_circle,
    "raise_arm": _raise_arm,
    "squat": _squat,
    "wave": _wave,
}


def canonical_trajectory(cell: MotionCell, n: int, fps: float, seed: int = 0) -> JointTrajectory:
    """Deterministic representative trajectory of a cell (used for distinctness checks)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    pos = _GENERATORS[cell.archetype](cell.params, n, fps, rng)
    return JointTrajectory(torch.from_numpy(pos).float())


def synth_corpus(class_spec: SynthSpec, count: int, seed: int) -> list[MotionSequence]:
    """Generate `count` labeled sequences, deterministically in (class_spec, count, seed)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    rep = class_spec.rep
    cells = class_spec.cells
    corpus = []
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        cell = cells[int(rng.integers(len(cells)))]
        n = int(rng.integers(class_spec.length_range[0], class_spec.length_range[1] + 1))
        pos = _GENERATORS[cell.archetype](cell.params, n, rep.fps, rng)
        traj = JointTrajectory(torch.from_numpy(pos).float())
        motion = from_joint_positions(traj, rep)
        k = int(rng.integers(1, 4))
        order = rng.permutation(len(cell.prompt_templates))[:k]
        motion.prompts = [cell.prompt_templates[j] for j in order]
        motion.labels = [cell.label] * n
        corpus.append(motion)
    return corpus
