"""Motion representation, kinematic recovery and normalization.

The feature layout per frame (shared by the toy and the 22-joint variants):

    [0]              root yaw angular velocity (rad/s)
    [1:3]            root planar linear velocity (x, z) in the heading frame (m/s)
    [3]              root height (m, absolute)
    [4:4+3*(J-1)]    local joint positions (x, y, z) per non-root joint;
                     planar components are root-centered and heading-aligned,
                     height stays absolute

Velocities in row n describe the transition from frame n to frame n+1; the
last row replicates the previous one (it is never read back by the decoder).
Root recovery integrates with explicit forward Euler:

    yaw[n+1] = yaw[n] + w[n] / fps
    pos[n+1] = pos[n] + R(yaw[n]) @ v[n] / fps

with frame 0 at the planar origin and yaw 0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor


class Layout(enum.Enum):
    TOY = "toy"
    GUO67_STYLE = "guo67_style"


@dataclass(frozen=True)
class RepresentationSpec:
    """Shape and units of the per-frame motion features."""

    joint_count: int
    layout: Layout = Layout.TOY
    fps: float = 20.0

    def __post_init__(self):
        if self.joint_count < 3:
            raise ValueError(f"joint_count must be >= 3, got {self.joint_count}")
        if self.layout is Layout.GUO67_STYLE and self.joint_count != 22:
            raise ValueError("GUO67_STYLE requires 22 joints")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def dim(self) -> int:
        return 4 + 3 * (self.joint_count - 1)

    @property
    def facing_joints(self) -> tuple[int, int]:
        """(left, right) joint indices whose across vector defines heading."""
        if self.layout is Layout.GUO67_STYLE:
            return 1, 2  # l_hip, r_hip
        return self.joint_count - 2, self.joint_count - 1

    def to_dict(self) -> dict:
        return {"joint_count": self.joint_count, "layout": self.layout.value, "fps": self.fps}

    @staticmethod
    def from_dict(d: dict) -> "RepresentationSpec":
        return RepresentationSpec(int(d["joint_count"]), Layout(d["layout"]), float(d["fps"]))


TOY_SPEC = RepresentationSpec(joint_count=5, layout=Layout.TOY, fps=20.0)  # D=16
GUO67_SPEC = RepresentationSpec(joint_count=22, layout=Layout.GUO67_STYLE, fps=20.0)  # D=67


@dataclass
class MotionSequence:
    """An (N, D) frame matrix plus metadata."""

    frames: Tensor  # (N, D)
    spec: RepresentationSpec
    labels: Optional[list[str]] = None
    prompts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {tuple(self.frames.shape)}")
        n, d = self.frames.shape
        if n < 1:
            raise ValueError("motion must contain at least one frame")
        if d != self.spec.dim:
            raise ValueError(f"frame dim {d} does not match spec dim {self.spec.dim}")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError(f"{len(self.labels)} labels for {n} frames")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: Tensor) -> "MotionSequence":
        return replace(self, frames=frames)


@dataclass
class JointTrajectory:
    """World-space joint positions, (N, J, 3) in meters."""

    positions: Tensor

    def __post_init__(self):
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise ValueError(f"positions must be (N, J, 3), got {tuple(self.positions.shape)}")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class NormalizationStats:
    """Per-dimension z-normalization statistics (kept in float64)."""

    mean: Tensor  # (D,)
    std: Tensor  # (D,)

    EPS_STD = 1e-6

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.float64)
        self.std = torch.clamp(torch.as_tensor(self.std, dtype=torch.float64), min=self.EPS_STD)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationStats":
        return NormalizationStats(
            torch.tensor(d["mean"], dtype=torch.float64),
            torch.tensor(d["std"], dtype=torch.float64),
        )


def _check_finite(frames: Tensor) -> None:
    finite = torch.isfinite(frames)
    if not bool(finite.all()):
        bad = int((~finite).any(dim=-1).nonzero()[0, 0])
        raise ValueError(f"non-finite motion features at frame {bad}")


def _rot_planar(theta: Tensor, x: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
    """Rotate (x, z) by theta in the ground plane."""
    c, s = torch.cos(theta), torch.sin(theta)
    return c * x - s * z, s * x + c * z


def joint_positions_from_features(frames: Tensor, spec: RepresentationSpec) -> Tensor:
    """Differentiable feature-to-joint transform, (..., N, D) -> (..., N, J, 3)."""
    fps = frames.new_tensor(spec.fps)
    J = spec.joint_count
    w = frames[..., 0]  # (..., N)
    vx, vz = frames[..., 1], frames[..., 2]
    height = frames[..., 3]

    # integrate heading: yaw[0] = 0, yaw[n] = sum_{k<n} w[k]/fps
    zero = torch.zeros_like(w[..., :1])
    yaw = torch.cumsum(torch.cat([zero, w[..., :-1] / fps], dim=-1), dim=-1)

    # rotate per-frame velocity into world frame, then integrate
    wx, wz = _rot_planar(yaw, vx, vz)
    px = torch.cumsum(torch.cat([zero, wx[..., :-1] / fps], dim=-1), dim=-1)
    pz = torch.cumsum(torch.cat([zero, wz[..., :-1] / fps], dim=-1), dim=-1)

    locals_ = frames[..., 4:].reshape(*frames.shape[:-1], J - 1, 3)
    lx, lz = _rot_planar(yaw[..., None], locals_[..., 0], locals_[..., 2])
    jx = lx + px[..., None]
    jy = locals_[..., 1]
    jz = lz + pz[..., None]

    root = torch.stack([px, height, pz], dim=-1)[..., None, :]  # (..., N, 1, 3)
    rest = torch.stack([jx, jy, jz], dim=-1)  # (..., N, J-1, 3)
    return torch.cat([root, rest], dim=-2)


def to_joint_positions(motion: MotionSequence) -> JointTrajectory:
    """Recover world-space joints from (denormalized) motion features."""
    _check_finite(motion.frames)
    return JointTrajectory(joint_positions_from_features(motion.frames, motion.spec))


def _unwrap(phi: Tensor) -> Tensor:
    """Make consecutive angles continuous (numpy.unwrap for the last axis)."""
    d = phi[..., 1:] - phi[..., :-1]
    d = torch.remainder(d + torch.pi, 2 * torch.pi) - torch.pi
    return torch.cat([phi[..., :1], phi[..., :1] + torch.cumsum(d, dim=-1)], dim=-1)


def _replicate_last(v: Tensor) -> Tensor:
    """Extend (N-1, ...) per-transition values to N rows by repeating the last."""
    if v.shape[0] == 0:
        raise ValueError("need at least one transition")
    return torch.cat([v, v[-1:]], dim=0)


def from_joint_positions(traj: JointTrajectory, spec: RepresentationSpec) -> MotionSequence:
    """Encode a world-space trajectory into motion features.

    Left inverse of `to_joint_positions` for trajectories whose frame-0 root
    sits at the planar origin (the planar offset of frame 0 is not
    representable; heading is stored relative to frame 0).
    """
    pos = traj.positions
    if not bool(torch.isfinite(pos).all()):
        raise ValueError("non-finite joint positions")
    if pos.shape[1] != spec.joint_count:
        raise ValueError(f"trajectory has {pos.shape[1]} joints, spec expects {spec.joint_count}")
    n = pos.shape[0]
    fps = pos.new_tensor(spec.fps)

    left, right = spec.facing_joints
    across_x = pos[:, right, 0] - pos[:, left, 0]
    across_z = pos[:, right, 2] - pos[:, left, 2]
    if bool((across_x.square() + across_z.square() < 1e-12).any()):
        raise ValueError("degenerate facing: left/right reference joints coincide in the plane")
    # heading is the across vector rotated -90 deg in the plane
    fwd_x, fwd_z = across_z, -across_x
    phi = _unwrap(torch.atan2(fwd_z, fwd_x))
    yaw = phi - phi[0]

    root = pos[:, 0]
    if n > 1:
        w = (yaw[1:] - yaw[:-1]) * fps
        dpx = (root[1:, 0] - root[:-1, 0]) * fps
        dpz = (root[1:, 2] - root[:-1, 2]) * fps
        vx, vz = _rot_planar(-yaw[:-1], dpx, dpz)
        w, vx, vz = _replicate_last(w), _replicate_last(vx), _replicate_last(vz)
    else:
        w = torch.zeros_like(yaw)
        vx = torch.zeros_like(yaw)
        vz = torch.zeros_like(yaw)

    rel = pos[:, 1:].clone()
    rel[..., 0] = rel[..., 0] - root[:, None, 0]
    rel[..., 2] = rel[..., 2] - root[:, None, 2]
    lx, lz = _rot_planar(-yaw[:, None], rel[..., 0], rel[..., 2])
    locals_ = torch.stack([lx, rel[..., 1], lz], dim=-1).reshape(n, -1)

    frames = torch.cat([w[:, None], vx[:, None], vz[:, None], root[:, 1:2], locals_], dim=-1)
    return MotionSequence(frames=frames, spec=spec)


def normalize(motion: MotionSequence, stats: NormalizationStats) -> MotionSequence:
    if stats.mean.shape[0] != motion.spec.dim:
        raise ValueError(f"stats dim {stats.mean.shape[0]} != feature dim {motion.spec.dim}")
    out = (motion.frames.double() - stats.mean) / stats.std
    return motion.with_frames(out.to(motion.frames.dtype))


def denormalize(motion: MotionSequence, stats: NormalizationStats) -> MotionSequence:
    if stats.mean.shape[0] != motion.spec.dim:
        raise ValueError(f"stats dim {stats.mean.shape[0]} != feature dim {motion.spec.dim}")
    out = motion.frames.double() * stats.std + stats.mean
    return motion.with_frames(out.to(motion.frames.dtype))


def compute_stats(corpus: Sequence[MotionSequence]) -> NormalizationStats:
    """Per-dimension mean/std over all frames of a corpus."""
    if not corpus:
        raise ValueError("cannot compute stats over an empty corpus")
    stacked = torch.cat([m.frames.double() for m in corpus], dim=0)
    return NormalizationStats(mean=stacked.mean(dim=0), std=stacked.std(dim=0, unbiased=False))


def pad_to_multiple(frames: Tensor, h: int) -> Tensor:
    """Right-pad (N, D) frames to a multiple of h by edge replication."""
    n = frames.shape[0]
    rem = (-n) % h
    if rem == 0:
        return frames
    return torch.cat([frames, frames[-1:].expand(rem, -1)], dim=0)


def mean_joint_distance(a: JointTrajectory, b: JointTrajectory) -> float:
    """Mean per-frame per-joint Euclidean distance over the overlapping frames."""
    n = min(len(a), len(b))
    d = (a.positions[:n] - b.positions[:n]).norm(dim=-1)
    return float(d.mean())
