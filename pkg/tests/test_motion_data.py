import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from molingo_lab.motion import (
    GUO67_SPEC,
    TOY_SPEC,
    JointTrajectory,
    Layout,
    MotionSequence,
    NormalizationStats,
    RepresentationSpec,
    compute_stats,
    denormalize,
    from_joint_positions,
    joint_positions_from_features,
    normalize,
    pad_to_multiple,
    to_joint_positions,
)


def random_trajectory(seed: int, n: int, spec: RepresentationSpec) -> JointTrajectory:
    """Smooth random trajectory with frame-0 root at the planar origin."""
    g = torch.Generator().manual_seed(seed)
    j = spec.joint_count
    t = torch.linspace(0, 2, n)
    pos = torch.zeros(n, j, 3, dtype=torch.float64)
    pos[:, 0, 0] = torch.cumsum(torch.randn(n, generator=g, dtype=torch.float64) * 0.03, 0)
    pos[:, 0, 2] = torch.cumsum(torch.randn(n, generator=g, dtype=torch.float64) * 0.03, 0)
    pos[:, 0, 0] -= pos[0, 0, 0].clone()
    pos[:, 0, 2] -= pos[0, 0, 2].clone()
    pos[:, 0, 1] = 0.9 + 0.05 * torch.sin(3 * t)
    for k in range(1, j):
        amp = 0.05 + 0.02 * k
        pos[:, k, 0] = pos[:, 0, 0] + 0.1 * k + amp * torch.sin(t * (k + 1))
        pos[:, k, 1] = 0.4 + 0.1 * k + amp * torch.cos(t * k)
        pos[:, k, 2] = pos[:, 0, 2] + amp * torch.sin(t * k + 1.0)
    left, right = spec.facing_joints
    pos[:, left, 2] = pos[:, 0, 2] - 0.18
    pos[:, right, 2] = pos[:, 0, 2] + 0.18
    # add heading variation about the root
    ang = 0.5 * torch.sin(t) + 0.1 * t
    c, s = torch.cos(ang), torch.sin(ang)
    x = pos[..., 0] - pos[:, 0:1, 0]
    z = pos[..., 2] - pos[:, 0:1, 2]
    pos2 = pos.clone()
    pos2[..., 0] = c[:, None] * x - s[:, None] * z + pos[:, 0:1, 0]
    pos2[..., 2] = s[:, None] * x + c[:, None] * z + pos[:, 0:1, 2]
    return JointTrajectory(pos2)


class TestRepresentationSpec:
    def test_guo67_dim(self):
        assert GUO67_SPEC.dim == 67
        assert GUO67_SPEC.joint_count == 22

    def test_toy_default_dim(self):
        assert TOY_SPEC.dim == 16

    def test_guo67_wrong_joints_rejected(self):
        with pytest.raises(ValueError):
            RepresentationSpec(joint_count=21, layout=Layout.GUO67_STYLE)

    def test_too_few_joints_rejected(self):
        with pytest.raises(ValueError):
            RepresentationSpec(joint_count=2)


class TestToJointPositions:
    def test_zero_frames_all_joints_at_origin(self):
        motion = MotionSequence(torch.zeros(5, TOY_SPEC.dim), TOY_SPEC)
        traj = to_joint_positions(motion)
        assert torch.equal(traj.positions, torch.zeros(5, 5, 3))

    def test_constant_velocity_forward_euler(self):
        # v = (1, 0) at 20 fps, no rotation: x[n] = n / 20
        frames = torch.zeros(6, TOY_SPEC.dim)
        frames[:, 1] = 1.0
        traj = joint_positions_from_features(frames, TOY_SPEC)
        expected = torch.tensor([0.0, 0.05, 0.10, 0.15, 0.20, 0.25])
        assert torch.allclose(traj[:, 0, 0], expected, atol=1e-7)
        assert torch.allclose(traj[:, 0, 2], torch.zeros(6), atol=1e-7)

    def test_non_finite_rejected_with_frame_index(self):
        frames = torch.zeros(4, TOY_SPEC.dim)
        frames[2, 3] = float("nan")
        with pytest.raises(ValueError, match="frame 2"):
            to_joint_positions(MotionSequence(frames, TOY_SPEC))


class TestRoundTrip:
    @pytest.mark.parametrize("seed", range(10))
    def test_round_trip_toy(self, seed):
        traj = random_trajectory(seed, n=31, spec=TOY_SPEC)
        motion = from_joint_positions(traj, TOY_SPEC)
        back = to_joint_positions(motion)
        assert (back.positions - traj.positions).abs().max() < 1e-5

    def test_round_trip_many_random(self):
        worst = 0.0
        for seed in range(100):
            traj = random_trajectory(seed, n=17, spec=TOY_SPEC)
            back = to_joint_positions(from_joint_positions(traj, TOY_SPEC))
            worst = max(worst, float((back.positions - traj.positions).abs().max()))
        assert worst < 1e-5

    def test_round_trip_guo67(self):
        traj = random_trajectory(3, n=25, spec=GUO67_SPEC)
        motion = from_joint_positions(traj, GUO67_SPEC)
        assert motion.frames.shape == (25, 67)
        back = to_joint_positions(motion)
        assert (back.positions - traj.positions).abs().max() < 1e-5

    def test_origin_static_trajectory_zero_features(self):
        # standing exactly at the base pose: no velocities, constant locals
        pos = torch.zeros(4, 5, 3, dtype=torch.float64)
        pos[:, 3, 2] = -0.18
        pos[:, 4, 2] = 0.18
        pos[:, 0, 1] = 0.0
        motion = from_joint_positions(JointTrajectory(pos), TOY_SPEC)
        assert motion.frames[:, :4].abs().max() == 0  # velocities and height all zero

    def test_straight_walk_constant_velocity_channels(self):
        # constant-speed straight line: velocity channels equal finite differences
        n, speed, fps = 12, 1.3, TOY_SPEC.fps
        pos = torch.zeros(n, 5, 3, dtype=torch.float64)
        t = torch.arange(n, dtype=torch.float64) / fps
        pos[:, :, 0] = (speed * t)[:, None]
        pos[:, 0, 1] = 0.9
        pos[:, 1, 1] = pos[:, 2, 1] = 0.95
        pos[:, 1, 2], pos[:, 2, 2] = -0.35, 0.35
        pos[:, 3, 1] = pos[:, 4, 1] = 0.1
        pos[:, 3, 2], pos[:, 4, 2] = -0.18, 0.18
        motion = from_joint_positions(JointTrajectory(pos), TOY_SPEC)
        assert torch.allclose(motion.frames[:, 1], torch.full((n,), speed).double(), atol=1e-9)
        assert motion.frames[:, 0].abs().max() < 1e-9
        assert motion.frames[:, 2].abs().max() < 1e-9

    def test_yaw_rotation_equivariance(self):
        traj = random_trajectory(7, n=21, spec=TOY_SPEC)
        for beta in (0.3, -1.2, 2.5):
            c, s = np.cos(beta), np.sin(beta)
            rot = traj.positions.clone()
            x, z = rot[..., 0].clone(), rot[..., 2].clone()
            rot[..., 0] = c * x - s * z
            rot[..., 2] = s * x + c * z
            rot_traj = JointTrajectory(rot)
            motion = from_joint_positions(rot_traj, TOY_SPEC)
            base = from_joint_positions(traj, TOY_SPEC)
            # heading channel is unchanged by a global yaw rotation
            assert torch.allclose(motion.frames[:, 0], base.frames[:, 0], atol=1e-6)
            back = to_joint_positions(motion)
            assert (back.positions - rot).abs().max() < 1e-5

    def test_joint_count_mismatch(self):
        traj = random_trajectory(0, n=8, spec=TOY_SPEC)
        with pytest.raises(ValueError, match="joints"):
            from_joint_positions(traj, GUO67_SPEC)


class TestNormalization:
    def test_x_equals_mean_maps_to_zero(self):
        stats = NormalizationStats(mean=torch.arange(16.0), std=torch.ones(16) * 2)
        motion = MotionSequence(torch.arange(16.0).repeat(3, 1), TOY_SPEC)
        out = normalize(motion, stats)
        assert out.frames.abs().max() == 0

    def test_round_trip(self, toy_corpus):
        stats = compute_stats(toy_corpus)
        m = toy_corpus[0]
        back = denormalize(normalize(m, stats), stats)
        assert (back.frames - m.frames).abs().max() < 1e-6

    def test_corpus_stats_give_standard_moments(self, toy_corpus):
        stats = compute_stats(toy_corpus)
        normalized = torch.cat([normalize(m, stats).frames for m in toy_corpus])
        assert normalized.mean(dim=0).abs().max() < 1e-6
        # constant channels are clamped by the std floor, exclude them
        live = stats.std > NormalizationStats.EPS_STD
        assert (normalized.std(dim=0, unbiased=False)[live] - 1).abs().max() < 1e-4

    def test_dimension_mismatch(self):
        stats = NormalizationStats(mean=torch.zeros(8), std=torch.ones(8))
        with pytest.raises(ValueError, match="dim"):
            normalize(MotionSequence(torch.zeros(3, 16), TOY_SPEC), stats)

    def test_std_floor(self):
        stats = NormalizationStats(mean=torch.zeros(16), std=torch.zeros(16))
        assert (stats.std >= 1e-6).all()

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_normalize_denormalize_property(self, seed):
        g = torch.Generator().manual_seed(seed)
        frames = torch.randn(4, 16, generator=g) * 3 + 1
        stats = NormalizationStats(
            mean=torch.randn(16, generator=g), std=torch.rand(16, generator=g) + 0.1
        )
        m = MotionSequence(frames, TOY_SPEC)
        back = denormalize(normalize(m, stats), stats)
        assert (back.frames - frames).abs().max() < 1e-6


class TestPadding:
    def test_pad_to_multiple_replicates_edge(self):
        frames = torch.arange(10.0).reshape(5, 2)
        padded = pad_to_multiple(frames, 4)
        assert padded.shape == (8, 2)
        assert torch.equal(padded[5], frames[4])
        assert torch.equal(padded[7], frames[4])

    def test_already_multiple_untouched(self):
        frames = torch.randn(8, 2)
        assert pad_to_multiple(frames, 4) is frames
