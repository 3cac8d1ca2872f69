import pytest
import torch

from molingo_lab.motion import mean_joint_distance, to_joint_positions
from molingo_lab.synthetic import MotionCell, SynthSpec, canonical_trajectory, default_cells, synth_corpus


def test_deterministic_in_seed():
    spec = SynthSpec(length_range=(24, 40))
    a = synth_corpus(spec, 10, seed=7)
    b = synth_corpus(spec, 10, seed=7)
    for x, y in zip(a, b):
        assert torch.equal(x.frames, y.frames)
        assert x.prompts == y.prompts and x.labels == y.labels


def test_different_seeds_differ():
    spec = SynthSpec(length_range=(24, 40))
    a = synth_corpus(spec, 10, seed=1)
    b = synth_corpus(spec, 10, seed=2)
    assert any(not torch.equal(x.frames, y.frames) for x, y in zip(a, b))


def test_count_validation():
    with pytest.raises(ValueError):
        synth_corpus(SynthSpec(), 0, seed=0)


def test_lengths_within_range():
    spec = SynthSpec(length_range=(30, 50))
    corpus = synth_corpus(spec, 40, seed=3)
    assert all(30 <= len(m) <= 50 for m in corpus)


def test_every_sequence_has_prompts_and_constant_labels():
    corpus = synth_corpus(SynthSpec(length_range=(24, 40)), 50, seed=5)
    for m in corpus:
        assert 1 <= len(m.prompts) <= 3
        assert m.labels is not None and len(m.labels) == len(m)
        assert len(set(m.labels)) == 1


def test_walk_straight_displaces_root():
    corpus = synth_corpus(SynthSpec(length_range=(24, 48)), 300, seed=9)
    walks = [m for m in corpus if m.labels[0].startswith("walk ")]
    assert walks, "corpus should contain walk sequences"
    for m in walks:
        pos = to_joint_positions(m).positions
        assert float(pos[-1, 0, [0, 2]].norm()) > 0.1


def test_archetypes_kinematically_distinct():
    spec = SynthSpec()
    per_archetype = {}
    for c in spec.cells:
        per_archetype.setdefault(c.archetype, c)
    trajs = {k: canonical_trajectory(c, 48, spec.rep.fps) for k, c in per_archetype.items()}
    names = list(trajs)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            assert mean_joint_distance(trajs[a], trajs[b]) > spec.distinct_margin


def test_needs_at_least_four_archetypes():
    cells = tuple(c for c in default_cells() if c.archetype in ("walk_straight", "squat"))
    with pytest.raises(ValueError, match="4"):
        SynthSpec(cells=cells)


def test_cell_inventory():
    names = {c.name for c in default_cells()}
    assert len(names) == 12
    archetypes = {c.archetype for c in default_cells()}
    assert archetypes == {"walk_straight", "walk_circle", "raise_arm", "squat", "wave"}
