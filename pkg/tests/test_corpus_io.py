import torch
import pytest

from molingo_lab.container import ChecksumError, MagicError, TruncatedFileError, VersionMismatchError
from molingo_lab import corpus_io
from molingo_lab.corpus_io import read_corpus, write_corpus
from molingo_lab.motion import MotionSequence, TOY_SPEC


def test_round_trip_bit_exact(toy_corpus, tmp_path):
    path = tmp_path / "c.mcorp"
    write_corpus(path, toy_corpus)
    back = read_corpus(path)
    assert len(back) == len(toy_corpus)
    for a, b in zip(toy_corpus, back):
        assert torch.equal(a.frames, b.frames)
        assert a.labels == b.labels
        assert a.prompts == b.prompts
        assert a.spec == b.spec


def test_empty_corpus(tmp_path):
    path = tmp_path / "empty.mcorp"
    write_corpus(path, [])
    assert read_corpus(path) == []


def test_unlabeled_sequences_survive(tmp_path):
    m = MotionSequence(torch.randn(6, 16), TOY_SPEC, labels=None, prompts=["hi there"])
    path = tmp_path / "u.mcorp"
    write_corpus(path, [m])
    back = read_corpus(path)[0]
    assert back.labels is None and back.prompts == ["hi there"]


def test_corrupted_payload_raises_checksum_error(toy_corpus, tmp_path):
    path = tmp_path / "c.mcorp"
    write_corpus(path, toy_corpus[:3])
    data = bytearray(path.read_bytes())
    data[-40] ^= 0xFF  # flip a byte inside the last frame payload
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        read_corpus(path)


def test_truncated_file(toy_corpus, tmp_path):
    path = tmp_path / "c.mcorp"
    write_corpus(path, toy_corpus[:3])
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 30])
    with pytest.raises(TruncatedFileError):
        read_corpus(path)


def test_version_mismatch(toy_corpus, tmp_path, monkeypatch):
    path = tmp_path / "c.mcorp"
    monkeypatch.setattr(corpus_io, "VERSION", 99)
    write_corpus(path, toy_corpus[:1])
    monkeypatch.undo()
    with pytest.raises(VersionMismatchError):
        read_corpus(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "c.mcorp"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 42)
    with pytest.raises(MagicError):
        read_corpus(path)


def test_mixed_specs_rejected(tmp_path):
    from molingo_lab.motion import GUO67_SPEC

    a = MotionSequence(torch.zeros(4, 16), TOY_SPEC)
    b = MotionSequence(torch.zeros(4, 67), GUO67_SPEC)
    with pytest.raises(ValueError, match="mixes"):
        write_corpus(tmp_path / "x.mcorp", [a, b])
