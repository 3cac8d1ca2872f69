"""Binary record containers shared by corpus, checkpoint and embedding files.

Every file starts with a 16-byte header (8-byte magic, uint32 version,
4 reserved bytes). The body is a sequence of length-prefixed blocks, each
followed by a CRC-32 of its payload, so truncation and corruption are
detected per record rather than surfacing as garbage data.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import BinaryIO

import numpy as np

HEADER_SIZE = 16
_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")
_VER = struct.Struct("<I")


class ContainerError(Exception):
    """Base class for container file failures."""


class MagicError(ContainerError):
    """File does not carry the expected magic bytes."""


class VersionMismatchError(ContainerError):
    """File version differs from what this build reads."""


class TruncatedFileError(ContainerError):
    """File ended in the middle of a record."""


class ChecksumError(ContainerError):
    """Record payload does not match its stored CRC-32."""


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    assert len(magic) == 8, "magic must be exactly 8 bytes"
    f.write(magic)
    f.write(_VER.pack(version))
    f.write(b"\x00" * 4)


def read_header(f: BinaryIO, magic: bytes, version: int) -> None:
    head = f.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise TruncatedFileError("file shorter than container header")
    if head[:8] != magic:
        raise MagicError(f"expected magic {magic!r}, found {head[:8]!r}")
    (found,) = _VER.unpack(head[8:12])
    if found != version:
        raise VersionMismatchError(f"file version {found}, reader supports {version}")


def write_block(f: BinaryIO, payload: bytes) -> None:
    f.write(_LEN.pack(len(payload)))
    f.write(payload)
    f.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))


def read_block(f: BinaryIO) -> bytes:
    raw_len = f.read(_LEN.size)
    if len(raw_len) < _LEN.size:
        raise TruncatedFileError("record length prefix missing")
    (n,) = _LEN.unpack(raw_len)
    payload = f.read(n)
    if len(payload) < n:
        raise TruncatedFileError(f"record payload truncated ({len(payload)}/{n} bytes)")
    raw_crc = f.read(_CRC.size)
    if len(raw_crc) < _CRC.size:
        raise TruncatedFileError("record checksum missing")
    (stored,) = _CRC.unpack(raw_crc)
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"record CRC mismatch (stored {stored:#010x}, actual {actual:#010x})")
    return payload


def write_json_block(f: BinaryIO, obj) -> None:
    write_block(f, json.dumps(obj, sort_keys=True).encode("utf-8"))


def read_json_block(f: BinaryIO):
    return json.loads(read_block(f).decode("utf-8"))


def write_array_block(f: BinaryIO, arr: np.ndarray) -> None:
    """Write a float32 array as little-endian row-major bytes."""
    data = np.ascontiguousarray(arr, dtype="<f4")
    write_block(f, data.tobytes())


def read_array_block(f: BinaryIO, shape) -> np.ndarray:
    payload = read_block(f)
    expected = int(np.prod(shape)) * 4 if len(shape) else 4
    if len(payload) != expected:
        raise ContainerError(f"array payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
