"""Binary file formats.

Embeddings and feature datasets use a flat little-endian layout: header
(magic ``DYNB``, u32 version, u64 count, u32 dim) followed by count*dim
32-bit floats, row-major.

Index snapshots (trees, sketches) share one section-tagged container:
magic ``DYNC``, u16 version, u16 section count, then per section a 4-byte
tag, u64 payload length, payload bytes. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

EMB_MAGIC = b"DYNB"
CONTAINER_MAGIC = b"DYNC"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def write_embeddings(path, arr) -> None:
    """Write a (count, dim) float array as a DYNB file (stored as float32)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise FormatError(f"expected 2-d array, got shape {arr.shape}")
    count, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IQI", FORMAT_VERSION, count, dim))
        fh.write(arr.tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read a DYNB file; returns a (count, dim) float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
        version, count, dim = struct.unpack("<IQI", fh.read(16))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        data = fh.read(count * dim * 4)
    if len(data) != count * dim * 4:
        raise FormatError("truncated embedding payload")
    return np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()


def write_container(path, sections: dict[bytes, bytes]) -> None:
    """Write tagged binary sections; tags are 4-byte identifiers."""
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<HH", FORMAT_VERSION, len(sections)))
        for tag, payload in sections.items():
            if len(tag) != 4:
                raise FormatError(f"tag must be 4 bytes, got {tag!r}")
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_container(path) -> dict[bytes, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CONTAINER_MAGIC!r}")
        version, nsec = struct.unpack("<HH", fh.read(4))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        sections = {}
        for _ in range(nsec):
            tag = fh.read(4)
            (length,) = struct.unpack("<Q", fh.read(8))
            payload = fh.read(length)
            if len(payload) != length:
                raise FormatError(f"truncated section {tag!r}")
            sections[tag] = payload
    return sections
