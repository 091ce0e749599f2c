"""Binary on-disk formats: DPFP fingerprints and DPIM raw image dumps.

DPFP: ``b"DPFP"``, version u8, kind u8, then H, W, C as little-endian u32,
followed by H*W*C little-endian float32 values in row-major, channel-last order.

DPIM: 16-byte header ``b"DPIM"`` + H, W, C as little-endian u32, then float32
pixels in the same order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .fingerprint import Fingerprint, FingerprintKind

DPFP_MAGIC = b"DPFP"
DPFP_VERSION = 1
DPIM_MAGIC = b"DPIM"
_DPFP_HEADER = struct.Struct("<4sBB3I")
_DPIM_HEADER = struct.Struct("<4s3I")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    """Write ``data`` to ``path`` through a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _payload(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_fingerprint(fp: Fingerprint) -> bytes:
    h, w, c = fp.pattern.shape
    return _DPFP_HEADER.pack(DPFP_MAGIC, DPFP_VERSION, int(fp.kind), h, w, c) + _payload(fp.pattern)


def decode_fingerprint(data: bytes) -> Fingerprint:
    if len(data) < _DPFP_HEADER.size:
        raise FormatError("truncated DPFP header")
    magic, version, kind, h, w, c = _DPFP_HEADER.unpack_from(data)
    if magic != DPFP_MAGIC:
        raise FormatError(f"bad DPFP magic {magic!r}")
    if version != DPFP_VERSION:
        raise FormatError(f"unsupported DPFP version {version}")
    try:
        kind = FingerprintKind(kind)
    except ValueError:
        raise FormatError(f"unknown fingerprint kind {kind}") from None
    expected = _DPFP_HEADER.size + 4 * h * w * c
    if len(data) != expected:
        raise FormatError(f"DPFP payload size {len(data)} != expected {expected}")
    pattern = np.frombuffer(data, dtype="<f4", offset=_DPFP_HEADER.size).reshape(h, w, c)
    return Fingerprint(pattern.astype(np.float64), kind)


def write_fingerprint(path, fp: Fingerprint):
    atomic_write_bytes(path, encode_fingerprint(fp))


def read_fingerprint(path) -> Fingerprint:
    return decode_fingerprint(Path(path).read_bytes())


def encode_dpim(image: np.ndarray) -> bytes:
    h, w, c = image.shape
    return _DPIM_HEADER.pack(DPIM_MAGIC, h, w, c) + _payload(image)


def decode_dpim(data: bytes) -> np.ndarray:
    if len(data) < _DPIM_HEADER.size:
        raise FormatError("truncated DPIM header")
    magic, h, w, c = _DPIM_HEADER.unpack_from(data)
    if magic != DPIM_MAGIC:
        raise FormatError(f"bad DPIM magic {magic!r}")
    expected = _DPIM_HEADER.size + 4 * h * w * c
    if len(data) != expected:
        raise FormatError(f"DPIM payload size {len(data)} != expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_DPIM_HEADER.size).reshape(h, w, c).copy()


def write_dpim(path, image: np.ndarray):
    atomic_write_bytes(path, encode_dpim(image))


def read_dpim(path) -> np.ndarray:
    return decode_dpim(Path(path).read_bytes())
