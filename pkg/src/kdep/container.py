"""Binary tensor container shared by every persisted artifact.

Layout (all integers little-endian)::

    magic      8 bytes   b"KDEPTNSR"
    version    u32       1
    count      u32       number of sections
    per section:
        name_len  u32
        name      name_len bytes, UTF-8
        dtype     u32       1 = float64, 2 = int64
        ndim      u32
        dims      ndim x u64
        payload   prod(dims) x 8 bytes, little-endian

A 0-d section (ndim 0) holds a single scalar.
"""

import hashlib
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"KDEPTNSR"
VERSION = 1
DTYPE_F64 = 1
DTYPE_I64 = 2

_CODES = {DTYPE_F64: np.dtype("<f8"), DTYPE_I64: np.dtype("<i8")}


def _normalise(value):
    arr = np.asarray(value)
    if arr.dtype.kind in "biu":
        return DTYPE_I64, np.asarray(arr, dtype="<i8", order="C")
    if arr.dtype.kind == "f":
        return DTYPE_F64, np.asarray(arr, dtype="<f8", order="C")
    raise TypeError(f"unsupported section dtype {arr.dtype}")


def encode(sections):
    """Serialise an ordered mapping of name -> array to container bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        code, arr = _normalise(value)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<II", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf):
    """Parse container bytes into a dict of numpy arrays (insertion ordered)."""
    buf = bytes(buf)
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version_at = r.pos
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", version_at)
    count = r.u32("section count")
    sections = {}
    for _ in range(count):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("section name is not UTF-8", start + 4) from None
        if name in sections:
            raise FormatError(f"duplicate section {name!r}", start)
        code_at = r.pos
        code = r.u32("dtype")
        if code not in _CODES:
            raise FormatError(f"unknown dtype code {code}", code_at)
        ndim = r.u32("ndim")
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "dims"))
        size = 1
        for dim in dims:
            size *= dim
        payload = r.take(size * 8, f"payload of {name!r}")
        sections[name] = np.frombuffer(payload, dtype=_CODES[code]).reshape(dims).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return sections


def atomic_write_bytes(path, data):
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_container(path, sections):
    data = encode(sections)
    atomic_write_bytes(path, data)
    return content_hash(data)


def read_container(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode(data)


def content_hash(data):
    """Hex SHA-256 of container bytes (or of a section mapping, encoded first)."""
    if isinstance(data, dict):
        data = encode(data)
    return hashlib.sha256(data).hexdigest()


def seed_section(seed):
    """Store an unsigned 64-bit seed in an int64 section (two's complement)."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.array(seed - (1 << 64) if seed >= 1 << 63 else seed, dtype=np.int64)


def seed_from_section(value):
    return int(value) & 0xFFFFFFFFFFFFFFFF
