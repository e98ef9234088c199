"""Atomic file writes, content hashes and the 16-byte header shared by the binary formats."""
from __future__ import annotations

import hashlib
import os
import re
import struct
import tempfile
from pathlib import Path

from ausculta.errors import MalformedContainer

# magic, version, two u32 fields
HEADER = struct.Struct("<4sIII")
FORMAT_VERSION = 1

_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]")


def safe_name(record_id: str) -> str:
    """Filesystem-safe stem for a record id."""
    return _UNSAFE.sub("_", record_id)


def atomic_write_bytes(path: Path | str, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: Path | str, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def pack_header(magic: bytes, a: int, b: int) -> bytes:
    return HEADER.pack(magic, FORMAT_VERSION, a, b)


def unpack_header(buf: bytes, magic: bytes, source: str) -> tuple[int, int]:
    if len(buf) < HEADER.size:
        raise MalformedContainer(f"{source}: truncated header")
    got, version, a, b = HEADER.unpack_from(buf)
    if got != magic:
        raise MalformedContainer(f"{source}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedContainer(f"{source}: unsupported version {version}")
    return a, b
