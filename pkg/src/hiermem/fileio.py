"""Deterministic on-disk container shared by tree / bank / checkpoint files.

Layout (all integers little-endian):

    magic     8 bytes, ascii, space-padded
    version   u32
    meta_len  u64, followed by canonical JSON metadata (sorted keys)
    n_arrays  u32
    per array: name_len u16 + utf8 name, dtype_len u8 + dtype str,
               ndim u8 + ndim * u64 dims, raw C-order bytes

Identical inputs produce identical bytes (no timestamps, no compression),
so sha256 digests of artifacts are stable across runs — that property is
what the resume and determinism checks lean on.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ArtifactError(RuntimeError):
    """Bad magic, version, or truncated/corrupt artifact file."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def digest_of(obj) -> str:
    """sha256 hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_artifact(path, magic: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) > 8:
        raise ValueError(f"magic {magic!r} longer than 8 bytes")
    mb = canonical_json(meta)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as f:
        f.write(magic.encode("ascii").ljust(8))
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(mb)))
        f.write(mb)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            dt = arr.dtype.str.encode("ascii")  # e.g. '<f4'
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", len(dt)))
            f.write(dt)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_artifact(path, expect_magic: str | None = None):
    """Returns (magic, meta, arrays) with arrays in file order."""
    with open(path, "rb") as f:
        raw_magic = f.read(8)
        if len(raw_magic) < 8:
            raise ArtifactError(f"{path}: truncated header")
        magic = raw_magic.decode("ascii", errors="replace").rstrip()
        if expect_magic is not None and magic != expect_magic:
            raise ArtifactError(f"{path}: magic {magic!r}, expected {expect_magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ArtifactError(f"{path}: unsupported format version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(mlen).decode("utf-8"))
        (n,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (dlen,) = struct.unpack("<B", f.read(1))
            dtype = np.dtype(f.read(dlen).decode("ascii"))
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ArtifactError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        return magic, meta, arrays
