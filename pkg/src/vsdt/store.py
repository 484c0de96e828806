"""Self-describing binary container for tensors plus JSON metrics files.

Byte layout (all integers little-endian, bytes 0-indexed):

====================  ========================================================
offset / field        content
====================  ========================================================
0   magic             ``b"VSDT"``
4   version           u32, currently 1
8   meta_len          u32, byte length of the metadata block
12  metadata          UTF-8 JSON object of ``meta_len`` bytes
..  meta_crc          u32, CRC-32 of the metadata bytes
..  entries           repeated until end of file:
                      name_len (u16) | name (UTF-8) | dtype code (u8) |
                      rank (u8) | dims (rank x u32) | raw C-order payload
====================  ========================================================

Dtype codes: 0 = float32, 1 = float16, 2 = int8.  Payload length must
equal ``prod(dims) * itemsize``.

Integrity: the writer records a CRC-32 per entry payload under the
reserved metadata key ``"__entry_crcs__"`` and guards the metadata block
with ``meta_crc``, so any byte flip anywhere in the file surfaces as a
``ContainerError`` instead of silently wrong numbers.  The reader strips
the reserved key before handing metadata back.

Files are written atomically (temp file + rename) and are immutable
afterwards; everything is fixed-endianness so containers move freely
across machines.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"VSDT"
VERSION = 1

_CRC_KEY = "__entry_crcs__"

_DTYPE_TO_CODE = {
    np.dtype("float32"): 0,
    np.dtype("float16"): 1,
    np.dtype("int8"): 2,
}
_CODE_TO_DTYPE = {code: dt for dt, code in _DTYPE_TO_CODE.items()}

# Little-endian on-disk forms of the supported dtypes.
_CODE_TO_LE = {0: np.dtype("<f4"), 1: np.dtype("<f2"), 2: np.dtype("i1")}


class ContainerError(Exception):
    """Malformed, corrupted, or unsupported container file."""


def _fail(path: str | os.PathLike, offset: int, why: str) -> ContainerError:
    return ContainerError(f"{os.fspath(path)}: byte {offset}: {why}")


def write_container(
    path: str | os.PathLike,
    metadata: Mapping,
    entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
) -> None:
    """Write tensors and a metadata object to ``path`` atomically.

    Entry order is preserved.  Arrays must be float32, float16 or int8;
    cast anything else explicitly before writing.
    """
    if isinstance(entries, Mapping):
        items = list(entries.items())
    else:
        items = list(entries)

    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ContainerError(f"duplicate entry names: {dupes}")

    blobs: list[bytes] = []
    crcs: dict[str, int] = {}
    for name, arr in items:
        if not name:
            raise ContainerError("entry names must be non-empty")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name!r}")
        arr = np.asarray(arr)
        code = _DTYPE_TO_CODE.get(arr.dtype)
        if code is None:
            raise ContainerError(
                f"entry {name!r} has unsupported dtype {arr.dtype}; "
                f"cast to float32, float16 or int8 first"
            )
        if arr.ndim > 0xFF:
            raise ContainerError(f"entry {name!r} has too many dimensions")
        payload = np.ascontiguousarray(arr, dtype=_CODE_TO_LE[code]).tobytes()
        header = (
            struct.pack("<H", len(name_b))
            + name_b
            + struct.pack("<BB", code, arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
        )
        blobs.append(header + payload)
        crcs[name] = zlib.crc32(payload)

    meta = dict(metadata)
    if _CRC_KEY in meta:
        raise ContainerError(f"metadata key {_CRC_KEY!r} is reserved")
    meta[_CRC_KEY] = crcs
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", zlib.crc32(meta_bytes))
    for blob in blobs:
        out += blob

    directory = os.path.dirname(os.path.abspath(os.fspath(path))) or "."
    fd, tmp = tempfile.mkstemp(prefix=".vsdt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(out)
        os.replace(tmp, os.fspath(path))
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


class _Cursor:
    __slots__ = ("buf", "pos", "path")

    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise _fail(
                self.path,
                self.pos,
                f"truncated while reading {what} "
                f"({n} bytes needed, {len(self.buf) - self.pos} left)",
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.read(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def u8(self, what: str) -> int:
        return self.read(1, what)[0]


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns ``(metadata, entries)`` with native dtypes."""
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf, path)

    magic = cur.read(4, "magic")
    if magic != MAGIC:
        raise _fail(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    version = cur.u32("version")
    if version != VERSION:
        raise _fail(path, 4, f"unsupported container version {version}")
    meta_len = cur.u32("metadata length")
    meta_start = cur.pos
    meta_bytes = cur.read(meta_len, "metadata block")
    meta_crc = cur.u32("metadata checksum")
    if zlib.crc32(meta_bytes) != meta_crc:
        raise _fail(path, meta_start, "metadata checksum mismatch (corrupted file)")
    try:
        metadata = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _fail(path, meta_start, f"metadata is not valid JSON: {exc}") from exc
    if not isinstance(metadata, dict):
        raise _fail(path, meta_start, "metadata must be a JSON object")
    crcs = metadata.pop(_CRC_KEY, None)
    if crcs is None or not isinstance(crcs, dict):
        raise _fail(path, meta_start, "missing entry checksum table in metadata")

    entries: dict[str, np.ndarray] = {}
    while cur.pos < len(buf):
        entry_start = cur.pos
        name_len = cur.u16("entry name length")
        name_b = cur.read(name_len, "entry name")
        try:
            name = name_b.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise _fail(path, entry_start, f"entry name is not UTF-8: {exc}") from exc
        code = cur.u8(f"dtype of entry {name!r}")
        dtype = _CODE_TO_DTYPE.get(code)
        if dtype is None:
            raise _fail(path, entry_start, f"entry {name!r}: unknown dtype code {code}")
        rank = cur.u8(f"rank of entry {name!r}")
        dims = tuple(
            cur.u32(f"dimension {i} of entry {name!r}") for i in range(rank)
        )
        count = 1
        for d in dims:
            count *= d
        payload = cur.read(count * dtype.itemsize, f"payload of entry {name!r}")
        if name in entries:
            raise _fail(path, entry_start, f"duplicate entry name {name!r}")
        expected = crcs.get(name)
        if expected is None:
            raise _fail(path, entry_start, f"no checksum recorded for entry {name!r}")
        if zlib.crc32(payload) != expected:
            raise _fail(
                path, entry_start, f"payload checksum mismatch for entry {name!r}"
            )
        arr = np.frombuffer(payload, dtype=_CODE_TO_LE[code]).reshape(dims)
        entries[name] = arr.astype(dtype, copy=True)

    extra = set(crcs) - set(entries)
    if extra:
        raise _fail(
            path, len(buf), f"entries listed in checksum table but absent: {sorted(extra)}"
        )
    return metadata, entries


# ----------------------------------------------------------------------
# metrics files
# ----------------------------------------------------------------------


def write_metrics(path: str | os.PathLike, metrics: Mapping) -> None:
    """Pretty-printed JSON metrics, written atomically."""
    directory = os.path.dirname(os.path.abspath(os.fspath(path))) or "."
    fd, tmp = tempfile.mkstemp(prefix=".vsdt-", suffix=".json", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.fspath(path))
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def read_metrics(path: str | os.PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
