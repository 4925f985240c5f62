"""Little-endian binary container used for checkpoints, NMF bases, and
feature caches.

Layout after the ASCII magic string:

    u32  format version
    u32  field count
    per field:   u16 name length, name bytes (utf-8), u8 type tag,
                 payload (tag 0: i64, tag 1: f64, tag 2: u32 length + utf-8)
    u32  tensor count
    per tensor:  u16 name length, name bytes, u8 rank, rank x u64 dims,
                 float64 values in C order

Fields carry scalar metadata (spec dimensions, training counters); tensors
carry parameter and data arrays.  Everything is written and read with
explicit struct formats so files are portable across platforms.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import FormatError

FORMAT_VERSION = 1

_TAG_INT = 0
_TAG_FLOAT = 1
_TAG_STR = 2


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated container while reading {what}")
    return data


def _write_name(fh, name):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {name[:40]}...")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_name(fh):
    (n,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
    return _read_exact(fh, n, "name").decode("utf-8")


def save_container(path, magic: str, fields: dict, tensors: dict) -> None:
    """Write scalar fields and float64 tensors under the given magic string.

    Field values may be int, float, or str; tensor values are converted to
    float64 arrays.  Entries are written in sorted name order so identical
    content produces identical bytes.
    """
    magic_bytes = magic.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(magic_bytes)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(fields)))
        for name in sorted(fields):
            value = fields[name]
            _write_name(fh, name)
            if isinstance(value, bool):
                raise FormatError(f"field {name}: store flags as 0/1 ints")
            if isinstance(value, (int, np.integer)):
                fh.write(struct.pack("<b", _TAG_INT))
                fh.write(struct.pack("<q", int(value)))
            elif isinstance(value, (float, np.floating)):
                fh.write(struct.pack("<b", _TAG_FLOAT))
                fh.write(struct.pack("<d", float(value)))
            elif isinstance(value, str):
                raw = value.encode("utf-8")
                fh.write(struct.pack("<b", _TAG_STR))
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            else:
                raise FormatError(f"field {name}: unsupported type {type(value)}")
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            _write_name(fh, name)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_container(path, magic: str) -> tuple[dict, dict]:
    """Read back (fields, tensors); raises FormatError on any mismatch."""
    magic_bytes = magic.encode("ascii")
    with open(path, "rb") as fh:
        found = fh.read(len(magic_bytes))
        if found != magic_bytes:
            raise FormatError(
                f"{path}: bad magic {found!r}, expected {magic_bytes!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported format version {version}, "
                f"expected {FORMAT_VERSION}"
            )
        (num_fields,) = struct.unpack("<I", _read_exact(fh, 4, "field count"))
        fields = {}
        for _ in range(num_fields):
            name = _read_name(fh)
            (tag,) = struct.unpack("<b", _read_exact(fh, 1, "field tag"))
            if tag == _TAG_INT:
                (fields[name],) = struct.unpack("<q", _read_exact(fh, 8, name))
            elif tag == _TAG_FLOAT:
                (fields[name],) = struct.unpack("<d", _read_exact(fh, 8, name))
            elif tag == _TAG_STR:
                (n,) = struct.unpack("<I", _read_exact(fh, 4, name))
                fields[name] = _read_exact(fh, n, name).decode("utf-8")
            else:
                raise FormatError(f"{path}: unknown field tag {tag} for {name}")
        (num_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(num_tensors):
            name = _read_name(fh)
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(
                f"<{rank}Q", _read_exact(fh, 8 * rank, f"{name} dims")
            )
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"{name} values")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after container payload")
    return fields, tensors
