"""Binary tensor container shared by dataset files and checkpoints.

Layout (all little-endian):

    magic   4 bytes  "QBNT"
    version u16      currently 1
    records until end of file, each:
        name_len u32, name utf-8 bytes
        rank     u8
        dims     u64 x rank
        payload  float32 x prod(dims)

Records are written sorted by name so identical content serializes to
identical bytes.  Non-float payloads (integer ids, utf-8 metadata) are
stored as exact float32 values; see ``bytes_to_record`` for the metadata
encoding.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

from .errors import FormatError

MAGIC = b"QBNT"
VERSION = 1
_MAX_NAME = 1 << 16
_MAX_RANK = 8
# integers with magnitude beyond 2**24 do not round-trip through float32
_EXACT_INT = 1 << 24


def write_container(path, records: Dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path``; arrays are cast to float32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        for name in sorted(records):
            arr = np.asarray(records[name])
            if arr.dtype.kind in "iu" and np.abs(arr).max(initial=0) >= _EXACT_INT:
                raise FormatError(
                    f"record '{name}' holds integers too large for exact float32 storage"
                )
            # asarray keeps 0-d scalars 0-d; tobytes() serializes C-order
            payload = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", payload.ndim))
            for dim in payload.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(payload.tobytes())


def _need(buf: bytes, offset: int, count: int, what: str) -> int:
    if offset + count > len(buf):
        raise FormatError(
            f"truncated container: needed {count} bytes for {what} at offset {offset}, "
            f"file ends at {len(buf)}"
        )
    return offset + count


def read_container(path) -> Dict[str, np.ndarray]:
    """Read all records; raises FormatError naming the byte offset on damage."""
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = 0
    end = _need(buf, offset, 4, "magic")
    if buf[offset:end] != MAGIC:
        raise FormatError(f"bad magic {buf[offset:end]!r} at offset 0, expected {MAGIC!r}")
    offset = end
    end = _need(buf, offset, 2, "version")
    (version,) = struct.unpack("<H", buf[offset:end])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} at offset {offset}")
    offset = end

    records: Dict[str, np.ndarray] = {}
    while offset < len(buf):
        end = _need(buf, offset, 4, "name length")
        (name_len,) = struct.unpack("<I", buf[offset:end])
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"implausible name length {name_len} at offset {offset}")
        offset = end
        end = _need(buf, offset, name_len, "record name")
        try:
            name = buf[offset:end].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record name at offset {offset} is not utf-8: {exc}") from None
        offset = end
        end = _need(buf, offset, 1, "rank")
        rank = buf[offset]
        if rank > _MAX_RANK:
            raise FormatError(f"implausible rank {rank} at offset {offset}")
        offset = end
        dims = []
        for _ in range(rank):
            end = _need(buf, offset, 8, "dimension")
            (dim,) = struct.unpack("<Q", buf[offset:end])
            dims.append(dim)
            offset = end
        count = int(np.prod(dims, dtype=np.uint64)) if dims else 1
        nbytes = 4 * count
        end = _need(buf, offset, nbytes, f"payload of '{name}'")
        arr = np.frombuffer(buf[offset:end], dtype="<f4").reshape(dims)
        records[name] = np.array(arr)
        offset = end
    return records


def bytes_to_record(data: bytes) -> np.ndarray:
    """Encode raw bytes (utf-8 metadata) as an exact float32 vector."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def record_to_bytes(arr: np.ndarray) -> bytes:
    """Inverse of bytes_to_record."""
    return np.asarray(arr, dtype=np.float32).astype(np.uint8).tobytes()
