"""
Versioned binary container for named float32 tensors.

Layout (all integers little-endian):

    magic      4 bytes  b'FGRD'
    version    u16
    count      u32
    per tensor:
        name   u16 length + UTF-8 bytes
        rank   u8 (at most 32)
        dims   u32 * rank
        data   float32 * prod(dims)

The same container holds feature archives, embedding archives, pixel
archives and checkpoints.
"""

import os
import logging
import struct
from pathlib import Path

import numpy as np

from .exceptions import (
    ArchiveCorruptionError, ArchiveError, ArchiveFormatError, UnsupportedVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b'FGRD'
FORMAT_VERSION = 1
MAX_NAME_BYTES = 0xFFFF
MAX_RANK = 32

_HEADER = struct.Struct('<4sHI')
_U16 = struct.Struct('<H')
_U8 = struct.Struct('<B')
_ITEM = np.dtype('<f4')


def encode_archive(tensors):
    """Serialize ``name -> array`` to bytes (insertion order is kept)."""
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        if not np.all(np.isfinite(array)):
            raise ArchiveError(f"tensor {name!r} has non-finite values")
        encoded = name.encode('utf-8')
        if len(encoded) > MAX_NAME_BYTES:
            raise ArchiveError(f"tensor name too long: {name[:40]}...")
        if array.ndim > MAX_RANK:
            raise ArchiveError(f"tensor {name!r} has rank {array.ndim}")
        chunks.append(_U16.pack(len(encoded)) + encoded)
        chunks.append(_U8.pack(array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_ITEM).tobytes())
    return b''.join(chunks)


class _Reader:
    """Cursor over a byte buffer that refuses to read past its end."""

    def __init__(self, data):
        self.data = data
        self.offset = 0

    @property
    def remaining(self):
        return len(self.data) - self.offset

    def take(self, size, what):
        if size > self.remaining:
            raise ArchiveCorruptionError(
                f"truncated archive: {what} needs {size} bytes at offset {self.offset}, "
                f"{self.remaining} left")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return fmt.unpack(self.take(fmt.size, what))


def decode_archive(data):
    """
    Parse archive bytes into an ordered ``name -> float32 array`` dict.

    Raises:
        ArchiveFormatError: bad magic, bad version 0 or undecodable name
        UnsupportedVersionError: version newer than FORMAT_VERSION
        ArchiveCorruptionError: truncation, trailing bytes, duplicate names
    """
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise ArchiveFormatError("not an fgreid archive (bad magic)")
    reader = _Reader(data)
    _, version, count = reader.unpack(_HEADER, 'header')
    if version == 0:
        raise ArchiveFormatError("archive version 0 is invalid")
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"archive version {version} is newer than supported version {FORMAT_VERSION}")
    # smallest possible entry: empty name length (2) + rank (1)
    if count * 3 > reader.remaining:
        raise ArchiveCorruptionError(f"archive declares {count} tensors but holds {reader.remaining} bytes")

    tensors = {}
    for index in range(count):
        (name_length,) = reader.unpack(_U16, f'name length of tensor {index}')
        raw_name = reader.take(name_length, f'name of tensor {index}')
        try:
            name = raw_name.decode('utf-8')
        except UnicodeDecodeError:
            raise ArchiveFormatError(f"tensor {index} has a name that is not UTF-8") from None
        if name in tensors:
            raise ArchiveCorruptionError(f"duplicate tensor name {name!r}")
        (rank,) = reader.unpack(_U8, f'rank of {name!r}')
        if rank > MAX_RANK:
            raise ArchiveCorruptionError(f"tensor {name!r} declares rank {rank} (max {MAX_RANK})")
        dims = struct.unpack(f'<{rank}I', reader.take(4 * rank, f'dims of {name!r}'))
        size = 1
        extent = 1
        for dim in dims:
            size *= dim
            extent *= max(dim, 1)
        # numpy rejects shapes whose nonzero extent in bytes overflows intp
        if extent * _ITEM.itemsize > np.iinfo(np.intp).max:
            raise ArchiveCorruptionError(f"tensor {name!r} declares implausible shape {dims}")
        payload = reader.take(size * _ITEM.itemsize, f'payload of {name!r}')
        try:
            tensors[name] = np.frombuffer(payload, dtype=_ITEM).astype(np.float32).reshape(dims)
        except ValueError as exc:
            raise ArchiveCorruptionError(f"tensor {name!r} has unusable shape {dims}: {exc}") from None

    if reader.remaining:
        raise ArchiveCorruptionError(f"{reader.remaining} trailing bytes after the last tensor")
    return tensors


def write_archive(tensors, path):
    """
    Write tensors to ``path`` atomically (temp file then rename).

    Raises:
        ArchiveError: non-finite tensor, oversize name, or I/O failure
    """
    path = Path(path)
    data = encode_archive(tensors)
    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        raise ArchiveError(f"cannot write archive {path}: {e}") from e
    logger.debug("wrote %d tensors to %s", len(tensors), path)
    return path


def read_archive(path):
    """Read every tensor of the archive at ``path``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read archive {path}: {e}") from e
    return decode_archive(data)


# ==================== Integer ids ====================

ID_SPLIT = 1 << 16
# the high half must stay below 2**24 to be exact in float32
MAX_ID = (1 << 40) - 1


def encode_ids(values):
    """
    Pack non-negative integer ids into an exact (N, 2) float32 table.

    Column 0 holds ``id // 2**16`` and column 1 ``id % 2**16``; both are
    exact in float32 for ids up to MAX_ID.

    Raises:
        ArchiveError: an id is not an integer in [0, MAX_ID]
    """
    ids = []
    for value in values:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value <= MAX_ID:
            raise ArchiveError(f"id {value!r} is not an integer in [0, {MAX_ID}]")
        ids.append(int(value))
    table = np.array([divmod(i, ID_SPLIT) for i in ids], dtype=np.float32)
    return table.reshape(len(ids), 2)


def decode_ids(table):
    """
    Inverse of encode_ids.

    Raises:
        ArchiveCorruptionError: the table is not (N, 2) or holds invalid halves
    """
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[1] != 2:
        raise ArchiveCorruptionError(f"id table must be (N, 2), got {table.shape}")
    high, low = table[:, 0], table[:, 1]
    if np.any(table != np.floor(table)) or np.any(table < 0) or np.any(low >= ID_SPLIT) \
            or np.any(high > MAX_ID // ID_SPLIT):
        raise ArchiveCorruptionError("id table holds values that are not valid 16-bit halves")
    return [int(h) * ID_SPLIT + int(l) for h, l in zip(high, low)]
