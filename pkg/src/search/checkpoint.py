"""Versioned binary checkpoint: config, genotype-so-far and a named array table.

Layout (all integers little-endian):

    b"SSWP"                 magic
    u32                     format version
    u64 + bytes             config, canonical JSON (UTF-8)
    u64 + bytes             genotype JSON (UTF-8)
    u64 + bytes             array table:
                              u32 count, then per entry sorted by name:
                              u32 name length, UTF-8 name, u8 dtype tag,
                              u32 rank, rank x u64 dims, raw payload
    u32                     CRC-32 of every preceding byte

Array names are prefixed by owner: `net/` network weights and running
statistics (alphas included), `head/` the projection or classifier head,
`optim/w/` and `optim/alpha/` optimizer state, `state/` loop counters and
the generator state.
"""

import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.common.errors import CheckpointError, ContractError
from src.nas.genotype import Genotype

logger = logging.getLogger(__name__)

MAGIC = b"SSWP"
FORMAT_VERSION = 1

DTYPE_TAGS: dict[np.dtype, int] = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u8"): 3,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    config_text: str
    genotype: Genotype
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under `prefix/`, with the prefix removed."""
        return {k[len(prefix) + 1 :]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def _encode_table(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        dtype = array.dtype.newbyteorder("<")
        if dtype not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {array.dtype} for array {name!r}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", DTYPE_TAGS[dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    body = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for section in (
        checkpoint.config_text.encode("utf-8"),
        checkpoint.genotype.to_text().encode("utf-8"),
        _encode_table(checkpoint.arrays),
    ):
        body.append(struct.pack("<Q", len(section)))
        body.append(section)
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write atomically: temporary file in the target directory, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(checkpoint)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("Saved checkpoint %s (%d arrays, %d bytes)", path, len(checkpoint.arrays), len(data))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: {what} runs past the end of the file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_table(data: bytes) -> dict[str, np.ndarray]:
    reader = _Reader(data)
    (count,) = reader.unpack("<I", "array count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "array name length")
        name = reader.take(name_len, "array name").decode("utf-8")
        tag, rank = reader.unpack("<BI", f"header of {name}")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for array {name!r}")
        shape = reader.unpack(f"<{rank}Q", f"dims of {name}")
        dtype = TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(nbytes, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(data):
        raise CheckpointError("array table has trailing bytes")
    return arrays


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointError: bad magic, unsupported version, checksum mismatch,
            truncation or malformed sections.
    """
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file: bad magic bytes")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint: header incomplete")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    payload, trailer = data[:-4], data[-4:]
    reader = _Reader(payload)
    reader.pos = 8
    sections = []
    for what in ("config", "genotype", "array table"):
        (length,) = reader.unpack("<Q", f"{what} length")
        sections.append(reader.take(length, f"{what} section"))
    if reader.pos != len(payload):
        extra = len(payload) - reader.pos
        raise CheckpointError(f"checkpoint has {extra} unexpected bytes before the checksum")
    (stored,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload) != stored:
        raise CheckpointError("checkpoint checksum mismatch: file is corrupted")
    try:
        genotype = Genotype.from_text(sections[1].decode("utf-8"))
    except (ValueError, KeyError, TypeError, ContractError) as exc:
        raise CheckpointError(f"malformed genotype section: {exc}") from exc
    return Checkpoint(sections[0].decode("utf-8"), genotype, _decode_table(sections[2]))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    checkpoint = decode_checkpoint(data)
    logger.info("Loaded checkpoint %s (%d arrays)", path, len(checkpoint.arrays))
    return checkpoint
