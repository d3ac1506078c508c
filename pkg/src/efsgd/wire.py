"""Byte format for blockwise 1-bit messages.

Layout (all integers little-endian)::

    u32 worker_id | u64 iteration | u32 num_blocks
    per block: f32 scale | ceil(d_b / 8) sign bytes

Sign bit 1 means +1, 0 means -1, most significant bit first; padding bits in
the last byte of a block are zero and ignored when decoding. Block sizes are
not transmitted; both ends share the :class:`BlockPartition`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .compressors import block_scales
from .core import BlockPartition, sign

HEADER = struct.Struct("<IQI")
HEADER_BITS = 8 * HEADER.size
_LEN = struct.Struct("<Q")


class MalformedMessageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompressedMessage:
    """Per-block float32 scales and one sign bit per coordinate (True = +1)."""

    worker_id: int
    t: int
    scales: np.ndarray
    signs: np.ndarray

    def __post_init__(self) -> None:
        scales = np.asarray(self.scales, dtype=np.float32)
        signs = np.asarray(self.signs, dtype=bool)
        if scales.ndim != 1 or signs.ndim != 1:
            raise ValueError("scales and signs must be flat arrays")
        if len(scales) == 0 or len(signs) == 0:
            raise ValueError("a message needs at least one block and one sign")
        if not np.all(np.isfinite(scales)) or np.any(scales < 0):
            raise ValueError("scales must be finite and non-negative")
        if not (0 <= self.worker_id < 2**32 and 0 <= self.t < 2**64):
            raise ValueError("worker_id must fit u32 and t must fit u64")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "signs", signs)

    @property
    def num_blocks(self) -> int:
        return len(self.scales)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedMessage):
            return NotImplemented
        return (self.worker_id == other.worker_id and self.t == other.t
                and np.array_equal(self.scales, other.scales)
                and np.array_equal(self.signs, other.signs))


def message_from_vector(p: np.ndarray, partition: BlockPartition, worker_id: int = 0,
                        t: int = 0) -> CompressedMessage:
    """Blockwise scaled-sign compression of ``p`` packaged as a message."""
    partition.check(p)
    return CompressedMessage(worker_id, t, block_scales(p, partition), sign(p) > 0)


def payload_bits(partition: BlockPartition) -> int:
    """Bits after the header: 32 per scale plus whole sign bytes per block."""
    return sum(32 + 8 * ((d_b + 7) // 8) for d_b in partition.sizes)


def message_bits(partition: BlockPartition) -> int:
    return HEADER_BITS + payload_bits(partition)


def encode(msg: CompressedMessage, partition: BlockPartition) -> bytes:
    if msg.num_blocks != partition.num_blocks or len(msg.signs) != partition.dim:
        raise ValueError(
            f"message has {msg.num_blocks} blocks / {len(msg.signs)} signs, "
            f"partition expects {partition.num_blocks} / {partition.dim}"
        )
    out = bytearray(HEADER.pack(msg.worker_id, msg.t, msg.num_blocks))
    for scale, sl in zip(msg.scales, partition.slices()):
        out += struct.pack("<f", float(scale))
        out += np.packbits(msg.signs[sl], bitorder="big").tobytes()
    return bytes(out)


def decode(buf: bytes, partition: BlockPartition) -> CompressedMessage:
    expected = message_bits(partition) // 8
    if len(buf) != expected:
        raise MalformedMessageError(f"expected {expected} bytes for this partition, got {len(buf)}")
    worker_id, t, num_blocks = HEADER.unpack_from(buf)
    if num_blocks != partition.num_blocks:
        raise MalformedMessageError(f"header says {num_blocks} blocks, partition has {partition.num_blocks}")
    pos = HEADER.size
    scales = np.empty(num_blocks, dtype=np.float32)
    signs = np.empty(partition.dim, dtype=bool)
    for b, (d_b, sl) in enumerate(zip(partition.sizes, partition.slices())):
        scales[b] = np.frombuffer(buf, dtype="<f4", count=1, offset=pos)[0]
        pos += 4
        nbytes = (d_b + 7) // 8
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos), bitorder="big")
        signs[sl] = bits[:d_b].astype(bool)
        pos += nbytes
    if not np.all(np.isfinite(scales)) or np.any(scales < 0):
        raise MalformedMessageError("decoded a negative or non-finite scale")
    return CompressedMessage(worker_id, t, scales, signs)


def reconstruct(msg: CompressedMessage, partition: BlockPartition) -> np.ndarray:
    """Dense vector scale_b * (+/-1) for every block."""
    pm = np.where(msg.signs, 1.0, -1.0)
    return np.repeat(msg.scales.astype(np.float64), partition.sizes) * pm


def wire_compress(p: np.ndarray, partition: BlockPartition, worker_id: int = 0, t: int = 0) -> np.ndarray:
    """Compress, encode, decode and reconstruct; what the receiving side actually sees."""
    buf = encode(message_from_vector(p, partition, worker_id, t), partition)
    return reconstruct(decode(buf, partition), partition)


def write_messages(fh: BinaryIO, frames: Iterable[bytes]) -> None:
    """Concatenate encoded messages, each prefixed by its u64 byte length."""
    for frame in frames:
        fh.write(_LEN.pack(len(frame)))
        fh.write(frame)


def read_messages(fh: BinaryIO) -> Iterator[bytes]:
    while True:
        head = fh.read(_LEN.size)
        if not head:
            return
        if len(head) != _LEN.size:
            raise MalformedMessageError("truncated length prefix")
        (n,) = _LEN.unpack(head)
        frame = fh.read(n)
        if len(frame) != n:
            raise MalformedMessageError("truncated message body")
        yield frame
