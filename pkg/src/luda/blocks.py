"""Data block codec: prefix-compressed entries, restart points, trailing CRC.

Wire layout::

    entry*          varint shared | varint unshared | varint value_len
                    | unshared key bytes | value bytes
    restart_offsets u32le x n_restarts   (byte offsets of entry starts)
    n_restarts      u32le
    crc             u32le over every preceding byte

The first entry and every restart-interval'th entry store their key in
full (shared = 0), so any restart point is a self-contained seek target.
"""

from __future__ import annotations

import struct

from . import varint
from .checksum import crc32
from .errors import CorruptionError, FormatError, OrderingError
from .keys import sort_key

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_RESTART_INTERVAL = 16

_U32 = struct.Struct("<I")

# Fixed per-block tail: restart count + checksum.
BLOCK_TAIL_SIZE = 8


def shared_prefix_len(a: bytes, b: bytes) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def compute_layouts(keys, restart_interval: int):
    """Per-entry (shared, unshared) lengths under the restart schedule.

    ``keys`` are encoded internal keys in block order. Entry ``i`` shares a
    prefix with entry ``i-1`` unless ``i`` falls on a restart point.
    """
    if restart_interval < 1:
        raise ValueError("restart_interval must be >= 1")
    layouts = []
    prev = b""
    for i, key in enumerate(keys):
        if i % restart_interval == 0:
            shared = 0
        else:
            shared = shared_prefix_len(prev, key)
        layouts.append((shared, len(key) - shared))
        prev = key
    return layouts


def entry_encoded_size(shared: int, unshared: int, value_len: int) -> int:
    return (
        varint.encoded_size(shared)
        + varint.encoded_size(unshared)
        + varint.encoded_size(value_len)
        + unshared
        + value_len
    )


def block_overhead(n_entries: int, restart_interval: int) -> int:
    """Bytes beyond the entries: restart array, count, and checksum."""
    n_restarts = (n_entries + restart_interval - 1) // restart_interval
    return 4 * n_restarts + BLOCK_TAIL_SIZE


def assemble_block(keys, values, layouts, restart_interval: int) -> bytes:
    """Serialize one block from precomputed layouts.

    Layouts must have been produced by :func:`compute_layouts` with the
    same restart schedule; keys/values/layouts run in block order.
    """
    parts = []
    restarts = []
    pos = 0
    for i, (key, value) in enumerate(zip(keys, values)):
        shared, unshared = layouts[i]
        if i % restart_interval == 0:
            restarts.append(pos)
        header = (
            varint.encode(shared)
            + varint.encode(unshared)
            + varint.encode(len(value))
        )
        parts.append(header)
        parts.append(key[shared:])
        parts.append(value)
        pos += len(header) + unshared + len(value)
    for off in restarts:
        parts.append(_U32.pack(off))
    parts.append(_U32.pack(len(restarts)))
    payload = b"".join(parts)
    return payload + _U32.pack(crc32(payload))


def encode_data_block(
    pairs,
    restart_interval: int = DEFAULT_RESTART_INTERVAL,
) -> bytes:
    """Encode strictly ascending (internal_key, value) pairs into one block.

    Empty input is an error: the table builder never emits empty blocks.
    """
    if not pairs:
        raise ValueError("cannot encode an empty block")
    keys = []
    values = []
    prev_sk = None
    for key, value in pairs:
        sk = sort_key(key)
        if prev_sk is not None and sk <= prev_sk:
            raise OrderingError(f"keys not strictly ascending at {key!r}")
        prev_sk = sk
        keys.append(key)
        values.append(value)
    layouts = compute_layouts(keys, restart_interval)
    return assemble_block(keys, values, layouts, restart_interval)


def decode_data_block(data, offset: int | None = None):
    """Decode a block back into its (internal_key, value) pairs.

    The trailing checksum is verified before any entry is parsed;
    ``offset`` is only used to label corruption errors with the block's
    position in its file.
    """
    if len(data) < BLOCK_TAIL_SIZE + 4:
        raise FormatError("block too short")
    data = bytes(data)
    stored = _U32.unpack_from(data, len(data) - 4)[0]
    payload = data[:-4]
    if crc32(payload) != stored:
        raise CorruptionError("data block checksum mismatch", offset=offset)
    n_restarts = _U32.unpack_from(payload, len(payload) - 4)[0]
    entries_end = len(payload) - 4 - 4 * n_restarts
    if n_restarts < 1 or entries_end < 0:
        raise FormatError("bad restart array")
    pairs = []
    pos = 0
    prev_key = b""
    while pos < entries_end:
        shared, pos = varint.decode(payload, pos)
        unshared, pos = varint.decode(payload, pos)
        value_len, pos = varint.decode(payload, pos)
        if shared > len(prev_key) or pos + unshared + value_len > entries_end:
            raise FormatError("truncated block entry")
        key = prev_key[:shared] + payload[pos : pos + unshared]
        pos += unshared
        value = payload[pos : pos + value_len]
        pos += value_len
        pairs.append((key, value))
        prev_key = key
    if pos != entries_end:
        raise FormatError("trailing garbage in block entries")
    return pairs


class DataBlockReader:
    """Point-lookup view over a checksum-verified raw block.

    Seeks binary-search the restart array (restart entries store full
    keys), then scan at most one restart interval linearly.
    """

    def __init__(self, data: bytes):
        self._data = data
        payload_len = len(data) - 4
        n_restarts = _U32.unpack_from(data, payload_len - 4)[0]
        self._entries_end = payload_len - 4 - 4 * n_restarts
        if n_restarts < 1 or self._entries_end < 0:
            raise FormatError("bad restart array")
        base = self._entries_end
        self._restarts = [
            _U32.unpack_from(data, base + 4 * i)[0] for i in range(n_restarts)
        ]

    def _entry_at(self, pos: int, prev_key: bytes):
        data = self._data
        shared, pos = varint.decode(data, pos)
        unshared, pos = varint.decode(data, pos)
        value_len, pos = varint.decode(data, pos)
        key = prev_key[:shared] + data[pos : pos + unshared]
        pos += unshared
        value = data[pos : pos + value_len]
        return key, value, pos + value_len

    def _restart_key(self, idx: int) -> bytes:
        key, _, _ = self._entry_at(self._restarts[idx], b"")
        return key

    def seek(self, target_sort_key):
        """First entry whose key is >= the target, or None."""
        lo, hi = 0, len(self._restarts) - 1
        # Rightmost restart whose key is <= target.
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if sort_key(self._restart_key(mid)) <= target_sort_key:
                lo = mid
            else:
                hi = mid - 1
        pos = self._restarts[lo]
        prev_key = b""
        while pos < self._entries_end:
            key, value, pos = self._entry_at(pos, prev_key)
            if sort_key(key) >= target_sort_key:
                return key, value
            prev_key = key
        return None

    def __iter__(self):
        pos = 0
        prev_key = b""
        while pos < self._entries_end:
            key, value, pos = self._entry_at(pos, prev_key)
            yield key, value
            prev_key = key
