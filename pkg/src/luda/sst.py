"""Sorted-string table files: data blocks, one bloom filter, index, footer.

File layout (all fixed-width integers little-endian)::

    [data block]*
    [filter block]            bits | u8 k | u32 crc
    [index block]             (varint klen | last_ikey | u32 off | u32 len)*
                              | u32 n_entries | u32 crc
    [footer, 24 bytes]        u32 filter_off | u32 filter_len
                              | u32 index_off | u32 index_len | u64 magic

Index entries carry the exact last internal key of each data block, so a
binary search over the index locates the unique block that may contain a
target key.
"""

from __future__ import annotations

import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass

from . import varint
from .blocks import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_RESTART_INTERVAL,
    DataBlockReader,
    block_overhead,
    compute_layouts,
    assemble_block,
    decode_data_block,
    entry_encoded_size,
    shared_prefix_len,
)
from .bloom import FilterBlock, build_filter, may_contain
from .checksum import crc32
from .errors import CorruptionError, FormatError, OrderingError, SizeOverflowError
from .keys import seek_key, sort_key, user_key_of

MAGIC = 0x4C55444153535431

_FOOTER = struct.Struct("<IIIIQ")
FOOTER_SIZE = _FOOTER.size

_U32 = struct.Struct("<I")

DEFAULT_SST_SIZE = 4 * 1024 * 1024


@dataclass
class SstMeta:
    file_id: int
    file_size: int
    smallest: bytes
    largest: bytes
    level: int = 0

    def overlaps(self, lo_user: bytes, hi_user: bytes) -> bool:
        return (
            user_key_of(self.smallest) <= hi_user
            and user_key_of(self.largest) >= lo_user
        )


def encode_index_block(entries) -> bytes:
    parts = []
    for last_key, offset, length in entries:
        parts.append(varint.encode(len(last_key)))
        parts.append(last_key)
        parts.append(_U32.pack(offset))
        parts.append(_U32.pack(length))
    parts.append(_U32.pack(len(entries)))
    payload = b"".join(parts)
    return payload + _U32.pack(crc32(payload))


def decode_index_block(data, offset: int | None = None):
    if len(data) < 8:
        raise FormatError("index block too short")
    stored = _U32.unpack_from(data, len(data) - 4)[0]
    payload = bytes(data[:-4])
    if crc32(payload) != stored:
        raise CorruptionError("index block checksum mismatch", offset=offset)
    n = _U32.unpack_from(payload, len(payload) - 4)[0]
    entries = []
    pos = 0
    end = len(payload) - 4
    for _ in range(n):
        klen, pos = varint.decode(payload, pos)
        if pos + klen + 8 > end:
            raise FormatError("truncated index entry")
        key = payload[pos : pos + klen]
        pos += klen
        off = _U32.unpack_from(payload, pos)[0]
        length = _U32.unpack_from(payload, pos + 4)[0]
        pos += 8
        entries.append((key, off, length))
    if pos != end:
        raise FormatError("trailing garbage in index block")
    return entries


class SstBuilder:
    """Single-use streaming builder; entries must arrive strictly ascending."""

    def __init__(
        self,
        block_size: int = DEFAULT_BLOCK_SIZE,
        restart_interval: int = DEFAULT_RESTART_INTERVAL,
        bits_per_key: int = 10,
        sst_size_target: int = DEFAULT_SST_SIZE,
    ):
        self.block_size = block_size
        self.restart_interval = restart_interval
        self.bits_per_key = bits_per_key
        self.sst_size_target = sst_size_target
        self._buf = bytearray()
        self._cur_keys = []
        self._cur_values = []
        self._cur_entry_bytes = 0
        self._index = []
        self._user_keys = []
        self._smallest = None
        self._largest = None
        self._prev_sort_key = None
        self._finished = False

    @property
    def data_bytes(self) -> int:
        return len(self._buf)

    @property
    def entry_count(self) -> int:
        return len(self._user_keys)

    def _cur_size_with(self, key: bytes, value_len: int) -> int:
        i = len(self._cur_keys)
        if i % self.restart_interval == 0:
            shared = 0
        else:
            shared = shared_prefix_len(self._cur_keys[-1], key)
        entry = entry_encoded_size(shared, len(key) - shared, value_len)
        # Size up to but excluding the trailing CRC ("pre-checksum").
        return (
            self._cur_entry_bytes
            + entry
            + block_overhead(i + 1, self.restart_interval)
            - 4
        )

    def add(self, key: bytes, value: bytes):
        if self._finished:
            raise RuntimeError("builder already finished")
        sk = sort_key(key)
        if self._prev_sort_key is not None and sk <= self._prev_sort_key:
            raise OrderingError(f"keys not strictly ascending at {key!r}")
        if self._cur_keys and self._cur_size_with(key, len(value)) > self.block_size:
            self._flush_block()
        if self._buf and self.data_bytes >= self.sst_size_target:
            raise SizeOverflowError("table exceeds size target; split required")
        self._prev_sort_key = sk
        if self._smallest is None:
            self._smallest = key
        self._largest = key
        i = len(self._cur_keys)
        if i % self.restart_interval == 0:
            shared = 0
        else:
            shared = shared_prefix_len(self._cur_keys[-1], key)
        self._cur_entry_bytes += entry_encoded_size(
            shared, len(key) - shared, len(value)
        )
        self._cur_keys.append(key)
        self._cur_values.append(value)
        self._user_keys.append(user_key_of(key))

    def _flush_block(self):
        layouts = compute_layouts(self._cur_keys, self.restart_interval)
        block = assemble_block(
            self._cur_keys, self._cur_values, layouts, self.restart_interval
        )
        offset = len(self._buf)
        self._buf += block
        self._index.append((self._cur_keys[-1], offset, len(block)))
        self._cur_keys = []
        self._cur_values = []
        self._cur_entry_bytes = 0

    def finish(self) -> bytes:
        if self._finished:
            raise RuntimeError("builder already finished")
        if self._cur_keys:
            self._flush_block()
        if not self._index:
            raise ValueError("cannot build an empty table")
        self._finished = True
        filt = build_filter(self._user_keys, self.bits_per_key)
        filter_off = len(self._buf)
        filter_block = filt.encode()
        self._buf += filter_block
        index_off = len(self._buf)
        index_block = encode_index_block(self._index)
        self._buf += index_block
        self._buf += _FOOTER.pack(
            filter_off, len(filter_block), index_off, len(index_block), MAGIC
        )
        return bytes(self._buf)

    @property
    def smallest(self) -> bytes:
        return self._smallest

    @property
    def largest(self) -> bytes:
        return self._largest


def build_sst(
    pairs,
    *,
    file_id: int = 0,
    level: int = 0,
    block_size: int = DEFAULT_BLOCK_SIZE,
    restart_interval: int = DEFAULT_RESTART_INTERVAL,
    bits_per_key: int = 10,
    sst_size_target: int = DEFAULT_SST_SIZE,
) -> tuple[bytes, SstMeta]:
    builder = SstBuilder(
        block_size=block_size,
        restart_interval=restart_interval,
        bits_per_key=bits_per_key,
        sst_size_target=sst_size_target,
    )
    for key, value in pairs:
        builder.add(key, value)
    data = builder.finish()
    meta = SstMeta(
        file_id=file_id,
        file_size=len(data),
        smallest=builder.smallest,
        largest=builder.largest,
        level=level,
    )
    return data, meta


class BlockCache:
    """Byte-capped LRU of verified raw data blocks, shared across tables."""

    def __init__(self, capacity_bytes: int = 32 * 1024 * 1024):
        self.capacity = capacity_bytes
        self._entries: OrderedDict = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            data = self._entries.get(key)
            if data is not None:
                self._entries.move_to_end(key)
                self.hits += 1
            else:
                self.misses += 1
            return data

    def put(self, key, data: bytes):
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = data
            self._bytes += len(data)
            while self._bytes > self.capacity and self._entries:
                _, evicted = self._entries.popitem(last=False)
                self._bytes -= len(evicted)


class Table:
    """Read handle over one SST file; immutable and thread-safe."""

    def __init__(self, path, *, file_id: int | None = None, cache: BlockCache | None = None):
        self.path = os.fspath(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        self._size = os.fstat(self._fd).st_size
        self._cache = cache
        self._cache_key = file_id if file_id is not None else self.path
        self.data_block_reads = 0
        self.filter_rejects = 0
        try:
            if self._size < FOOTER_SIZE:
                raise FormatError("file too short for footer")
            footer = os.pread(self._fd, FOOTER_SIZE, self._size - FOOTER_SIZE)
            (filter_off, filter_len, index_off, index_len, magic) = _FOOTER.unpack(
                footer
            )
            if magic != MAGIC:
                raise FormatError(f"bad magic 0x{magic:016x}")
            self.filter = FilterBlock.decode(
                os.pread(self._fd, filter_len, filter_off), offset=filter_off
            )
            self.index = decode_index_block(
                os.pread(self._fd, index_len, index_off), offset=index_off
            )
            self._index_sort_keys = [sort_key(k) for k, _, _ in self.index]
        except Exception:
            os.close(self._fd)
            raise

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _raw_block(self, offset: int, length: int) -> bytes:
        key = (self._cache_key, offset)
        if self._cache is not None:
            data = self._cache.get(key)
            if data is not None:
                return data
        data = os.pread(self._fd, length, offset)
        if len(data) != length:
            raise FormatError("short block read")
        self.data_block_reads += 1
        # Verify once; cached blocks are trusted afterwards.
        decode_probe = data[:-4]
        stored = _U32.unpack_from(data, length - 4)[0]
        if crc32(decode_probe) != stored:
            raise CorruptionError("data block checksum mismatch", offset=offset)
        if self._cache is not None:
            self._cache.put(key, data)
        return data

    def get(self, user_key: bytes):
        """Newest (internal_key, value) for the user key, or None.

        The bloom filter is consulted before any data block is touched.
        """
        if not may_contain(self.filter, user_key):
            self.filter_rejects += 1
            return None
        target = sort_key(seek_key(user_key))
        lo, hi = 0, len(self.index)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._index_sort_keys[mid] < target:
                lo = mid + 1
            else:
                hi = mid
        if lo == len(self.index):
            return None
        _, offset, length = self.index[lo]
        reader = DataBlockReader(self._raw_block(offset, length))
        found = reader.seek(target)
        if found is None:
            return None
        key, value = found
        if user_key_of(key) != user_key:
            return None
        return key, value

    def scan(self):
        """All (internal_key, value) pairs in ascending internal-key order."""
        for _, offset, length in self.index:
            data = os.pread(self._fd, length, offset)
            self.data_block_reads += 1
            yield from decode_data_block(data, offset=offset)


def open_sst(path, *, file_id: int | None = None, cache: BlockCache | None = None) -> Table:
    return Table(path, file_id=file_id, cache=cache)
