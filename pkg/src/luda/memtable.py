"""In-memory write buffer: all versions retained until flush.

A mutable dict keyed by user key holds per-key version lists in insertion
(= ascending seq) order; iteration materializes internal-key order. The
size counter models per-entry heap cost as key + value + ENTRY_OVERHEAD.
"""

from __future__ import annotations

from .keys import KIND_DELETE, KIND_PUT, encode_key

ENTRY_OVERHEAD = 24


class Memtable:
    def __init__(self):
        self._data: dict[bytes, list[tuple[int, int, bytes]]] = {}
        self.approximate_size = 0
        self.entry_count = 0

    def put(self, user_key: bytes, seq: int, value: bytes):
        self._insert(user_key, seq, KIND_PUT, value)

    def delete(self, user_key: bytes, seq: int):
        self._insert(user_key, seq, KIND_DELETE, b"")

    def _insert(self, user_key: bytes, seq: int, kind: int, value: bytes):
        versions = self._data.get(user_key)
        if versions is None:
            self._data[user_key] = [(seq, kind, value)]
        else:
            versions.append((seq, kind, value))
        self.approximate_size += len(user_key) + len(value) + ENTRY_OVERHEAD
        self.entry_count += 1

    def get(self, user_key: bytes):
        """(kind, value) of the newest version, or None if never written."""
        versions = self._data.get(user_key)
        if not versions:
            return None
        seq, kind, value = versions[-1]
        return kind, value

    def __len__(self):
        return self.entry_count

    def __iter__(self):
        """(internal_key, value) pairs in ascending internal-key order."""
        for user_key in sorted(self._data):
            versions = self._data[user_key]
            for seq, kind, value in sorted(versions, reverse=True):
                yield encode_key(user_key, seq, kind), value
