"""Internal keys: user key + 56-bit sequence number + entry kind.

The on-disk encoding appends an 8-byte little-endian trailer to the user
key, ``(seq << 8) | kind``. Ordering is ascending by user key bytes, then
descending by trailer, which places newer sequence numbers first and, at
equal seq, Put (kind 1) before Delete (kind 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import FormatError

KIND_DELETE = 0
KIND_PUT = 1

MAX_SEQ = (1 << 56) - 1

_TRAILER = struct.Struct("<Q")
TRAILER_SIZE = _TRAILER.size


def pack_trailer(seq: int, kind: int) -> int:
    if not 0 <= seq <= MAX_SEQ:
        raise ValueError(f"seq {seq} out of 56-bit range")
    if kind not in (KIND_DELETE, KIND_PUT):
        raise ValueError(f"bad kind {kind}")
    return (seq << 8) | kind


def encode_key(user_key: bytes, seq: int, kind: int) -> bytes:
    return user_key + _TRAILER.pack(pack_trailer(seq, kind))


def decode_key(ikey: bytes) -> tuple[bytes, int, int]:
    """Split an encoded internal key into (user_key, seq, kind)."""
    if len(ikey) < TRAILER_SIZE:
        raise FormatError("internal key shorter than trailer")
    trailer = _TRAILER.unpack_from(ikey, len(ikey) - TRAILER_SIZE)[0]
    kind = trailer & 0xFF
    if kind not in (KIND_DELETE, KIND_PUT):
        raise FormatError(f"bad kind byte {kind}")
    return ikey[:-TRAILER_SIZE], trailer >> 8, kind


def user_key_of(ikey: bytes) -> bytes:
    return ikey[:-TRAILER_SIZE]


def seq_of(ikey: bytes) -> int:
    return _TRAILER.unpack_from(ikey, len(ikey) - TRAILER_SIZE)[0] >> 8


def kind_of(ikey: bytes) -> int:
    return ikey[-TRAILER_SIZE]


def sort_key(ikey: bytes) -> tuple[bytes, int]:
    """Comparison key realizing the internal ordering for encoded keys."""
    trailer = _TRAILER.unpack_from(ikey, len(ikey) - TRAILER_SIZE)[0]
    return (ikey[:-TRAILER_SIZE], -trailer)


def seek_key(user_key: bytes) -> bytes:
    """Smallest internal key for ``user_key``: the newest possible version."""
    return user_key + _TRAILER.pack((MAX_SEQ << 8) | KIND_PUT)


@dataclass(frozen=True, order=False)
class InternalKey:
    """Decoded internal key with total ordering."""

    user_key: bytes
    seq: int
    kind: int

    def encode(self) -> bytes:
        return encode_key(self.user_key, self.seq, self.kind)

    @classmethod
    def decode(cls, ikey: bytes) -> "InternalKey":
        return cls(*decode_key(ikey))

    def _cmp_key(self):
        return (self.user_key, -pack_trailer(self.seq, self.kind))

    def __lt__(self, other: "InternalKey"):
        return self._cmp_key() < other._cmp_key()

    def __le__(self, other: "InternalKey"):
        return self._cmp_key() <= other._cmp_key()

    def __gt__(self, other: "InternalKey"):
        return self._cmp_key() > other._cmp_key()

    def __ge__(self, other: "InternalKey"):
        return self._cmp_key() >= other._cmp_key()
