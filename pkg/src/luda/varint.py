"""Unsigned LEB128 varints, the per-entry integer encoding of all block formats."""

from .errors import FormatError


def encode(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint cannot encode negative values")
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def encoded_size(value: int) -> int:
    size = 1
    while value >= 0x80:
        value >>= 7
        size += 1
    return size


def decode(buf, pos: int) -> tuple[int, int]:
    """Decode one varint at ``pos``; returns (value, next_pos)."""
    value = 0
    shift = 0
    n = len(buf)
    while True:
        if pos >= n:
            raise FormatError("truncated varint")
        b = buf[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise FormatError("varint too long")
