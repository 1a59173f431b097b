"""Block checksum: CRC-32 (IEEE 802.3 polynomial) with standard init/xorout.

The checksum is applied unmasked over the block payload. ``zlib.crc32`` is
used because it is the one CRC-32 this platform accelerates natively; the
empty message checksums to 0x00000000 and any single-bit flip in a payload
changes the value.
"""

import zlib


def crc32(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def verify(data, expected: int) -> bool:
    return crc32(data) == expected
