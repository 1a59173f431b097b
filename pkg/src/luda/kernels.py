"""Data-parallel kernel work items and the tuple wire format.

Four kernel families cover the compaction phases: ``unpack`` restores
(key, value) records and key/offset tuples from packed blocks, ``shared_key``
computes per-entry prefix layouts for planned output blocks, ``encode``
materializes output blocks (the only point where value bytes are copied a
second time), and ``filter`` builds one bloom filter per output table.

Every item is self-contained: it reads and writes disjoint region ranges
passed in its argument tuple, so items of one dispatch may execute in any
order or interleaving and produce identical bytes. Item functions run
inside device worker processes as well as inline for the serial backend,
so they must stay importable and free of host-side state.
"""

from __future__ import annotations

import struct

from . import varint
from .blocks import assemble_block, compute_layouts, decode_data_block
from .bloom import build_filter
from .errors import CorruptionError

_TUP_TAIL = struct.Struct("<QI")  # value offset in pair arena, value length
_TUP_KLEN = struct.Struct("<H")

TUPLE_FIXED_OVERHEAD = _TUP_KLEN.size + _TUP_TAIL.size


def tuple_wire_size(key_len: int) -> int:
    return TUPLE_FIXED_OVERHEAD + key_len


def encode_tuple(key: bytes, v_offset: int, v_len: int) -> bytes:
    return _TUP_KLEN.pack(len(key)) + key + _TUP_TAIL.pack(v_offset, v_len)


def parse_tuples(buf, start: int, end: int):
    """Yield (key, v_offset, v_len) for each wire tuple in [start, end)."""
    pos = start
    out = []
    while pos < end:
        (klen,) = _TUP_KLEN.unpack_from(buf, pos)
        pos += 2
        key = bytes(buf[pos : pos + klen])
        pos += klen
        v_offset, v_len = _TUP_TAIL.unpack_from(buf, pos)
        pos += 12
        out.append((key, v_offset, v_len))
    return out


def pair_record(key: bytes, value: bytes) -> bytes:
    return varint.encode(len(key)) + key + value


def read_pair_value(buf, v_offset: int, v_len: int) -> bytes:
    klen, pos = varint.decode(buf, v_offset)
    pos += klen
    return bytes(buf[pos : pos + v_len])


def read_pair_key(buf, v_offset: int) -> bytes:
    klen, pos = varint.decode(buf, v_offset)
    return bytes(buf[pos : pos + klen])


# -- work items --------------------------------------------------------------


def _unpack_item(args, resolve):
    (
        sst_rid,
        block_off,
        block_len,
        pair_rid,
        pair_off,
        pair_cap,
        tup_rid,
        tup_off,
        tup_cap,
    ) = args
    src = resolve(sst_rid)
    block = bytes(src[block_off : block_off + block_len])
    pairs = decode_data_block(block, offset=block_off)
    pair_mv = resolve(pair_rid)
    tup_mv = resolve(tup_rid)
    ppos = pair_off
    tpos = tup_off
    value_bytes = 0
    for key, value in pairs:
        rec = pair_record(key, value)
        tup = encode_tuple(key, ppos, len(value))
        if ppos + len(rec) > pair_off + pair_cap:
            raise BufferError("pair slot overflow")
        if tpos + len(tup) > tup_off + tup_cap:
            raise BufferError("tuple slot overflow")
        pair_mv[ppos : ppos + len(rec)] = rec
        tup_mv[tpos : tpos + len(tup)] = tup
        ppos += len(rec)
        tpos += len(tup)
        value_bytes += len(value)
    return (ppos - pair_off, tpos - tup_off, len(pairs), value_bytes)


def _shared_key_item(args, resolve):
    tup_rid, tup_start, tup_end, restart_interval, layout_rid, layout_off = args
    tuples = parse_tuples(resolve(tup_rid), tup_start, tup_end)
    keys = [t[0] for t in tuples]
    layouts = compute_layouts(keys, restart_interval)
    out = resolve(layout_rid)
    pos = layout_off
    for shared, unshared in layouts:
        struct.pack_into("<II", out, pos, shared, unshared)
        pos += 8
    return (len(layouts),)


def _encode_item(args, resolve):
    (
        tup_rid,
        tup_start,
        tup_end,
        layout_rid,
        layout_off,
        pair_rid,
        out_rid,
        out_off,
        out_cap,
        restart_interval,
    ) = args
    tuples = parse_tuples(resolve(tup_rid), tup_start, tup_end)
    layout_mv = resolve(layout_rid)
    layouts = []
    pos = layout_off
    for _ in tuples:
        shared, unshared = struct.unpack_from("<II", layout_mv, pos)
        layouts.append((shared, unshared))
        pos += 8
    pair_mv = resolve(pair_rid)
    keys = []
    values = []
    value_bytes = 0
    for key, v_offset, v_len in tuples:
        keys.append(key)
        value = read_pair_value(pair_mv, v_offset, v_len)
        values.append(value)
        value_bytes += v_len
    block = assemble_block(keys, values, layouts, restart_interval)
    if len(block) > out_cap:
        raise BufferError("encode slot overflow")
    out = resolve(out_rid)
    out[out_off : out_off + len(block)] = block
    return (len(block), value_bytes)


def _filter_item(args, resolve):
    tup_rid, tup_start, tup_end, bits_per_key, out_rid, out_off, out_cap = args
    tuples = parse_tuples(resolve(tup_rid), tup_start, tup_end)
    # Trailer is 8 bytes; tuples carry full internal keys.
    user_keys = [key[:-8] for key, _, _ in tuples]
    encoded = build_filter(user_keys, bits_per_key).encode()
    if len(encoded) > out_cap:
        raise BufferError("filter slot overflow")
    out = resolve(out_rid)
    out[out_off : out_off + len(encoded)] = encoded
    return (len(encoded),)


_KERNELS = {
    "unpack": _unpack_item,
    "shared_key": _shared_key_item,
    "encode": _encode_item,
    "filter": _filter_item,
}

KERNEL_KINDS = tuple(_KERNELS)


def execute_item(kind: str, args, resolve):
    return _KERNELS[kind](args, resolve)


def run_item_safe(kind: str, args, resolve):
    """Execute one item, folding failures into a tagged result tuple."""
    try:
        return ("ok", execute_item(kind, args, resolve))
    except CorruptionError as exc:
        return ("corrupt", str(exc), exc.offset)
    except Exception as exc:  # noqa: BLE001 - crosses a process boundary
        return ("err", f"{type(exc).__name__}: {exc}")
