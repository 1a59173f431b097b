"""Leveled file layout: immutable versions, manifest log, compaction picking.

A Version is an immutable snapshot of the per-level SST lists. Level 0
files may overlap and are held newest-first; levels >= 1 are sorted by
smallest key with pairwise-disjoint user-key ranges. Every mutation is a
VersionEdit appended to the MANIFEST (length-prefixed, CRC-protected
records) and applied atomically under the set's lock.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field

from . import varint
from .checksum import crc32
from .errors import CorruptionError, FormatError, LudaError
from .sst import SstMeta
from .keys import user_key_of

NUM_LEVELS = 7

_U32 = struct.Struct("<I")

_EDIT_TAG = 1


@dataclass
class VersionEdit:
    last_seq: int | None = None
    next_file_id: int | None = None
    deleted: list[tuple[int, int]] = field(default_factory=list)
    added: list[SstMeta] = field(default_factory=list)

    def encode(self) -> bytes:
        parts = [bytes([_EDIT_TAG])]
        parts.append(varint.encode(0 if self.last_seq is None else self.last_seq + 1))
        parts.append(
            varint.encode(0 if self.next_file_id is None else self.next_file_id + 1)
        )
        parts.append(varint.encode(len(self.deleted)))
        for level, file_id in self.deleted:
            parts.append(varint.encode(level))
            parts.append(varint.encode(file_id))
        parts.append(varint.encode(len(self.added)))
        for meta in self.added:
            parts.append(varint.encode(meta.level))
            parts.append(varint.encode(meta.file_id))
            parts.append(varint.encode(meta.file_size))
            parts.append(varint.encode(len(meta.smallest)))
            parts.append(meta.smallest)
            parts.append(varint.encode(len(meta.largest)))
            parts.append(meta.largest)
        return b"".join(parts)

    @classmethod
    def decode(cls, payload: bytes) -> "VersionEdit":
        if not payload or payload[0] != _EDIT_TAG:
            raise FormatError("bad manifest record tag")
        pos = 1
        edit = cls()
        raw, pos = varint.decode(payload, pos)
        edit.last_seq = None if raw == 0 else raw - 1
        raw, pos = varint.decode(payload, pos)
        edit.next_file_id = None if raw == 0 else raw - 1
        n, pos = varint.decode(payload, pos)
        for _ in range(n):
            level, pos = varint.decode(payload, pos)
            file_id, pos = varint.decode(payload, pos)
            edit.deleted.append((level, file_id))
        n, pos = varint.decode(payload, pos)
        for _ in range(n):
            level, pos = varint.decode(payload, pos)
            file_id, pos = varint.decode(payload, pos)
            size, pos = varint.decode(payload, pos)
            klen, pos = varint.decode(payload, pos)
            smallest = payload[pos : pos + klen]
            pos += klen
            klen, pos = varint.decode(payload, pos)
            largest = payload[pos : pos + klen]
            pos += klen
            edit.added.append(
                SstMeta(
                    file_id=file_id,
                    file_size=size,
                    smallest=smallest,
                    largest=largest,
                    level=level,
                )
            )
        return edit


class Version:
    """Immutable snapshot of the level layout; share freely across threads."""

    __slots__ = ("levels", "refs")

    def __init__(self, levels):
        self.levels: list[list[SstMeta]] = levels
        self.refs = 0

    @classmethod
    def empty(cls) -> "Version":
        return cls([[] for _ in range(NUM_LEVELS)])

    def level_bytes(self, level: int) -> int:
        return sum(f.file_size for f in self.levels[level])

    def file_count(self) -> int:
        return sum(len(l) for l in self.levels)

    def all_files(self):
        for level_files in self.levels:
            yield from level_files

    def overlapping(self, level: int, lo_user: bytes, hi_user: bytes):
        return [f for f in self.levels[level] if f.overlaps(lo_user, hi_user)]

    def covers_below(self, user_key: bytes, level: int) -> bool:
        """True if any file deeper than ``level`` may contain the user key."""
        for deeper in range(level + 1, NUM_LEVELS):
            for f in self.levels[deeper]:
                if user_key_of(f.smallest) <= user_key <= user_key_of(f.largest):
                    return True
        return False


def validate_version(version: Version):
    """Invariant walker: sortedness and non-overlap for levels >= 1."""
    for level in range(1, NUM_LEVELS):
        files = version.levels[level]
        for i, f in enumerate(files):
            if user_key_of(f.smallest) > user_key_of(f.largest):
                raise LudaError(f"L{level} file {f.file_id} has inverted range")
            if i > 0:
                prev = files[i - 1]
                if user_key_of(prev.largest) >= user_key_of(f.smallest):
                    raise LudaError(
                        f"L{level} files {prev.file_id},{f.file_id} overlap"
                    )


@dataclass
class CompactionJob:
    source_level: int
    lower: list[SstMeta]
    upper: list[SstMeta]
    target_level: int
    version: Version
    grandparents: list[SstMeta] = field(default_factory=list)

    def input_files(self):
        return self.lower + self.upper

    def input_bytes(self) -> int:
        return sum(f.file_size for f in self.input_files())


def _range_of(files):
    lo = min(user_key_of(f.smallest) for f in files)
    hi = max(user_key_of(f.largest) for f in files)
    return lo, hi


def level_score(version: Version, level: int, config) -> float:
    if level == 0:
        return len(version.levels[0]) / config.l0_compaction_trigger
    quota = config.level_base_bytes * config.level_size_multiplier ** (level - 1)
    return version.level_bytes(level) / quota


def pick_compaction(version: Version, config, cursors=None) -> CompactionJob | None:
    """Job for the level with the highest score, or None if all below 1.

    ``cursors`` maps level -> largest user key compacted last time, giving
    round-robin coverage within a level across successive jobs.
    """
    best_level, best_score = -1, 1.0
    for level in range(NUM_LEVELS - 1):
        score = level_score(version, level, config)
        if score >= best_score:
            best_level, best_score = level, score
    if best_level < 0:
        return None
    level = best_level
    if level == 0:
        lower = list(version.levels[0])
    else:
        files = version.levels[level]
        cursor = (cursors or {}).get(level)
        lower = None
        if cursor is not None:
            for f in files:
                if user_key_of(f.smallest) > cursor:
                    lower = [f]
                    break
        if lower is None:
            lower = [files[0]]
    lo, hi = _range_of(lower)
    upper = version.overlapping(level + 1, lo, hi)
    if upper and level > 0:
        # One widening round: pull in source-level files fully inside the
        # joint range, but only if that leaves the upper set unchanged.
        wlo, whi = _range_of(lower + upper)
        grown = [
            f
            for f in version.levels[level]
            if wlo <= user_key_of(f.smallest) and user_key_of(f.largest) <= whi
        ]
        if len(grown) > len(lower):
            glo, ghi = _range_of(grown)
            if version.overlapping(level + 1, glo, ghi) == upper:
                lower = grown
                lo, hi = glo, ghi
    grandparents = (
        version.overlapping(level + 2, lo, hi) if level + 2 < NUM_LEVELS else []
    )
    return CompactionJob(
        source_level=level,
        lower=lower,
        upper=upper,
        target_level=level + 1,
        version=version,
        grandparents=grandparents,
    )


class VersionSet:
    """Owns the current Version, the MANIFEST, and file lifetime."""

    def __init__(self, directory: str):
        self.directory = directory
        self.lock = threading.Lock()
        self.next_file_id = 1
        self.last_seq = 0
        self.current = Version.empty()
        self.current.refs = 1
        self._live = {id(self.current): self.current}
        self.pending_outputs: set[int] = set()
        self.compaction_cursors: dict[int, bytes] = {}
        self._manifest_path = os.path.join(directory, "MANIFEST")
        self._manifest = None
        self._recover_or_create()

    # -- manifest ----------------------------------------------------------

    def _recover_or_create(self):
        if os.path.exists(self._manifest_path):
            self._replay()
            self._manifest = open(self._manifest_path, "ab")
        else:
            self._manifest = open(self._manifest_path, "wb")

    def _replay(self):
        with open(self._manifest_path, "rb") as f:
            data = f.read()
        pos = 0
        levels = [[] for _ in range(NUM_LEVELS)]
        files: dict[tuple[int, int], SstMeta] = {}
        while pos + 4 <= len(data):
            (length,) = _U32.unpack_from(data, pos)
            if pos + 4 + length + 4 > len(data):
                break  # torn tail record: ignore
            payload = data[pos + 4 : pos + 4 + length]
            (stored,) = _U32.unpack_from(data, pos + 4 + length)
            if crc32(payload) != stored:
                break
            edit = VersionEdit.decode(payload)
            for level, file_id in edit.deleted:
                files.pop((level, file_id), None)
            for meta in edit.added:
                files[(meta.level, meta.file_id)] = meta
            if edit.last_seq is not None:
                self.last_seq = max(self.last_seq, edit.last_seq)
            if edit.next_file_id is not None:
                self.next_file_id = max(self.next_file_id, edit.next_file_id)
            pos += 4 + length + 4
        for (level, _), meta in files.items():
            levels[level].append(meta)
        levels[0].sort(key=lambda m: m.file_id, reverse=True)
        for level in range(1, NUM_LEVELS):
            levels[level].sort(key=lambda m: user_key_of(m.smallest))
        version = Version(levels)
        version.refs = 1
        self.current = version
        self._live = {id(version): version}

    def _append_edit(self, edit: VersionEdit):
        payload = edit.encode()
        self._manifest.write(_U32.pack(len(payload)) + payload + _U32.pack(crc32(payload)))
        self._manifest.flush()
        os.fsync(self._manifest.fileno())

    # -- version transitions ------------------------------------------------

    def new_file_id(self) -> int:
        with self.lock:
            fid = self.next_file_id
            self.next_file_id += 1
            return fid

    def log_and_apply(self, edit: VersionEdit) -> Version:
        with self.lock:
            if edit.last_seq is None:
                edit.last_seq = self.last_seq
            else:
                self.last_seq = max(self.last_seq, edit.last_seq)
            edit.next_file_id = self.next_file_id
            levels = [list(l) for l in self.current.levels]
            deleted = set(edit.deleted)
            for level, file_id in deleted:
                levels[level] = [f for f in levels[level] if f.file_id != file_id]
            for meta in edit.added:
                levels[meta.level].append(meta)
            levels[0].sort(key=lambda m: m.file_id, reverse=True)
            for level in range(1, NUM_LEVELS):
                levels[level].sort(key=lambda m: user_key_of(m.smallest))
            version = Version(levels)
            validate_version(version)
            self._append_edit(edit)
            old = self.current
            version.refs = 1
            self.current = version
            self._live[id(version)] = version
            old.refs -= 1
            if old.refs == 0:
                del self._live[id(old)]
            return version

    def acquire_current(self) -> Version:
        with self.lock:
            self.current.refs += 1
            return self.current

    def release(self, version: Version):
        with self.lock:
            version.refs -= 1
            if version.refs == 0 and version is not self.current:
                del self._live[id(version)]

    # -- file lifetime -------------------------------------------------------

    def live_file_ids(self) -> set[int]:
        with self.lock:
            ids = set(self.pending_outputs)
            for version in self._live.values():
                for meta in version.all_files():
                    ids.add(meta.file_id)
            return ids

    def remove_obsolete_files(self) -> list[str]:
        """Unlink table files no live version references; returns paths."""
        live = self.live_file_ids()
        removed = []
        for name in os.listdir(self.directory):
            if not name.endswith(".sst"):
                continue
            try:
                file_id = int(name[:-4])
            except ValueError:
                continue
            if file_id not in live:
                path = os.path.join(self.directory, name)
                os.unlink(path)
                removed.append(path)
        return removed

    def close(self):
        if self._manifest is not None:
            self._manifest.close()
            self._manifest = None


def apply_compaction_result(
    vset: VersionSet, job: CompactionJob, new_metas: list[SstMeta]
) -> Version:
    """Atomically swap job inputs for its outputs in a new Version."""
    for meta in new_metas:
        if meta.level != job.target_level:
            raise LudaError("output file not at target level")
    ordered = sorted(new_metas, key=lambda m: user_key_of(m.smallest))
    for a, b in zip(ordered, ordered[1:]):
        if user_key_of(a.largest) >= user_key_of(b.smallest):
            raise LudaError(
                f"output files {a.file_id},{b.file_id} have overlapping ranges"
            )
    edit = VersionEdit()
    for meta in job.lower:
        edit.deleted.append((job.source_level, meta.file_id))
    for meta in job.upper:
        edit.deleted.append((job.target_level, meta.file_id))
    edit.added.extend(new_metas)
    return vset.log_and_apply(edit)
