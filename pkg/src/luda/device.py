"""Offload executor: staged regions, named transfer streams, kernel dispatch.

The contract mirrors a discrete accelerator: bytes enter and leave device
memory only through bulk transfers on named streams (``in_lower``,
``in_upper``, ``out``), kernels run as order-insensitive work items over
staged regions, and the host never touches device-resident buffers
directly.

Two backends implement the contract:

* ``serial`` executes work items inline on the caller's thread with free
  transfers; it exists for deterministic tests and as the degenerate
  one-worker device.
* ``host_parallel`` runs work items on a pool of pinned worker processes
  with POSIX shared memory as device global memory, and applies a
  configurable bandwidth/latency model to every transfer so overlap and
  utilization are measurable. Worker processes sidestep the interpreter
  lock of the host process, which is what makes the pool behave like
  silicon the host's CPU contention cannot steal.
"""

from __future__ import annotations

import itertools
import math
import multiprocessing as mp
import os
import threading
import time
import queue as queue_mod
from dataclasses import dataclass, field
from multiprocessing import shared_memory

from . import kernels
from .config import DeviceConfig
from .errors import CapacityError, CorruptionError, DeviceError

STREAM_IN_LOWER = "in_lower"
STREAM_IN_UPPER = "in_upper"
STREAM_OUT = "out"

EMPTY = "empty"
STAGING = "staging"
FILLING = "filling"
READY = "ready"

_region_counter = itertools.count(1)


# -- worker-process side ------------------------------------------------------

_attached: dict = {}
_attach_order: list = []


def _attach_shm(name: str):
    try:
        return shared_memory.SharedMemory(name=name, track=False)
    except TypeError:  # Python < 3.13
        shm = shared_memory.SharedMemory(name=name)
        try:
            from multiprocessing import resource_tracker

            resource_tracker.unregister(shm._name, "shared_memory")
        except Exception:
            pass
        return shm


def _worker_init(cores):
    if cores and hasattr(os, "sched_setaffinity"):
        try:
            os.sched_setaffinity(0, set(cores))
        except OSError:
            pass


def _worker_resolve(region_table):
    live = {name for name, _ in region_table.values()}

    def resolve(rid):
        name, _size = region_table[rid]
        entry = _attached.get(name)
        if entry is None:
            shm = _attach_shm(name)
            entry = (shm, memoryview(shm.buf))
            _attached[name] = entry
            _attach_order.append(name)
            while len(_attach_order) > 128:
                old = _attach_order.pop(0)
                if old in live:
                    _attach_order.append(old)
                    continue
                old_entry = _attached.pop(old, None)
                if old_entry is not None:
                    old_entry[1].release()
                    old_entry[0].close()
        return entry[1]

    return resolve


def _run_batch(payload):
    kind, region_table, items = payload
    resolve = _worker_resolve(region_table)
    return [kernels.run_item_safe(kind, args, resolve) for args in items]


# -- host side ----------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """One dispatch: a kernel kind plus self-contained work item args.

    ``reads``/``writes`` list the region ids the items touch; items write
    disjoint output ranges by construction.
    """

    kind: str
    items: tuple
    reads: tuple = ()
    writes: tuple = ()

    def __post_init__(self):
        if self.kind not in kernels.KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")


class DeviceRegion:
    __slots__ = ("region_id", "capacity", "state", "label", "buf", "shm", "_pending")

    def __init__(self, region_id, capacity, label=""):
        self.region_id = region_id
        self.capacity = capacity
        self.state = EMPTY
        self.label = label
        self.buf = None
        self.shm = None
        self._pending = 0


class TransferHandle:
    def __init__(self, stream: str, nbytes: int, direction: str, seq: int):
        self.stream = stream
        self.nbytes = nbytes
        self.direction = direction
        self.seq = seq
        self.t_issue = time.monotonic()
        self.t_start = None
        self.t_end = None
        self.error = None
        self._result = None
        self._event = threading.Event()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout=None):
        if not self._event.wait(timeout):
            raise DeviceError(f"transfer on {self.stream} timed out")
        if self.error is not None:
            raise self.error
        return self._result


class DispatchHandle:
    def __init__(self, kind: str, n_items: int):
        self.kind = kind
        self.n_items = n_items
        self.t_submit = time.monotonic()
        self.t_end = None
        self.results = [None] * n_items
        self.error = None
        self._event = threading.Event()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout=None):
        if not self._event.wait(timeout):
            raise DeviceError(f"{self.kind} dispatch timed out")
        if self.error is not None:
            raise self.error
        return self.results


@dataclass
class DeviceStatsSnapshot:
    busy_sec: float
    total_sec: float
    utilization: float
    bytes_in: dict
    bytes_out: dict
    transfer_sec: dict
    dispatches: dict
    items: dict


class _Stats:
    def __init__(self):
        self.lock = threading.Lock()
        self.opened_at = time.monotonic()
        self.busy_total = 0.0
        self.inflight = 0
        self.busy_since = None
        self.bytes_in = {}
        self.bytes_out = {}
        self.transfer_sec = {}
        self.dispatches = {}
        self.items = {}

    def dispatch_begin(self, kind, n_items):
        with self.lock:
            self.dispatches[kind] = self.dispatches.get(kind, 0) + 1
            self.items[kind] = self.items.get(kind, 0) + n_items
            if self.inflight == 0:
                self.busy_since = time.monotonic()
            self.inflight += 1

    def dispatch_end(self):
        with self.lock:
            self.inflight -= 1
            if self.inflight == 0 and self.busy_since is not None:
                self.busy_total += time.monotonic() - self.busy_since
                self.busy_since = None

    def transfer(self, stream, direction, nbytes, duration):
        with self.lock:
            book = self.bytes_in if direction == "in" else self.bytes_out
            book[stream] = book.get(stream, 0) + nbytes
            self.transfer_sec[stream] = self.transfer_sec.get(stream, 0.0) + duration

    def snapshot(self) -> DeviceStatsSnapshot:
        with self.lock:
            now = time.monotonic()
            busy = self.busy_total
            if self.busy_since is not None:
                busy += now - self.busy_since
            total = now - self.opened_at
            return DeviceStatsSnapshot(
                busy_sec=busy,
                total_sec=total,
                utilization=busy / total if total > 0 else 0.0,
                bytes_in=dict(self.bytes_in),
                bytes_out=dict(self.bytes_out),
                transfer_sec=dict(self.transfer_sec),
                dispatches=dict(self.dispatches),
                items=dict(self.items),
            )


class _DeviceBase:
    """Region registry, capacity accounting, and the stream state machine."""

    def __init__(self, config: DeviceConfig):
        self.config = config
        self._stats = _Stats()
        self._regions: dict[int, DeviceRegion] = {}
        self._alloc_bytes = 0
        self._lock = threading.Lock()
        self._closed = False

    # region lifecycle

    def alloc(self, capacity: int, label: str = "") -> DeviceRegion:
        if capacity < 0:
            raise ValueError("negative region capacity")
        with self._lock:
            if self._closed:
                raise DeviceError("device closed")
            if self._alloc_bytes + capacity > self.config.region_capacity:
                raise CapacityError(
                    f"region allocation of {capacity} B exceeds device capacity "
                    f"({self._alloc_bytes} of {self.config.region_capacity} B in use)"
                )
            region = DeviceRegion(next(_region_counter), capacity, label)
            self._make_buffer(region)
            self._regions[region.region_id] = region
            self._alloc_bytes += capacity
        return region

    def free(self, region: DeviceRegion):
        with self._lock:
            if self._regions.pop(region.region_id, None) is not None:
                self._alloc_bytes -= region.capacity
                self._release_buffer(region)

    def free_all(self):
        with self._lock:
            for region in list(self._regions.values()):
                self._release_buffer(region)
            self._regions.clear()
            self._alloc_bytes = 0

    # transfers

    def stage_in(self, region: DeviceRegion, data, stream: str, offset: int = 0) -> TransferHandle:
        if offset + len(data) > region.capacity:
            raise CapacityError(
                f"stage_in of {len(data)} B at {offset} exceeds region capacity "
                f"{region.capacity}"
            )
        if region.state == FILLING:
            raise DeviceError("cannot stage into a region a dispatch is writing")
        region.state = STAGING
        region._pending += 1
        handle = self._new_handle(stream, len(data), "in")

        def work():
            self._copy_in(region, offset, data)
            region._pending -= 1
            if region._pending == 0:
                region.state = READY

        self._submit_transfer(handle, work)
        return handle

    def stage_out(self, region: DeviceRegion, ranges, stream: str) -> TransferHandle:
        """Gather ``[(offset, length), ...]`` from device memory to the host."""
        if region.state in (EMPTY, STAGING):
            raise DeviceError(f"stage_out from region in state {region.state}")
        total = sum(length for _, length in ranges)
        for offset, length in ranges:
            if offset + length > region.capacity:
                raise CapacityError("stage_out range beyond region capacity")
        handle = self._new_handle(stream, total, "out")

        def work():
            handle._result = self._copy_out(region, ranges)

        self._submit_transfer(handle, work)
        return handle

    # introspection

    def stats(self) -> DeviceStatsSnapshot:
        return self._stats.snapshot()

    @property
    def workers(self) -> int:
        return 1

    def region_in_state(self, region: DeviceRegion, state: str) -> bool:
        return region.state == state

    def close(self):
        raise NotImplementedError

    # hooks

    def _make_buffer(self, region):
        raise NotImplementedError

    def _release_buffer(self, region):
        raise NotImplementedError

    def _copy_in(self, region, offset, data):
        raise NotImplementedError

    def _copy_out(self, region, ranges) -> bytes:
        raise NotImplementedError

    def _new_handle(self, stream, nbytes, direction) -> TransferHandle:
        raise NotImplementedError

    def _submit_transfer(self, handle, work):
        raise NotImplementedError

    def _check_dispatch(self, spec: KernelSpec):
        for rid in spec.reads:
            region = self._regions.get(rid)
            if region is None or region.state != READY:
                raise DeviceError(
                    f"{spec.kind} dispatch reads region {rid} not in ready state"
                )
        for rid in spec.writes:
            region = self._regions.get(rid)
            if region is None or region.state == STAGING:
                raise DeviceError(
                    f"{spec.kind} dispatch writes region {rid} in state "
                    f"{region.state if region else 'freed'}"
                )
            region.state = FILLING

    def _finish_dispatch(self, spec: KernelSpec):
        for rid in spec.writes:
            region = self._regions.get(rid)
            if region is not None:
                region.state = READY

    @staticmethod
    def _fold_error(kind, tagged):
        if tagged[0] == "corrupt":
            return CorruptionError(f"{kind} kernel: {tagged[1]}", offset=tagged[2])
        return DeviceError(f"{kind} kernel item failed: {tagged[1]}")


class SerialDevice(_DeviceBase):
    """Single-worker backend: inline execution, zero transfer cost."""

    def __init__(self, config: DeviceConfig | None = None):
        super().__init__(config or DeviceConfig(backend="serial"))
        self._stream_seq: dict[str, int] = {}

    def _make_buffer(self, region):
        region.buf = bytearray(region.capacity)

    def _release_buffer(self, region):
        region.buf = None

    def _copy_in(self, region, offset, data):
        region.buf[offset : offset + len(data)] = data

    def _copy_out(self, region, ranges):
        return b"".join(bytes(region.buf[o : o + l]) for o, l in ranges)

    def _new_handle(self, stream, nbytes, direction):
        seq = self._stream_seq.get(stream, 0)
        self._stream_seq[stream] = seq + 1
        return TransferHandle(stream, nbytes, direction, seq)

    def _submit_transfer(self, handle, work):
        handle.t_start = time.monotonic()
        try:
            work()
        except Exception as exc:  # pragma: no cover - capacity checked earlier
            handle.error = exc
        handle.t_end = time.monotonic()
        self._stats.transfer(
            handle.stream, handle.direction, handle.nbytes, handle.t_end - handle.t_start
        )
        handle._event.set()

    def dispatch(self, spec: KernelSpec, on_item=None) -> DispatchHandle:
        self._check_dispatch(spec)
        handle = DispatchHandle(spec.kind, len(spec.items))
        self._stats.dispatch_begin(spec.kind, len(spec.items))
        try:
            def resolve(rid):
                return memoryview(self._regions[rid].buf)

            for i, args in enumerate(spec.items):
                tagged = kernels.run_item_safe(spec.kind, args, resolve)
                if tagged[0] != "ok":
                    handle.error = self._fold_error(spec.kind, tagged)
                    break
                handle.results[i] = tagged[1]
                if on_item is not None:
                    on_item(i, tagged[1])
        finally:
            self._stats.dispatch_end()
            self._finish_dispatch(spec)
            handle.t_end = time.monotonic()
            handle._event.set()
        return handle

    def close(self):
        self._closed = True
        self.free_all()


class HostParallelDevice(_DeviceBase):
    """Worker-process pool over shared memory with modeled transfers."""

    def __init__(self, config: DeviceConfig | None = None):
        super().__init__(config or DeviceConfig())
        self._workers = self.config.effective_workers()
        cores = self.config.device_cores() if self.config.pin_cores else None
        methods = mp.get_all_start_methods()
        method = "forkserver" if "forkserver" in methods else "fork"
        ctx = mp.get_context(method)
        self._pool = ctx.Pool(
            processes=self._workers, initializer=_worker_init, initargs=(cores,)
        )
        self._streams: dict[str, queue_mod.Queue] = {}
        self._stream_threads: list[threading.Thread] = []
        self._stream_seq: dict[str, int] = {}
        self._shm_prefix = f"luda{os.getpid()}"

    @property
    def workers(self) -> int:
        return self._workers

    # buffers

    def _make_buffer(self, region):
        name = f"{self._shm_prefix}r{region.region_id}"
        region.shm = shared_memory.SharedMemory(
            name=name, create=True, size=max(1, region.capacity)
        )

    def _release_buffer(self, region):
        if region.shm is not None:
            region.shm.close()
            try:
                region.shm.unlink()
            except FileNotFoundError:
                pass
            region.shm = None

    def _copy_in(self, region, offset, data):
        region.shm.buf[offset : offset + len(data)] = data

    def _copy_out(self, region, ranges):
        buf = region.shm.buf
        return b"".join(bytes(buf[o : o + l]) for o, l in ranges)

    # streams

    def _stream_queue(self, stream: str) -> queue_mod.Queue:
        q = self._streams.get(stream)
        if q is None:
            q = queue_mod.Queue()
            self._streams[stream] = q
            t = threading.Thread(
                target=self._stream_loop, args=(q,), name=f"luda-stream-{stream}", daemon=True
            )
            t.start()
            self._stream_threads.append(t)
        return q

    def _stream_loop(self, q):
        while True:
            task = q.get()
            if task is None:
                return
            handle, work = task
            handle.t_start = time.monotonic()
            try:
                if handle.nbytes > 0:
                    delay = (
                        handle.nbytes / self.config.bandwidth_bytes_per_sec
                        + self.config.latency_sec
                    )
                    time.sleep(delay)
                work()
            except Exception as exc:
                handle.error = exc
            handle.t_end = time.monotonic()
            self._stats.transfer(
                handle.stream,
                handle.direction,
                handle.nbytes,
                handle.t_end - handle.t_start,
            )
            handle._event.set()

    def _new_handle(self, stream, nbytes, direction):
        seq = self._stream_seq.get(stream, 0)
        self._stream_seq[stream] = seq + 1
        return TransferHandle(stream, nbytes, direction, seq)

    def _submit_transfer(self, handle, work):
        if handle.nbytes == 0 and not self._streams.get(handle.stream, queue_mod.Queue()).qsize():
            # Nothing to move and nothing queued ahead: complete immediately.
            handle.t_start = handle.t_end = time.monotonic()
            work()
            self._stats.transfer(handle.stream, handle.direction, 0, 0.0)
            handle._event.set()
            return
        self._stream_queue(handle.stream).put((handle, work))

    # dispatch

    def dispatch(self, spec: KernelSpec, on_item=None) -> DispatchHandle:
        if self._closed:
            raise DeviceError("device closed")
        self._check_dispatch(spec)
        handle = DispatchHandle(spec.kind, len(spec.items))
        region_table = {}
        for rid in set(spec.reads) | set(spec.writes):
            region = self._regions[rid]
            region_table[rid] = (region.shm.name, region.capacity)
        n = len(spec.items)
        batch_size = max(1, math.ceil(n / (self._workers * 4)))
        payloads = [
            (spec.kind, region_table, spec.items[i : i + batch_size])
            for i in range(0, n, batch_size)
        ]
        self._stats.dispatch_begin(spec.kind, n)
        result_iter = self._pool.imap(_run_batch, payloads)

        def collect():
            idx = 0
            try:
                for batch in result_iter:
                    for tagged in batch:
                        if tagged[0] != "ok":
                            if handle.error is None:
                                handle.error = self._fold_error(spec.kind, tagged)
                        else:
                            handle.results[idx] = tagged[1]
                            if on_item is not None and handle.error is None:
                                on_item(idx, tagged[1])
                        idx += 1
            except Exception as exc:  # pool torn down mid-flight
                if handle.error is None:
                    handle.error = DeviceError(f"dispatch failed: {exc}")
            finally:
                self._stats.dispatch_end()
                self._finish_dispatch(spec)
                handle.t_end = time.monotonic()
                handle._event.set()

        threading.Thread(target=collect, name=f"luda-collect-{spec.kind}", daemon=True).start()
        return handle

    def close(self):
        if self._closed:
            return
        self._closed = True
        for q in self._streams.values():
            q.put(None)
        for t in self._stream_threads:
            t.join(timeout=5)
        self._pool.terminate()
        self._pool.join()
        self.free_all()


def make_device(config: DeviceConfig):
    if config.backend == "serial":
        return SerialDevice(config)
    if config.backend == "host_parallel":
        return HostParallelDevice(config)
    raise ValueError(f"unknown device backend {config.backend!r}")
