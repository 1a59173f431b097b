"""Runtime configuration for the store and the offload device."""

from __future__ import annotations

import os
from dataclasses import dataclass, field


def default_device_workers() -> int:
    return max(1, (os.cpu_count() or 1) - 2)


@dataclass
class DeviceConfig:
    backend: str = "host_parallel"  # or "serial"
    workers: int = 0  # 0 -> cpu_count - 2, floored at 1
    bandwidth_bytes_per_sec: float = 8 * 2**30
    latency_sec: float = 20e-6
    region_capacity: int = 256 * 2**20
    # Pin worker processes to the highest-numbered cores, modeling silicon
    # outside the host CPU. Requires Linux sched_setaffinity.
    pin_cores: bool = False
    # Slot headroom for decoded output of one packed block.
    unpack_expansion: int = 4

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else default_device_workers()

    def device_cores(self) -> list[int]:
        cores = sorted(os.sched_getaffinity(0))
        w = min(self.effective_workers(), max(1, len(cores) - 1))
        return cores[-w:]

    def host_cores(self) -> list[int]:
        cores = sorted(os.sched_getaffinity(0))
        dev = set(self.device_cores())
        host = [c for c in cores if c not in dev]
        return host or cores


@dataclass
class StoreConfig:
    # Engine selection: "offload" routes compactions through the device,
    # "inline" runs the single-threaded reference compactor.
    engine_mode: str = "offload"
    memtable_size: int = 4 * 2**20
    sst_size_target: int = 4 * 2**20
    block_size: int = 4096
    restart_interval: int = 16
    bits_per_key: int = 10
    block_cache_bytes: int = 32 * 2**20
    l0_compaction_trigger: int = 4
    l0_slowdown_files: int = 8
    l0_stall_files: int = 12
    level_base_bytes: int = 10 * 2**20
    level_size_multiplier: int = 10
    max_grandparent_overlap_files: int = 10
    # Background executors; disable for deterministic single-threaded tests
    # that drive flush/compaction explicitly.
    background: bool = True
    # "block" absorbs an L0 stall as write latency; "raise" surfaces
    # WriteStalled to the caller instead.
    stall_mode: str = "block"
    stall_timeout_sec: float = 120.0
    slowdown_sleep_sec: float = 0.001
    device: DeviceConfig = field(default_factory=DeviceConfig)
