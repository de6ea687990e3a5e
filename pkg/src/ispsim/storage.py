"""Virtual-time model of the SSD: FTL striping, flash channels, the on-device
DRAM page buffer, and the host link.

Times are microseconds of virtual time. Shared resources are modeled as FIFO
servers with a next-free time; a request made at time ``at`` starts at
``max(at, next_free)``. Callers issue requests from clock events, so requests
reach each server in time order.
"""

from __future__ import annotations

import heapq
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Callable, Generator, Iterable

MiB = 1 << 20
TiB = 1 << 40

HOST_TO_SSD = "host_to_ssd"
SSD_TO_HOST = "ssd_to_host"


@dataclass(frozen=True)
class SsdConfig:
    logical_block_bytes: int = 4096
    flash_page_bytes: int = 16384
    channels: int = 8
    flash_read_us: float = 60.0
    dma_gbps: float = 3.2
    nvme_cmd_overhead_us: float = 10.0
    page_buffer_bytes: int = 256 * MiB
    firmware_cores: int = 2
    core_sample_rate: float = 1e7
    poll_interval_us: float = 5.0
    # firmware knobs
    ftl_load: float = 0.2
    translate_us_per_record: float = 0.2
    subgraph_buffer_bytes: int = 16 * MiB
    capacity_bytes: int = 2 * TiB

    def __post_init__(self):
        if self.logical_block_bytes <= 0 or self.flash_page_bytes % self.logical_block_bytes:
            raise ValueError("flash_page_bytes must be a positive multiple of logical_block_bytes")
        if self.channels < 1 or self.firmware_cores < 1:
            raise ValueError("channels and firmware_cores must be >= 1")
        for name in ("flash_read_us", "dma_gbps", "nvme_cmd_overhead_us", "core_sample_rate",
                     "poll_interval_us", "translate_us_per_record"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.page_buffer_bytes < 0 or self.subgraph_buffer_bytes <= 0:
            raise ValueError("buffer sizes must be non-negative")
        if not 0 <= self.ftl_load < 1:
            raise ValueError("ftl_load must be in [0, 1)")

    @property
    def blocks_per_page(self) -> int:
        return self.flash_page_bytes // self.logical_block_bytes

    @property
    def buffer_pages(self) -> int:
        return self.page_buffer_bytes // self.flash_page_bytes

    @property
    def capacity_blocks(self) -> int:
        return self.capacity_bytes // self.logical_block_bytes

    def dma_us(self, nbytes: int) -> float:
        return nbytes / (self.dma_gbps * 1e3)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class FlashAddress:
    channel: int
    page: int


# --- virtual clock -------------------------------------------------------


class Signal:
    """Wakes every waiting process when notified; waiters re-check their condition."""

    __slots__ = ("clock", "waiters")

    def __init__(self, clock: "VirtualClock"):
        self.clock = clock
        self.waiters: list[Generator] = []

    def notify(self) -> None:
        waiters, self.waiters = self.waiters, []
        for gen in waiters:
            self.clock.schedule(self.clock.now, self.clock._resume, gen)


class VirtualClock:
    """Event queue ordered by (time, insertion sequence).

    Processes are generators that yield either an absolute resume time or a
    :class:`Signal` to wait on.
    """

    def __init__(self, record: bool = False):
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self.events: list[tuple[float, str]] | None = [] if record else None

    def schedule(self, at: float, fn: Callable, *args) -> None:
        if at < self.now:
            at = self.now
        heapq.heappush(self._queue, (at, self._seq, fn, args))
        self._seq += 1

    def spawn(self, gen: Generator) -> None:
        self.schedule(self.now, self._resume, gen)

    def signal(self) -> Signal:
        return Signal(self)

    def log(self, what: str) -> None:
        if self.events is not None:
            self.events.append((self.now, what))

    def _resume(self, gen: Generator) -> None:
        try:
            got = next(gen)
        except StopIteration:
            return
        if isinstance(got, Signal):
            got.waiters.append(gen)
        else:
            self.schedule(got, self._resume, gen)

    def run(self, until: float | None = None) -> float:
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                break
            at, _, fn, args = heapq.heappop(q)
            self.now = at
            fn(*args)
        return self.now


# --- LRU buffers ---------------------------------------------------------


class LruCache:
    """Fixed-capacity LRU map. Values carry the time an entry becomes valid."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def keys(self) -> list:
        """Resident keys, least recently used first."""
        return list(self._data)

    def lookup(self, key):
        """Touch ``key``; returns its value on a hit, ``None`` on a miss."""
        data = self._data
        if key in data:
            data.move_to_end(key)
            self.hits += 1
            return data[key]
        self.misses += 1
        return None

    def touch(self, key):
        """Like :meth:`lookup` but without counting a hit or miss."""
        data = self._data
        if key in data:
            data.move_to_end(key)
            return data[key]
        return None

    def insert(self, key, value=0.0) -> None:
        if self.capacity == 0:
            return
        data = self._data
        data[key] = value
        data.move_to_end(key)
        if len(data) > self.capacity:
            data.popitem(last=False)

    def access(self, key, value=0.0) -> bool:
        """Lookup-then-insert-on-miss; returns True on a hit."""
        if self.lookup(key) is not None:
            return True
        self.insert(key, value)
        return False


class DramPageBuffer(LruCache):
    """The SSD's DRAM page buffer, keyed by flash page sequence number."""

    @classmethod
    def for_config(cls, config: SsdConfig) -> "DramPageBuffer":
        return cls(config.buffer_pages)


# --- the device ----------------------------------------------------------


class SsdModel:
    def __init__(self, config: SsdConfig | None = None):
        self.config = config or SsdConfig()
        self.buffer = DramPageBuffer.for_config(self.config)
        self.channel_free = [0.0] * self.config.channels
        self.link_free = {HOST_TO_SSD: 0.0, SSD_TO_HOST: 0.0}
        self.flash_reads = 0
        self.bytes_flash_read = 0
        self.bytes_to_host = 0
        self.bytes_from_host = 0
        self.pages_read_log: list[int] | None = None

    # FTL -----------------------------------------------------------------
    def ftl_translate(self, lba: int) -> FlashAddress:
        cfg = self.config
        if not 0 <= lba < cfg.capacity_blocks:
            raise IndexError(f"LBA {lba} outside device capacity of {cfg.capacity_blocks} blocks")
        seq = lba // cfg.blocks_per_page
        return FlashAddress(seq % cfg.channels, seq // cfg.channels)

    def page_of(self, lba: int) -> int:
        return lba // self.config.blocks_per_page

    # flash -----------------------------------------------------------------
    def read_pages(self, at: float, pages: Iterable[int]) -> float:
        """Bring flash pages into the DRAM buffer; returns when the last is resident.

        Buffer hits cost nothing (beyond waiting for an in-flight fill); misses
        queue FIFO on their channel.
        """
        cfg = self.config
        done = at
        buf = self.buffer
        chan = self.channel_free
        nch, tr = cfg.channels, cfg.flash_read_us
        for page in pages:
            ready = buf.lookup(page)
            if ready is None:
                c = page % nch
                start = chan[c] if chan[c] > at else at
                ready = chan[c] = start + tr
                buf.insert(page, ready)
                self.flash_reads += 1
                self.bytes_flash_read += cfg.flash_page_bytes
                if self.pages_read_log is not None:
                    self.pages_read_log.append(page)
            if ready > done:
                done = ready
        return done

    def read_blocks(self, at: float, lbas: Iterable[int]) -> tuple[float, int]:
        """Read logical blocks into the page buffer.

        Returns (completion time, flash bytes read). Host-visible bytes are
        ``len(lbas) * logical_block_bytes``; the host link is charged separately.
        """
        bpp = self.config.blocks_per_page
        pages = list(dict.fromkeys(lba // bpp for lba in lbas))
        before = self.flash_reads
        done = self.read_pages(at, pages)
        return done, (self.flash_reads - before) * self.config.flash_page_bytes

    # host link -------------------------------------------------------------
    def dma_transfer(self, at: float, nbytes: int, direction: str) -> float:
        if nbytes < 0:
            raise ValueError("nbytes must be >= 0")
        if direction == SSD_TO_HOST:
            self.bytes_to_host += nbytes
        elif direction == HOST_TO_SSD:
            self.bytes_from_host += nbytes
        else:
            raise ValueError(f"unknown direction {direction!r}")
        if nbytes == 0:
            return at
        free = self.link_free[direction]
        start = free if free > at else at
        done = start + self.config.dma_us(nbytes)
        self.link_free[direction] = done
        return done
