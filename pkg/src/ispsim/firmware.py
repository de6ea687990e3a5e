"""Simulated in-storage sampling firmware.

An ISP write command carries an NSCONFIG blob. The firmware DMAs the blob in,
translates every target record to flash addresses, reads the edge lists into
the DRAM page buffer, samples on the embedded cores (time-shared with
background FTL work), recurses over hops by looking up children in the
on-device ``indptr`` region, and DMAs a packed subgraph payload back on the
next poll tick.

Sampling draws come from the same (seed base, hop, node) counter streams the
host sampler uses, so returned subgraphs are draw-identical to host sampling.
"""

from __future__ import annotations

import enum
import itertools
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Generator, Sequence

import numpy as np

from .graph import HEADER_BYTES
from .hostio import GraphImage, NsConfigBlob, NsConfigError, NvmeCommand, decode_nsconfig
from .rng import derive_key, derive_keys, stream_values
from .sampler import Subgraph, unique_in_order
from .storage import HOST_TO_SSD, SSD_TO_HOST, FlashAddress, SsdConfig, SsdModel


class RequestState(enum.IntEnum):
    RECEIVED = 0
    TRANSLATED = 1
    READING = 2
    SAMPLING = 3
    READY = 4
    RETURNED = 5
    FAILED = 99


class StateError(RuntimeError):
    pass


class SubgraphBufferOverflow(RuntimeError):
    pass


@dataclass
class IspRequest:
    request_id: int
    stream: int
    issued_at: float
    blob: NsConfigBlob | None = None
    state: RequestState | None = None
    time: float = 0.0
    completed_at: float | None = None
    ready_at: float | None = None
    error: str | None = None
    capacity_error: bool = False
    payload: bytes | None = None
    history: list[tuple[RequestState, float]] = field(default_factory=list)
    ids_sampled: int = 0

    def advance(self, state: RequestState, t: float) -> None:
        """Move forward; states may not be skipped or revisited (FAILED is terminal)."""
        if self.state in (RequestState.RETURNED, RequestState.FAILED):
            raise StateError(f"request {self.request_id} already {self.state.name}")
        if state is not RequestState.FAILED:
            expected = RequestState.RECEIVED if self.state is None else RequestState(self.state + 1)
            if state is not expected:
                cur = self.state.name if self.state is not None else "new"
                raise StateError(f"request {self.request_id}: {cur} -> {state.name}")
        self.state = state
        self.time = t
        self.history.append((state, t))

    @property
    def ok(self) -> bool:
        return self.state is not RequestState.FAILED


class PendingFlashQueue:
    """FIFO of pending flash page reads: (FlashAddress, request id, node)."""

    def __init__(self, channels: int, record: bool = False):
        self.channels = channels
        self._pending: deque = deque()
        self.log: list[tuple[FlashAddress, int, int]] | None = [] if record else None

    def __len__(self):
        return sum(len(p) for p, _, _ in self._pending)

    def push(self, pages: np.ndarray, request_id: int, nodes: np.ndarray) -> None:
        self._pending.append((pages, request_id, nodes))
        if self.log is not None:
            nch = self.channels
            self.log.extend((FlashAddress(int(p) % nch, int(p) // nch), request_id, int(v))
                            for p, v in zip(pages.tolist(), nodes.tolist()))

    def drain(self) -> np.ndarray:
        """Page sequence numbers in FIFO order, duplicates removed."""
        if not self._pending:
            return np.zeros(0, dtype=np.int64)
        pages = np.concatenate([p for p, _, _ in self._pending])
        self._pending.clear()
        return unique_in_order(pages)


class PendingSubgraphBuffer:
    """On-device staging area for sampled IDs, shared by all in-flight requests."""

    def __init__(self, capacity_bytes: int):
        self.capacity_bytes = capacity_bytes
        self.used: dict[int, int] = {}
        self.peak = 0

    @property
    def total(self) -> int:
        return sum(self.used.values())

    def reserve(self, request_id: int, nbytes: int) -> None:
        if self.total + nbytes > self.capacity_bytes:
            raise SubgraphBufferOverflow(
                f"request {request_id} needs {nbytes} more bytes; "
                f"{self.capacity_bytes - self.total} of {self.capacity_bytes} free")
        self.used[request_id] = self.used.get(request_id, 0) + nbytes
        self.peak = max(self.peak, self.total)

    def release(self, request_id: int) -> None:
        self.used.pop(request_id, None)


class CoreScheduler:
    """Embedded cores shared between ISP sampling streams and background FTL work."""

    def __init__(self, firmware_cores: int = 2, core_sample_rate: float = 1e7,
                 ftl_load: float = 0.2):
        if firmware_cores < 1:
            raise ValueError("firmware_cores must be >= 1")
        if not 0 <= ftl_load < 1:
            raise ValueError("ftl_load must be in [0, 1)")
        self.firmware_cores = firmware_cores
        self.core_sample_rate = core_sample_rate
        self.ftl_load = ftl_load
        self._streams: dict[int, int] = {}

    @classmethod
    def for_config(cls, config: SsdConfig) -> "CoreScheduler":
        return cls(config.firmware_cores, config.core_sample_rate, config.ftl_load)

    @property
    def active_streams(self) -> int:
        return len(self._streams)

    def acquire(self, stream: int) -> None:
        self._streams[stream] = self._streams.get(stream, 0) + 1

    def release(self, stream: int) -> None:
        n = self._streams.get(stream, 0) - 1
        if n > 0:
            self._streams[stream] = n
        else:
            self._streams.pop(stream, None)

    def rate(self) -> float:
        return contention_slowdown(max(1, self.active_streams), self)


def contention_slowdown(active_streams: int, scheduler: CoreScheduler) -> float:
    """Sampling rate (IDs per second) seen by one stream when ``active_streams`` contend."""
    if active_streams < 1:
        raise ValueError("active_streams must be >= 1")
    full = scheduler.firmware_cores * scheduler.core_sample_rate * (1 - scheduler.ftl_load)
    return full / max(1.0, active_streams / scheduler.firmware_cores)


# --- return payload -------------------------------------------------------------

PAYLOAD_HEAD = struct.Struct("<IIHHI")  # request id, target count, layers, flags, slot count


def encode_payload(request_id: int, target_count: int, hops: Sequence[tuple[np.ndarray, np.ndarray]],
                   flags: int = 0) -> bytes:
    """Header, then per hop and per parent slot a u16 count followed by that many u64 IDs."""
    total_slots = sum(len(c) for c, _ in hops)
    head = PAYLOAD_HEAD.pack(request_id, target_count, len(hops), flags, total_slots)
    parts = [head]
    for counts, ids in hops:
        counts = np.asarray(counts, dtype=np.int64)
        size = 2 * len(counts) + 8 * len(ids)
        out = np.zeros(size, dtype=np.uint8)
        if len(counts):
            block = 2 + 8 * counts
            off = np.concatenate(([0], np.cumsum(block)[:-1]))
            out[off] = counts & 0xFF
            out[off + 1] = counts >> 8
            if len(ids):
                slot_of = np.repeat(np.arange(len(counts)), counts)
                first = np.concatenate(([0], np.cumsum(counts)[:-1]))
                within = np.arange(len(ids)) - first[slot_of]
                dest = off[slot_of] + 2 + 8 * within
                raw = np.ascontiguousarray(ids, dtype="<u8").view(np.uint8).reshape(-1, 8)
                out[dest[:, None] + np.arange(8)] = raw
        parts.append(out.tobytes())
    return b"".join(parts)


class PayloadError(ValueError):
    pass


def _parse_hop(buf: bytes, arr: np.ndarray, off: int, nslots: int) -> tuple[np.ndarray, np.ndarray, int]:
    counts = np.empty(nslots, dtype=np.int64)
    starts = np.empty(nslots, dtype=np.int64)
    end = len(buf)
    for i in range(nslots):
        if off + 2 > end:
            raise PayloadError("payload truncated")
        c = buf[off] | (buf[off + 1] << 8)
        counts[i] = c
        starts[i] = off + 2
        off += 2 + 8 * c
    if off > end:
        raise PayloadError("payload truncated")
    n = int(counts.sum())
    if n == 0:
        return counts, np.zeros(0, dtype=np.int64), off
    first = np.concatenate(([0], np.cumsum(counts)[:-1]))
    slot_of = np.repeat(np.arange(nslots), counts)
    pos = starts[slot_of] + 8 * (np.arange(n) - first[slot_of])
    ids = np.ascontiguousarray(arr[pos[:, None] + np.arange(8)]).view("<u8").ravel()
    return counts, ids.astype(np.int64), off


def decode_payload(payload: bytes, targets, random_walk: bool = False,
                   walks_per_target: int = 1) -> tuple[int, Subgraph]:
    """Host-side decode: rebuilds the per-hop parent lists and returns (request id, Subgraph)."""
    if len(payload) < PAYLOAD_HEAD.size:
        raise PayloadError("payload shorter than header")
    rid, tcount, layers, _flags, total_slots = PAYLOAD_HEAD.unpack_from(payload)
    targets = np.asarray(targets, dtype=np.int64)
    if tcount != len(targets):
        raise PayloadError(f"payload has {tcount} targets, expected {len(targets)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    off = PAYLOAD_HEAD.size
    slots = np.repeat(targets, walks_per_target) if random_walk else unique_in_order(targets)
    out_layers = []
    seen = 0
    for _ in range(layers):
        counts, ids, off = _parse_hop(payload, arr, off, len(slots))
        seen += len(slots)
        parents = np.repeat(slots, counts)
        out_layers.append((parents, ids))
        slots = ids if random_walk else unique_in_order(ids)
    if off != len(payload) or seen != total_slots:
        raise PayloadError("payload length does not match its slot structure")
    sampled = unique_in_order(np.concatenate([targets] + [c for _, c in out_layers]))
    return rid, Subgraph(targets, out_layers, sampled)


# --- the firmware ----------------------------------------------------------------


@dataclass
class FirmwareStats:
    commands: int = 0
    rejected: int = 0
    capacity_failures: int = 0
    records_translated: int = 0
    ids_sampled: int = 0
    bytes_returned: int = 0


class IspFirmware:
    """ISP control unit, subgraph generator, and polling scheduler of one device."""

    def __init__(self, ssd: SsdModel, image: GraphImage, scheduler: CoreScheduler | None = None,
                 record: bool = False):
        self.ssd = ssd
        self.config = ssd.config
        self.image = image
        self.scheduler = scheduler or CoreScheduler.for_config(ssd.config)
        self.flash_queue = PendingFlashQueue(ssd.config.channels, record=record)
        self.subgraph_buffer = PendingSubgraphBuffer(ssd.config.subgraph_buffer_bytes)
        self.stats = FirmwareStats()
        self._ids = itertools.count()
        self._ready: list[IspRequest] = []
        self._work: dict[int, dict] = {}

    # step 1-2: receive and translate ----------------------------------------
    def handle_isp_command(self, cmd: NvmeCommand, at: float, stream: int = 0) -> IspRequest:
        self.stats.commands += 1
        req = IspRequest(next(self._ids), stream, at)
        if not cmd.isp_flag or cmd.payload is None:
            return self._reject(req, "command is not an ISP request", at)
        t = self.ssd.dma_transfer(at, len(cmd.payload), HOST_TO_SSD)
        req.advance(RequestState.RECEIVED, t)
        try:
            blob = decode_nsconfig(cmd.payload)
            self._check_blob(blob)
        except (NsConfigError, IndexError) as exc:
            return self._reject(req, str(exc), t)
        req.blob = blob
        rec = blob.records
        nodes = rec["node"].astype(np.int64)
        start = rec["lba"].astype(np.int64) * self.config.logical_block_bytes + rec["offset"]
        count = rec["count"].astype(np.int64)
        if not blob.random_walk:
            keep = _first_occurrence(nodes)
            nodes, start, count = nodes[keep], start[keep], count[keep]
        t += len(rec) * self.config.translate_us_per_record
        self.stats.records_translated += len(rec)
        self.flash_queue.push(self._pages(start, count, blob.id_width)[0], req.request_id,
                              self._page_owner(start, count, blob.id_width, nodes))
        req.advance(RequestState.TRANSLATED, t)
        self.scheduler.acquire(stream)
        self._work[req.request_id] = {"nodes": nodes, "start": start, "count": count}
        return req

    def _reject(self, req: IspRequest, why: str, t: float) -> IspRequest:
        self.stats.rejected += 1
        req.error = why
        req.advance(RequestState.FAILED, t)
        req.completed_at = t
        return req

    def _check_blob(self, blob: NsConfigBlob) -> None:
        if blob.target_count == 0:
            raise NsConfigError("blob has no targets")
        if blob.random_walk and blob.fanouts and len(set(blob.fanouts)) != 1:
            raise NsConfigError("random-walk blobs carry one walks-per-target value per step")
        end = (blob.records["lba"].astype(np.int64) * self.config.logical_block_bytes
               + blob.records["offset"] + blob.records["count"].astype(np.int64) * blob.id_width)
        if int(end.max()) > self.image.size:
            raise NsConfigError("record points past the end of the graph image")
        for lba in (int(blob.records["lba"].min()), int(blob.records["lba"].max())):
            self.ssd.ftl_translate(lba)

    # geometry -----------------------------------------------------------------
    def _pages(self, start: np.ndarray, count: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Flash pages covering each non-empty byte range, and how many per range."""
        P = self.config.flash_page_bytes
        live = count > 0
        s, e = start[live], start[live] + count[live] * width
        first = s // P
        n = (e - 1) // P - first + 1
        base = np.repeat(first - np.concatenate(([0], np.cumsum(n)[:-1])), n)
        return base + np.arange(int(n.sum())), n

    def _page_owner(self, start, count, width, nodes) -> np.ndarray:
        _, n = self._pages(start, count, width)
        return np.repeat(nodes[count > 0], n)

    def _indptr_pages(self, nodes: np.ndarray) -> np.ndarray:
        P = self.config.flash_page_bytes
        lo = (HEADER_BYTES + 8 * nodes) // P
        hi = (HEADER_BYTES + 8 * nodes + 15) // P
        return unique_in_order(np.stack([lo, hi], axis=1).ravel())

    # steps 3-4: flash reads and sampling -----------------------------------------
    def service_flash_and_sample(self, req: IspRequest) -> IspRequest:
        """Run a translated request to Ready without interleaving other requests."""
        for _ in self._service(req):
            pass
        return req

    def _service(self, req: IspRequest) -> Generator[float, None, None]:
        if req.state is not RequestState.TRANSLATED:
            raise StateError(f"request {req.request_id} is {req.state.name}, not TRANSLATED")
        work = self._work.pop(req.request_id)
        blob = req.blob
        width = blob.id_width
        ssd, cfg = self.ssd, self.config
        t = req.time
        try:
            self.subgraph_buffer.reserve(req.request_id, PAYLOAD_HEAD.size)
        except SubgraphBufferOverflow as exc:
            yield from self._fail(req, str(exc), t)
            return
        nodes, start, count = work["nodes"], work["start"], work["count"]
        if blob.random_walk:
            owner = np.repeat(nodes, blob.fanouts[0]) if blob.fanouts else nodes
            widx = np.tile(np.arange(blob.fanouts[0] if blob.fanouts else 1, dtype=np.uint64),
                           len(nodes))
            nodes, start, count = (np.repeat(a, blob.fanouts[0]) for a in (nodes, start, count)) \
                if blob.fanouts else (nodes, start, count)
        hops = []
        req.advance(RequestState.READING, t)
        for h, s in enumerate(blob.fanouts):
            gh = blob.hop_base + h
            # flash reads for this hop's edge lists
            if h > 0:
                pages, _ = self._pages(start, count, width)
                self.flash_queue.push(pages, req.request_id, self._page_owner(start, count, width, nodes))
            t = ssd.read_pages(t, self.flash_queue.drain())
            yield t
            if h == 0:
                req.advance(RequestState.SAMPLING, t)
            # sampling on the embedded cores
            live = count > 0
            if s == 0 and not blob.random_walk:
                cnt = np.zeros(len(nodes), dtype=np.int64)
                ids = np.zeros(0, dtype=np.int64)
            elif blob.random_walk:
                r = stream_values(derive_keys(blob.rng_seed_base, gh, owner[live]), widx[live])
                off = (r % count[live].astype(np.uint64)).astype(np.int64)
                ids = self.image.gather(start[live] + off * width, width)
                cnt = live.astype(np.int64)
            elif blob.with_replacement:
                lc = count[live]
                keys = np.repeat(derive_keys(blob.rng_seed_base, gh, nodes[live]), s)
                ctr = np.tile(np.arange(s, dtype=np.uint64), len(lc))
                off = (stream_values(keys, ctr) % np.repeat(lc, s).astype(np.uint64)).astype(np.int64)
                ids = self.image.gather(np.repeat(start[live], s) + off * width, width)
                cnt = np.where(live, s, 0)
            else:
                cnt, ids = self._sample_without_replacement(blob, gh, s, nodes, start, count)
            n_ids = len(ids)
            try:
                self.subgraph_buffer.reserve(req.request_id, 2 * len(nodes) + 8 * n_ids)
            except SubgraphBufferOverflow as exc:
                yield from self._fail(req, str(exc), t)
                return
            t += n_ids / self.scheduler.rate() * 1e6
            req.ids_sampled += n_ids
            self.stats.ids_sampled += n_ids
            hops.append((cnt, ids))
            yield t
            if h + 1 == len(blob.fanouts):
                break
            # follow-up: locate the next hop's edge lists through the on-device indptr
            if blob.random_walk:
                owner, widx = owner[live], widx[live]
                nodes = ids
                look = unique_in_order(ids)
            else:
                nodes = look = unique_in_order(ids)
            t = ssd.read_pages(t, self._indptr_pages(look))
            lo = self.image.gather(HEADER_BYTES + 8 * nodes, 8)
            hi = self.image.gather(HEADER_BYTES + 8 * nodes + 8, 8)
            start = blob.indices_offset + lo * width
            count = hi - lo
            t += len(look) * cfg.translate_us_per_record
            self.stats.records_translated += len(look)
            yield t
        flags = 1 if blob.random_walk else 0
        req.payload = encode_payload(req.request_id, blob.target_count, hops, flags)
        req.advance(RequestState.READY, t)
        req.ready_at = t
        self._ready.append(req)

    def _sample_without_replacement(self, blob, gh, s, nodes, start, count):
        width = blob.id_width
        cnt = np.zeros(len(nodes), dtype=np.int64)
        out = []
        for i, (v, st, deg) in enumerate(zip(nodes.tolist(), start.tolist(), count.tolist())):
            if deg == 0 or s == 0:
                continue
            raw = self.image.read(st, deg * width)
            lst = np.frombuffer(raw, dtype="<u4" if width == 4 else "<u8").astype(np.int64)
            if s >= deg:
                out.append(lst)
                cnt[i] = deg
                continue
            key = derive_key(blob.rng_seed_base, gh, v)
            draws = stream_values(np.full(deg - s, key, dtype=np.uint64),
                                  np.arange(deg - s, dtype=np.uint64))
            res = list(range(s))
            for k, r in enumerate(draws.tolist()):
                j = r % (s + k + 1)
                if j < s:
                    res[j] = s + k
            out.append(lst[res])
            cnt[i] = s
        ids = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
        return cnt, ids

    def _fail(self, req: IspRequest, why: str, t: float):
        self.stats.capacity_failures += 1
        req.capacity_error = True
        self.subgraph_buffer.release(req.request_id)
        self.scheduler.release(req.stream)
        req.error = why
        req.advance(RequestState.FAILED, t)
        req.completed_at = t
        yield t

    # step 5: polling and return ---------------------------------------------------
    def next_poll(self, t: float) -> float:
        p = self.config.poll_interval_us
        return math.ceil(t / p - 1e-9) * p

    def poll_and_return(self, at: float) -> list[IspRequest]:
        """Return every request that is Ready by ``at``; a no-op when none are."""
        due = [r for r in self._ready if r.ready_at <= at]
        for r in due:
            self._return(r, at)
        return due

    def _return(self, req: IspRequest, at: float) -> float:
        self._ready.remove(req)
        t = self.ssd.dma_transfer(at, len(req.payload), SSD_TO_HOST)
        self.stats.bytes_returned += len(req.payload)
        self.subgraph_buffer.release(req.request_id)
        self.scheduler.release(req.stream)
        req.advance(RequestState.RETURNED, t)
        req.completed_at = t
        return t

    # whole-command driver ----------------------------------------------------------
    def execute(self, cmd: NvmeCommand, at: float, stream: int = 0) -> Generator[float, None, IspRequest]:
        """Process one command end to end, yielding at every phase boundary.

        Suitable for a :class:`~ispsim.storage.VirtualClock` process via
        ``yield from``; the generator's return value is the finished request.
        """
        req = self.handle_isp_command(cmd, at, stream)
        yield req.time
        if not req.ok:
            return req
        yield from self._service(req)
        if not req.ok:
            return req
        tick = self.next_poll(req.ready_at)
        yield tick
        yield self._return(req, tick)
        return req

    def run_command(self, cmd: NvmeCommand, at: float = 0.0, stream: int = 0) -> IspRequest:
        """Synchronous convenience wrapper around :meth:`execute`."""
        gen = self.execute(cmd, at, stream)
        try:
            while True:
                next(gen)
        except StopIteration as done:
            return done.value


def _first_occurrence(a: np.ndarray) -> np.ndarray:
    _, first = np.unique(a, return_index=True)
    return np.sort(first)
