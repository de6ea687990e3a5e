"""Host-side access paths to the on-SSD edge lists, NVMe command records, and
the NSCONFIG codec.

The CSR file is laid out on the device starting at LBA 0. ``indptr`` is
host-resident on every path; only edge-list bytes are fetched from the SSD.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass
from typing import Generator

import numpy as np

from .graph import HEADER, HEADER_BYTES, MAGIC, CsrGraph
from .sampler import SamplingConfig
from .storage import SSD_TO_HOST, LruCache, SsdConfig, SsdModel


class AccessPath(str, enum.Enum):
    IN_MEMORY = "in_memory"
    MMAP = "mmap"
    DIRECT_IO = "direct_io"
    ISP = "isp"

    @classmethod
    def parse(cls, text: str) -> "AccessPath":
        key = text.strip().lower().replace("-", "_")
        aliases = {"inmemory": "in_memory", "dram": "in_memory", "mmappagecache": "mmap",
                   "directio": "direct_io", "direct": "direct_io"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class HostConfig:
    dram_read_us_per_block: float = 0.05
    page_cache_pages: int | None = None  # None: 10% of the graph file's blocks
    page_fault_us: float = 30.0
    scratchpad_blocks: int = 1024
    subgraph_build_us_per_id: float = 0.2  # host CPU to assemble a mini-batch, every path
    feature_gather_gbps: float = 10.0
    gpu_link_gbps: float = 12.0

    def __post_init__(self):
        for name in ("dram_read_us_per_block", "page_fault_us", "scratchpad_blocks",
                     "subgraph_build_us_per_id"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.page_cache_pages is not None and self.page_cache_pages < 0:
            raise ValueError("page_cache_pages must be >= 0")
        if self.feature_gather_gbps <= 0 or self.gpu_link_gbps <= 0:
            raise ValueError("link rates must be > 0")

    def resolved_page_cache_pages(self, layout: "GraphFileLayout") -> int:
        if self.page_cache_pages is not None:
            return self.page_cache_pages
        return math.ceil(0.1 * layout.total_blocks)


# --- file layout and device image -------------------------------------------


class GraphFileLayout:
    """Byte/LBA geometry of a CSR file placed at LBA 0."""

    def __init__(self, indptr: np.ndarray, id_width: int, block_bytes: int = 4096):
        self.indptr = indptr
        self.id_width = id_width
        self.block_bytes = block_bytes
        self.num_nodes = len(indptr) - 1
        self.indices_offset = HEADER_BYTES + 8 * (self.num_nodes + 1)
        self.file_bytes = self.indices_offset + id_width * int(indptr[-1])

    @classmethod
    def of(cls, graph: CsrGraph, block_bytes: int = 4096) -> "GraphFileLayout":
        return cls(graph.indptr, graph.id_width, block_bytes)

    @property
    def total_blocks(self) -> int:
        return -(-self.file_bytes // self.block_bytes)

    def locate_edge_list(self, v: int) -> tuple[int, int, int]:
        """(start LBA, byte offset within that block, byte length) of v's edge list."""
        if not 0 <= v < self.num_nodes:
            raise IndexError(f"node {v} out of range [0, {self.num_nodes})")
        start = self.indices_offset + int(self.indptr[v]) * self.id_width
        length = int(self.indptr[v + 1] - self.indptr[v]) * self.id_width
        return start // self.block_bytes, start % self.block_bytes, length

    def covering_blocks(self, v: int) -> range:
        lba, off, length = self.locate_edge_list(v)
        if length == 0:
            return range(lba, lba)
        return range(lba, lba + (off + length + self.block_bytes - 1) // self.block_bytes)

    def block_spans(self, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (first block, block count) for each node; count 0 for empty lists."""
        lo = self.indptr[nodes]
        hi = self.indptr[nodes + 1]
        start = self.indices_offset + lo * self.id_width
        end = self.indices_offset + hi * self.id_width
        first = start // self.block_bytes
        count = np.where(hi > lo, (end - 1) // self.block_bytes - first + 1, 0)
        return first, count


class GraphImage:
    """Byte-addressable image of the CSR file as stored on the device."""

    def __init__(self, graph: CsrGraph | None = None, path: str | os.PathLike | None = None):
        if (graph is None) == (path is None):
            raise ValueError("give exactly one of graph or path")
        self._mm = None
        if path is not None:
            self._mm = np.memmap(path, dtype=np.uint8, mode="r")
            self.size = len(self._mm)
            return
        self.graph = graph
        self.layout = GraphFileLayout.of(graph)
        self._header = HEADER.pack(MAGIC, graph.num_nodes, graph.num_edges, graph.id_width)
        self._id_dtype = np.dtype("<u4") if graph.id_width == 4 else np.dtype("<u8")
        self.size = self.layout.file_bytes

    def gather(self, addrs: np.ndarray, width: int) -> np.ndarray:
        """Little-endian unsigned integers of ``width`` bytes at each byte address."""
        addrs = np.asarray(addrs, dtype=np.int64)
        if len(addrs) == 0:
            return np.zeros(0, dtype=np.int64)
        if addrs.min() < 0 or addrs.max() + width > self.size:
            raise IndexError("gather outside device image")
        dtype = np.dtype("<u4") if width == 4 else np.dtype("<u8")
        if self._mm is not None:
            raw = self._mm[addrs[:, None] + np.arange(width)]
            return np.ascontiguousarray(raw).view(dtype).ravel().astype(np.int64)
        lay = self.layout
        if addrs.min() >= lay.indices_offset and width == lay.id_width:
            rel = addrs - lay.indices_offset
            if not (rel % width).any():
                return np.asarray(self.graph.indices[rel // width], dtype=np.int64)
        if addrs.max() + width <= lay.indices_offset and addrs.min() >= HEADER_BYTES and width == 8:
            rel = addrs - HEADER_BYTES
            if not (rel % 8).any():
                return np.asarray(self.graph.indptr[rel // 8], dtype=np.int64)
        vals = [int.from_bytes(self.read(int(a), width), "little") for a in addrs.tolist()]
        return np.array(vals, dtype=np.uint64).astype(np.int64)

    def read(self, offset: int, nbytes: int) -> bytes:
        if offset < 0 or offset + nbytes > self.size:
            raise IndexError(f"read [{offset}, {offset + nbytes}) outside image of {self.size} bytes")
        if self._mm is not None:
            return bytes(self._mm[offset : offset + nbytes])
        end = offset + nbytes
        out = []
        if offset < HEADER_BYTES:
            out.append(self._header[offset : min(end, HEADER_BYTES)])
        ip_lo, ip_hi = HEADER_BYTES, self.layout.indices_offset
        if offset < ip_hi and end > ip_lo:
            out.append(_slice_array(self.graph.indptr, np.dtype("<u8"), ip_lo,
                                    max(offset, ip_lo), min(end, ip_hi)))
        if end > ip_hi:
            out.append(_slice_array(self.graph.indices, self._id_dtype, ip_hi,
                                    max(offset, ip_hi), end))
        return b"".join(out)


def _slice_array(arr: np.ndarray, dtype: np.dtype, base: int, lo: int, hi: int) -> bytes:
    w = dtype.itemsize
    first = (lo - base) // w
    last = (hi - base + w - 1) // w
    raw = np.asarray(arr[first:last]).astype(dtype).tobytes()
    skip = (lo - base) - first * w
    return raw[skip : skip + (hi - lo)]


# --- NVMe commands and NSCONFIG ------------------------------------------------


@dataclass
class NvmeCommand:
    opcode: str
    lba: int
    length_blocks: int
    isp_flag: bool = False
    payload: bytes | None = None  # host-memory buffer the device DMAs (NSCONFIG slice)
    cmd_id: int = 0

    def __post_init__(self):
        if self.isp_flag and self.opcode != "write":
            raise ValueError("only the subgraph-generation write command carries the ISP bit")


NSCF_MAGIC = b"NSCF"
NSCF_VERSION = 1
NSCF_HEAD = struct.Struct("<4sHHIQQBBH")  # 32 bytes
RECORD_DTYPE = np.dtype([("node", "<u8"), ("lba", "<u8"), ("offset", "<u2"), ("count", "<u8")])
FLAG_WITH_REPLACEMENT = 0x1
FLAG_RANDOM_WALK = 0x2


class NsConfigError(ValueError):
    pass


@dataclass(eq=False)
class NsConfigBlob:
    """Neighbor-sampling configuration shipped to the device.

    Layout (little-endian): magic "NSCF", u16 version, u16 layer_count,
    u32 target_count, u64 rng_seed_base, u64 indices_offset, u8 id_width,
    u8 flags, u16 hop_base; then layer_count u16 fanouts padded to a 4-byte
    boundary; then target_count packed 26-byte records
    {u64 node_id, u64 start_lba, u16 byte_offset, u64 edge_count}.
    """

    fanouts: tuple[int, ...]
    rng_seed_base: int
    records: np.ndarray
    indices_offset: int
    id_width: int
    flags: int = FLAG_WITH_REPLACEMENT
    hop_base: int = 0
    version: int = NSCF_VERSION

    @property
    def target_count(self) -> int:
        return len(self.records)

    @property
    def layer_count(self) -> int:
        return len(self.fanouts)

    @property
    def with_replacement(self) -> bool:
        return bool(self.flags & FLAG_WITH_REPLACEMENT)

    @property
    def random_walk(self) -> bool:
        return bool(self.flags & FLAG_RANDOM_WALK)

    @property
    def nbytes(self) -> int:
        return _fanout_end(self.layer_count) + RECORD_DTYPE.itemsize * self.target_count

    def slice(self, lo: int, hi: int) -> "NsConfigBlob":
        return NsConfigBlob(self.fanouts, self.rng_seed_base, self.records[lo:hi],
                            self.indices_offset, self.id_width, self.flags, self.hop_base,
                            self.version)

    def encode(self) -> bytes:
        head = NSCF_HEAD.pack(NSCF_MAGIC, self.version, self.layer_count, self.target_count,
                              self.rng_seed_base, self.indices_offset, self.id_width,
                              self.flags, self.hop_base)
        fan = struct.pack(f"<{self.layer_count}H", *self.fanouts)
        pad = b"\0" * (_fanout_end(self.layer_count) - NSCF_HEAD.size - len(fan))
        return head + fan + pad + np.ascontiguousarray(self.records, dtype=RECORD_DTYPE).tobytes()

    def __eq__(self, other):
        if not isinstance(other, NsConfigBlob):
            return NotImplemented
        return (self.fanouts == other.fanouts and self.rng_seed_base == other.rng_seed_base
                and self.indices_offset == other.indices_offset and self.id_width == other.id_width
                and self.flags == other.flags and self.hop_base == other.hop_base
                and self.version == other.version
                and np.array_equal(self.records, other.records))


def _fanout_end(layers: int) -> int:
    end = NSCF_HEAD.size + 2 * layers
    return (end + 3) & ~3


def decode_nsconfig(data: bytes) -> NsConfigBlob:
    if len(data) < NSCF_HEAD.size:
        raise NsConfigError("truncated NSCONFIG header")
    magic, version, layers, count, seed, ioff, width, flags, hop_base = NSCF_HEAD.unpack_from(data)
    if magic != NSCF_MAGIC:
        raise NsConfigError(f"bad NSCONFIG magic {magic!r}")
    if version != NSCF_VERSION:
        raise NsConfigError(f"unsupported NSCONFIG version {version}")
    if width not in (4, 8):
        raise NsConfigError(f"bad id_width {width}")
    start = _fanout_end(layers)
    if len(data) != start + RECORD_DTYPE.itemsize * count:
        raise NsConfigError(f"NSCONFIG size {len(data)} does not match {count} records")
    fanouts = struct.unpack_from(f"<{layers}H", data, NSCF_HEAD.size)
    records = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=start).copy()
    return NsConfigBlob(tuple(fanouts), seed, records, ioff, width, flags, hop_base, version)


def make_records(layout: GraphFileLayout, nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    rec = np.empty(len(nodes), dtype=RECORD_DTYPE)
    lo = layout.indptr[nodes]
    start = layout.indices_offset + lo * layout.id_width
    rec["node"] = nodes
    rec["lba"] = start // layout.block_bytes
    rec["offset"] = start % layout.block_bytes
    rec["count"] = layout.indptr[nodes + 1] - lo
    return rec


def encode_nsconfig(layout: GraphFileLayout, targets, config: SamplingConfig, rng_seed_base: int,
                    hop_base: int = 0) -> bytes:
    return build_nsconfig(layout, targets, config, rng_seed_base, hop_base).encode()


def build_nsconfig(layout: GraphFileLayout, targets, config: SamplingConfig, rng_seed_base: int,
                   hop_base: int = 0, flags: int | None = None) -> NsConfigBlob:
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise NsConfigError("no targets to offload")
    if flags is None:
        flags = FLAG_WITH_REPLACEMENT if config.with_replacement else 0
    return NsConfigBlob(config.fanouts, rng_seed_base, make_records(layout, targets),
                        layout.indices_offset, layout.id_width, flags, hop_base)


def submit_isp_request(blob: NsConfigBlob, coalesce_granularity: int,
                       ssd: SsdConfig) -> tuple[list[NvmeCommand], float]:
    """Split the blob into ``ceil(targets / granularity)`` ISP write commands.

    Returns the commands and their total host-side submission cost.
    """
    if coalesce_granularity < 1:
        raise ValueError("coalesce_granularity must be >= 1")
    cmds = []
    for i, lo in enumerate(range(0, blob.target_count, coalesce_granularity)):
        part = blob.slice(lo, lo + coalesce_granularity).encode()
        nblk = -(-len(part) // ssd.logical_block_bytes)
        cmds.append(NvmeCommand("write", 0, nblk, isp_flag=True, payload=part, cmd_id=i))
    return cmds, len(cmds) * ssd.nvme_cmd_overhead_us


# --- host readers ----------------------------------------------------------------


@dataclass
class ReaderStats:
    reads: int = 0
    block_hits: int = 0
    block_misses: int = 0
    nvme_commands: int = 0
    scratchpad_overflows: int = 0
    bytes_to_host: int = 0


class _Reader:
    """Edge-list reader for one access path.

    :meth:`steps` is a generator that yields the virtual time just before each
    access to a shared device resource, so a clock-driven caller can interleave
    concurrent workers in time order; its return value is the completion time.
    :meth:`charge_blocks` runs it without interleaving.
    """

    def __init__(self, layout: GraphFileLayout, host: HostConfig, image: GraphImage | None = None):
        self.layout = layout
        self.host = host
        self.image = image
        self.stats = ReaderStats()

    def steps(self, first: int, count: int, at: float) -> Generator[float, None, float]:
        raise NotImplementedError

    def charge_blocks(self, first: int, count: int, at: float) -> float:
        gen = self.steps(first, count, at)
        try:
            while True:
                next(gen)
        except StopIteration as done:
            return done.value

    def charge(self, v: int, at: float) -> float:
        blocks = self.layout.covering_blocks(v)
        return self.charge_blocks(blocks.start, len(blocks), at)

    def read(self, v: int, at: float = 0.0) -> tuple[np.ndarray, float]:
        """Edge list decoded from the device image, plus the completion time."""
        done = self.charge(v, at)
        lba, off, length = self.layout.locate_edge_list(v)
        if self.image is None:
            raise ValueError("reader has no device image")
        raw = self.image.read(lba * self.layout.block_bytes + off, length)
        dtype = "<u4" if self.layout.id_width == 4 else "<u8"
        return np.frombuffer(raw, dtype=dtype).astype(np.int64), done

    def begin_batch(self) -> None:
        pass


class InMemoryReader(_Reader):
    def steps(self, first, count, at):
        self.stats.reads += 1
        return at + count * self.host.dram_read_us_per_block
        yield  # pragma: no cover - makes this a generator


class MmapReader(_Reader):
    """mmap through the OS page cache: hits at DRAM cost, misses fault and read one block."""

    def __init__(self, layout, host, ssd: SsdModel, cache: LruCache, image=None):
        super().__init__(layout, host, image)
        self.ssd = ssd
        self.cache = cache

    def steps(self, first, count, at):
        st = self.stats
        st.reads += 1
        t = at
        cache, ssd = self.cache, self.ssd
        hit_us, fault_us = self.host.dram_read_us_per_block, self.host.page_fault_us
        bb = self.layout.block_bytes
        for blk in range(first, first + count):
            ready = cache.lookup(blk)
            if ready is None:
                t += fault_us
                yield t
                # another worker may have faulted the same page in meanwhile
                ready = cache.touch(blk)
            if ready is not None:
                t = (ready if ready > t else t) + hit_us
                st.block_hits += 1
                continue
            st.block_misses += 1
            done, _ = ssd.read_blocks(t, (blk,))
            yield done
            t = ssd.dma_transfer(done, bb, SSD_TO_HOST)
            st.bytes_to_host += bb
            cache.insert(blk, t)
        return t


class DirectIoReader(_Reader):
    """O_DIRECT reads into a per-worker scratchpad that lives for one mini-batch."""

    def __init__(self, layout, host, ssd: SsdModel, image=None):
        super().__init__(layout, host, image)
        self.ssd = ssd
        self.scratchpad: set[int] = set()

    def begin_batch(self) -> None:
        self.scratchpad.clear()

    def steps(self, first, count, at):
        st = self.stats
        st.reads += 1
        pad = self.scratchpad
        missing = [b for b in range(first, first + count) if b not in pad]
        st.block_hits += count - len(missing)
        if not missing:
            return at
        st.block_misses += len(missing)
        t = at
        ssd, bb = self.ssd, self.layout.block_bytes
        overhead = ssd.config.nvme_cmd_overhead_us
        cap = self.host.scratchpad_blocks
        for run in _contiguous_runs(missing):
            st.nvme_commands += 1
            t += overhead
            yield t
            done, _ = ssd.read_blocks(t, run)
            yield done
            t = ssd.dma_transfer(done, bb * len(run), SSD_TO_HOST)
            st.bytes_to_host += bb * len(run)
            for b in run:
                if len(pad) < cap:
                    pad.add(b)
                else:
                    st.scratchpad_overflows += 1
        return t


def _contiguous_runs(blocks: list[int]) -> list[list[int]]:
    runs = [[blocks[0]]]
    for b in blocks[1:]:
        if b == runs[-1][-1] + 1:
            runs[-1].append(b)
        else:
            runs.append([b])
    return runs
