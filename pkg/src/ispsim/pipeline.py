"""End-to-end producer/consumer training pipeline on a virtual clock.

Workers produce mini-batch subgraphs over one access path; a single GPU
consumer trains on them in batch order with a fixed service time. Sampling
results are computed up front per batch (they do not depend on timing); the
edge-list reads each batch performs are then replayed through the path's cost
model as simulated events. The ISP path instead runs the firmware model on
the device image and decodes the returned payloads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .firmware import CoreScheduler, IspFirmware, decode_payload
from .graph import CsrGraph
from .hostio import (
    FLAG_RANDOM_WALK,
    FLAG_WITH_REPLACEMENT,
    AccessPath,
    DirectIoReader,
    GraphFileLayout,
    GraphImage,
    HostConfig,
    InMemoryReader,
    MmapReader,
    NsConfigBlob,
    make_records,
    submit_isp_request,
)
from .rng import CounterRng, batch_seed
from .sampler import (
    ArrayAccess,
    RandomWalkConfig,
    SamplingConfig,
    Subgraph,
    build_subgraph,
    random_walk_sample,
    unique_in_order,
)
from .storage import LruCache, SsdConfig, SsdModel, VirtualClock

STAGES = ("sampling", "feature_gather", "host_transfer", "training")


@dataclass(frozen=True)
class PipelineConfig:
    num_workers: int = 12
    queue_capacity: int | None = None  # None: 2 x num_workers
    gpu_batch_time_us: float = 8000.0
    batches: int = 100
    feature_bytes_per_node: int = 0
    access_path: AccessPath = AccessPath.ISP
    coalesce_granularity: int | None = None  # targets per ISP command; None: whole batch
    isp_per_hop_roundtrip: bool = False
    batch_overhead_us: float = 0.0  # fixed host CPU time per batch on every path

    def __post_init__(self):
        if not isinstance(self.access_path, AccessPath):
            object.__setattr__(self, "access_path", AccessPath.parse(str(self.access_path)))
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.batches < 1:
            raise ValueError("batches must be >= 1")
        if self.gpu_batch_time_us < 0 or self.batch_overhead_us < 0 or self.feature_bytes_per_node < 0:
            raise ValueError("times and sizes must be >= 0")
        if self.coalesce_granularity is not None and self.coalesce_granularity < 1:
            raise ValueError("coalesce_granularity must be >= 1")

    @property
    def resolved_queue_capacity(self) -> int:
        return self.queue_capacity if self.queue_capacity is not None else 2 * self.num_workers


@dataclass
class RunMetrics:
    access_path: str
    total_time_us: float
    gpu_idle_fraction: float
    stage_us: dict[str, float]
    bytes_ssd_to_host: int
    bytes_flash_read: int
    nvme_commands: int
    subgraphs_produced: int
    batches: int
    num_workers: int
    ids_sampled: int = 0
    isp_retries: int = 0
    page_cache_hit_rate: float | None = None
    workload: str = ""
    subgraph_digest: str = ""

    CSV_COLUMNS = ("access_path", "total_time_us", "gpu_idle_fraction", "sampling_us",
                   "feature_gather_us", "host_transfer_us", "training_us", "bytes_ssd_to_host",
                   "bytes_flash_read", "nvme_commands", "subgraphs_produced", "batches",
                   "num_workers", "ids_sampled", "isp_retries", "subgraph_digest")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> dict:
        d = self.to_dict()
        for s in STAGES:
            d[f"{s}_us"] = self.stage_us[s]
        return {k: d[k] for k in self.CSV_COLUMNS}

    @property
    def batch_sampling_us(self) -> float:
        """Mean sampling-stage latency per mini-batch."""
        return self.stage_us["sampling"] / self.batches


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class SpeedupReport:
    speedup: float
    sampling_speedup: float
    byte_reduction: float | None
    stage_delta_us: dict[str, float]


def compare_paths(base: RunMetrics, other: RunMetrics) -> SpeedupReport:
    """How much faster ``other`` is than ``base`` on the same workload."""
    if base.workload != other.workload:
        raise ComparisonError("runs were made on different workloads")
    byte_red = (base.bytes_ssd_to_host / other.bytes_ssd_to_host
                if other.bytes_ssd_to_host else None)
    samp = (base.stage_us["sampling"] / other.stage_us["sampling"]
            if other.stage_us["sampling"] else math.inf)
    return SpeedupReport(
        base.total_time_us / other.total_time_us if other.total_time_us else math.inf,
        samp,
        byte_red,
        {s: other.stage_us[s] - base.stage_us[s] for s in STAGES},
    )


# --- workload -------------------------------------------------------------------


def batch_targets(num_nodes: int, batch_size: int, batch: int, seed: int) -> np.ndarray:
    """Targets of one mini-batch: consecutive slices of seeded per-epoch permutations."""
    if batch_size > num_nodes:
        raise ValueError(f"batch_size {batch_size} exceeds the {num_nodes} nodes")
    per_epoch = num_nodes // batch_size
    epoch, slot = divmod(batch, per_epoch)
    perm = _epoch_permutation(num_nodes, seed, epoch)
    return perm[slot * batch_size : (slot + 1) * batch_size]


_PERM_CACHE: dict = {}


def _epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    key = (n, seed, epoch)
    perm = _PERM_CACHE.get(key)
    if perm is None:
        if len(_PERM_CACHE) > 4:
            _PERM_CACHE.clear()
        perm = _PERM_CACHE[key] = np.random.default_rng([seed & (2**63 - 1), epoch]).permutation(n)
    return perm


def workload_fingerprint(graph: CsrGraph, sampling, batches: int) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(f"{graph.num_nodes}/{graph.num_edges}/{graph.id_width}/{sampling!r}/{batches}".encode())
    probe = np.linspace(0, graph.num_nodes, num=min(graph.num_nodes + 1, 257)).astype(np.int64)
    h.update(np.ascontiguousarray(graph.indptr[probe]).tobytes())
    return h.hexdigest()


def host_sample(graph: CsrGraph, targets: np.ndarray, sampling, key: int,
                record: bool = False) -> tuple[Subgraph, list[int] | None]:
    access = ArrayAccess(graph, record=record)
    if isinstance(sampling, RandomWalkConfig):
        sg = random_walk_sample(access, targets, sampling, CounterRng(key))
    else:
        sg = build_subgraph(access, targets, sampling, CounterRng(key))
    return sg, access.trace


# --- simulation -----------------------------------------------------------------


class _Run:
    def __init__(self, graph, sampling, ssd_cfg, host, pipe, image):
        self.graph = graph
        self.sampling = sampling
        self.host = host
        self.pipe = pipe
        self.path = pipe.access_path
        self.clock = VirtualClock()
        self.ssd = SsdModel(ssd_cfg)
        self.layout = GraphFileLayout.of(graph, ssd_cfg.logical_block_bytes)
        self.digest = hashlib.blake2b(digest_size=16)
        self.done_at: list[float | None] = [None] * pipe.batches
        self.produced_digest: list[bytes | None] = [None] * pipe.batches
        self.stage = dict.fromkeys(STAGES, 0.0)
        self.consumed = 0
        self.credit = self.clock.signal()
        self.ready = self.clock.signal()
        self.gpu_link_free = 0.0
        self.ids_sampled = 0
        self.isp_commands = 0
        self.isp_retries = 0
        self.readers = []
        self.cache = None
        if self.path is AccessPath.IN_MEMORY:
            self.readers = [InMemoryReader(self.layout, host)]
        elif self.path is AccessPath.MMAP:
            self.cache = LruCache(host.resolved_page_cache_pages(self.layout))
            self.readers = [MmapReader(self.layout, host, self.ssd, self.cache)]
        elif self.path is AccessPath.DIRECT_IO:
            self.readers = [DirectIoReader(self.layout, host, self.ssd)
                            for _ in range(pipe.num_workers)]
        else:
            self.firmware = IspFirmware(self.ssd, image or GraphImage(graph),
                                        CoreScheduler.for_config(ssd_cfg))
        self.walk = isinstance(sampling, RandomWalkConfig)

    # producers ---------------------------------------------------------------
    def worker(self, w: int):
        pipe, clock = self.pipe, self.clock
        cap = pipe.resolved_queue_capacity
        for b in range(w, pipe.batches, pipe.num_workers):
            while b >= self.consumed + cap:
                yield self.credit
            t0 = clock.now
            targets = batch_targets(self.graph.num_nodes, self.sampling.batch_size, b,
                                    self.sampling.seed)
            key = batch_seed(self.sampling.seed, b)
            if pipe.batch_overhead_us:
                yield t0 + pipe.batch_overhead_us
            if self.path is AccessPath.ISP:
                sg = yield from self._isp_batch(w, targets, key)
            else:
                sg = yield from self._host_batch(w, targets, key)
            if self.host.subgraph_build_us_per_id:
                yield clock.now + sg.num_sampled * self.host.subgraph_build_us_per_id
            t1 = clock.now
            self.stage["sampling"] += t1 - t0
            self.ids_sampled += sg.num_sampled
            fbytes = len(sg.sampled_set) * pipe.feature_bytes_per_node
            if fbytes:
                yield t1 + fbytes / (self.host.feature_gather_gbps * 1e3)
            t2 = clock.now
            self.stage["feature_gather"] += t2 - t1
            xfer = 16 * sg.num_sampled + fbytes
            start = max(t2, self.gpu_link_free)
            self.gpu_link_free = start + xfer / (self.host.gpu_link_gbps * 1e3)
            yield self.gpu_link_free
            self.stage["host_transfer"] += clock.now - t2
            self.produced_digest[b] = sg.digest()
            self.done_at[b] = clock.now
            self.ready.notify()

    def _host_batch(self, w: int, targets, key):
        sg, trace = host_sample(self.graph, targets, self.sampling, key, record=True)
        reader = self.readers[w] if len(self.readers) > 1 else self.readers[0]
        reader.begin_batch()
        t = self.clock.now
        if trace:
            first, count = self.layout.block_spans(np.asarray(trace, dtype=np.int64))
            steps = reader.steps
            for f, c in zip(first.tolist(), count.tolist()):
                t = yield from steps(f, c, t)
        yield t
        return sg

    def _isp_blobs(self, records_nodes: np.ndarray, fanouts, key, hop_base: int) -> NsConfigBlob:
        if self.walk:
            flags = FLAG_WITH_REPLACEMENT | FLAG_RANDOM_WALK
        else:
            flags = FLAG_WITH_REPLACEMENT if self.sampling.with_replacement else 0
        return NsConfigBlob(tuple(fanouts), key, make_records(self.layout, records_nodes),
                            self.layout.indices_offset, self.layout.id_width, flags, hop_base)

    def _isp_exchange(self, w: int, blob: NsConfigBlob):
        """Submit one blob as coalesced commands, one at a time; returns decoded parts."""
        ssd_cfg = self.ssd.config
        gran = self.pipe.coalesce_granularity or blob.target_count
        cmds, _ = submit_isp_request(blob, gran, ssd_cfg)
        pending = [(c, blob.slice(i * gran, (i + 1) * gran)) for i, c in enumerate(cmds)]
        parts = []
        while pending:
            cmd, sub = pending.pop(0)
            self.isp_commands += 1
            yield self.clock.now + ssd_cfg.nvme_cmd_overhead_us
            req = yield from self.firmware.execute(cmd, self.clock.now, stream=w)
            if not req.ok:
                if req.capacity_error and sub.target_count > 1:
                    # subgraph buffer overflow: split and resubmit
                    self.isp_retries += 1
                    half = sub.target_count // 2
                    halves = [sub.slice(0, half), sub.slice(half, sub.target_count)]
                    resub = []
                    for h in halves:
                        c, _ = submit_isp_request(h, h.target_count, ssd_cfg)
                        resub.append((c[0], h))
                    pending[:0] = resub
                    continue
                if req.capacity_error and self.firmware.subgraph_buffer.total > 0:
                    # other streams hold the buffer; retry once the next poll drains some
                    self.isp_retries += 1
                    yield self.clock.now + ssd_cfg.poll_interval_us
                    pending.insert(0, (cmd, sub))
                    continue
                raise RuntimeError(f"ISP request failed: {req.error}")
            _, sg = decode_payload(req.payload, sub.records["node"].astype(np.int64),
                                   random_walk=self.walk,
                                   walks_per_target=blob.fanouts[0] if self.walk else 1)
            parts.append(sg)
        return parts

    def _isp_batch(self, w: int, targets, key):
        if self.walk:
            fan = (self.sampling.walks_per_target,) * self.sampling.walk_length
        else:
            fan = self.sampling.fanouts
        if not self.pipe.isp_per_hop_roundtrip:
            parts = yield from self._isp_exchange(w, self._isp_blobs(targets, fan, key, 0))
            return merge_subgraphs(parts, targets, len(fan), self.walk)
        if self.walk:
            raise ValueError("per-hop round trips are only defined for neighbor sampling")
        layers = []
        parents = unique_in_order(targets)
        for h, s in enumerate(fan):
            if len(parents) == 0 or s == 0:
                layers.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
                parents = np.zeros(0, np.int64)
                continue
            parts = yield from self._isp_exchange(w, self._isp_blobs(parents, (s,), key, h))
            merged = merge_subgraphs(parts, parents, 1, False)
            layers.append(merged.layers[0])
            parents = unique_in_order(merged.layers[0][1])
        sampled = unique_in_order(np.concatenate([targets] + [c for _, c in layers]))
        return Subgraph(targets, layers, sampled)

    # consumer ----------------------------------------------------------------
    def consumer(self):
        gpu = self.pipe.gpu_batch_time_us
        clock = self.clock
        for b in range(self.pipe.batches):
            while self.done_at[b] is None:
                yield self.ready
            self.consumed += 1
            self.credit.notify()
            self.digest.update(self.produced_digest[b])
            self.stage["training"] += gpu
            yield clock.now + gpu


def merge_subgraphs(parts: Sequence[Subgraph], targets: np.ndarray, layers: int,
                    random_walk: bool = False) -> Subgraph:
    """Combine subgraphs sampled for consecutive slices of one batch's targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(parts) == 1:
        sg = parts[0]
        return Subgraph(targets, sg.layers, sg.sampled_set)
    if random_walk:
        out = [(np.concatenate([p.layers[h][0] for p in parts]),
                np.concatenate([p.layers[h][1] for p in parts])) for h in range(layers)]
    else:
        out = []
        slots = unique_in_order(targets)
        for h in range(layers):
            got: dict[int, np.ndarray] = {}
            for p in parts:
                par, ch = p.layers[h]
                if len(par) == 0:
                    continue
                cut = np.flatnonzero(np.diff(par)) + 1
                bounds = np.concatenate(([0], cut, [len(par)]))
                for lo, hi in zip(bounds[:-1].tolist(), bounds[1:].tolist()):
                    got.setdefault(int(par[lo]), ch[lo:hi])
            chunks = [got[v] for v in slots.tolist() if v in got]
            ch = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
            par = np.repeat(slots, [len(got.get(v, ())) for v in slots.tolist()])
            out.append((par.astype(np.int64), ch))
            slots = unique_in_order(ch)
    sampled = unique_in_order(np.concatenate([targets] + [c for _, c in out]))
    return Subgraph(targets, out, sampled)


def run_pipeline(graph: CsrGraph, sampling: SamplingConfig | RandomWalkConfig,
                 ssd: SsdConfig | None = None, host: HostConfig | None = None,
                 pipe: PipelineConfig | None = None, image: GraphImage | None = None) -> RunMetrics:
    ssd = ssd or SsdConfig()
    host = host or HostConfig()
    pipe = pipe or PipelineConfig()
    run = _Run(graph, sampling, ssd, host, pipe, image)
    for w in range(min(pipe.num_workers, pipe.batches)):
        run.clock.spawn(run.worker(w))
    run.clock.spawn(run.consumer())
    total = run.clock.run()
    if run.consumed != pipe.batches:
        raise RuntimeError(f"pipeline stalled after {run.consumed} of {pipe.batches} batches")
    busy = pipe.batches * pipe.gpu_batch_time_us
    idle = (total - busy) / total if total > 0 else 0.0
    if run.path is AccessPath.ISP:
        commands = run.isp_commands
    elif run.path is AccessPath.DIRECT_IO:
        commands = sum(r.stats.nvme_commands for r in run.readers)
    elif run.path is AccessPath.MMAP:
        commands = run.readers[0].stats.block_misses
    else:
        commands = 0
    hit_rate = None
    if run.cache is not None and run.cache.hits + run.cache.misses:
        hit_rate = run.cache.hits / (run.cache.hits + run.cache.misses)
    return RunMetrics(
        access_path=run.path.value,
        total_time_us=total,
        gpu_idle_fraction=min(1.0, max(0.0, idle)),
        stage_us=dict(run.stage),
        bytes_ssd_to_host=run.ssd.bytes_to_host,
        bytes_flash_read=run.ssd.bytes_flash_read,
        nvme_commands=commands,
        subgraphs_produced=sum(d is not None for d in run.done_at),
        batches=pipe.batches,
        num_workers=pipe.num_workers,
        ids_sampled=run.ids_sampled,
        isp_retries=run.isp_retries,
        page_cache_hit_rate=hit_rate,
        workload=workload_fingerprint(graph, sampling, pipe.batches),
        subgraph_digest=run.digest.hexdigest(),
    )


# --- sweeps ----------------------------------------------------------------------

SWEEP_PARAMETERS = ("workers", "coalesce_granularity", "fanout_scale", "path")


@dataclass
class SweepRow:
    value: object
    metrics: RunMetrics | None = None
    baseline: RunMetrics | None = None
    error: str | None = None

    @property
    def speedup(self) -> float | None:
        if self.metrics is None or self.baseline is None:
            return None
        return compare_paths(self.baseline, self.metrics).speedup


def apply_sweep_value(parameter: str, value, sampling, pipe: PipelineConfig):
    if parameter == "workers":
        v = int(value)
        if v < 1:
            raise ValueError("workers must be >= 1")
        return sampling, replace(pipe, num_workers=v)
    if parameter == "coalesce_granularity":
        return sampling, replace(pipe, coalesce_granularity=int(value))
    if parameter == "fanout_scale":
        f = float(value)
        if f <= 0:
            raise ValueError("fanout scale must be > 0")
        if isinstance(sampling, RandomWalkConfig):
            raise ValueError("fanout scaling applies to neighbor sampling only")
        return sampling.scaled(f), pipe
    if parameter == "path":
        return sampling, replace(pipe, access_path=AccessPath.parse(str(value)))
    raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")


def sweep(parameter: str, values: Iterable, graph: CsrGraph, sampling, ssd: SsdConfig | None = None,
          host: HostConfig | None = None, pipe: PipelineConfig | None = None,
          baseline_path: AccessPath | None = AccessPath.MMAP,
          image: GraphImage | None = None) -> list[SweepRow]:
    """One run per value (plus a baseline-path run at the same value for speedups).

    A value that fails validation or raises during the run is recorded on its
    row; the sweep continues.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")
    pipe = pipe or PipelineConfig()
    rows = []
    baselines: dict = {}
    for value in values:
        row = SweepRow(value)
        try:
            s, p = apply_sweep_value(parameter, value, sampling, pipe)
            row.metrics = run_pipeline(graph, s, ssd, host, p, image)
            if baseline_path is not None:
                bp = replace(p, access_path=baseline_path, coalesce_granularity=None)
                bkey = (s, bp)
                if bkey not in baselines:
                    baselines[bkey] = (row.metrics if bp == p
                                       else run_pipeline(graph, s, ssd, host, bp, image))
                row.baseline = baselines[bkey]
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the sweep
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def sweep_csv(parameter: str, rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    cols = ("value",) + RunMetrics.CSV_COLUMNS + ("speedup", "error")
    out = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    out.writeheader()
    for row in rows:
        d = {"value": row.value, "error": row.error or ""}
        if row.metrics is not None:
            d.update(row.metrics.csv_row())
            sp = row.speedup
            d["speedup"] = "" if sp is None else f"{sp:.6g}"
        out.writerow(d)
    return buf.getvalue()
