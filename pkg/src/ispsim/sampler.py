"""GraphSAGE-style multi-hop neighbor sampling and random-walk sampling.

Samplers read edge lists through an accessor (anything with ``degree(v)`` and
``edge_list(v)``), so the same code runs against an in-memory CSR, a
device-backed reader, or a recording wrapper used to derive I/O traces.
Every sampling decision draws from the counter stream keyed by
(batch seed, hop, node); results therefore depend only on the graph, targets,
configuration, and seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .graph import CsrGraph
from .rng import CounterRng, derive_keys, stream_values


class EdgeListAccess(Protocol):
    def degree(self, v: int) -> int: ...

    def edge_list(self, v: int) -> np.ndarray: ...


class ArrayAccess:
    """In-memory accessor over a CsrGraph.

    With ``record=True`` every edge-list read is appended to ``trace`` in
    access order; the pipeline replays that trace through the storage paths.
    """

    def __init__(self, graph: CsrGraph, record: bool = False):
        self.graph = graph
        self.trace: list[int] | None = [] if record else None

    def degree(self, v: int) -> int:
        return int(self.graph.indptr[v + 1] - self.graph.indptr[v])

    def edge_list(self, v: int) -> np.ndarray:
        if self.trace is not None:
            self.trace.append(int(v))
        g = self.graph
        return np.asarray(g.indices[g.indptr[v] : g.indptr[v + 1]], dtype=np.int64)


@dataclass(frozen=True)
class SamplingConfig:
    batch_size: int = 1024
    fanouts: tuple[int, ...] = (25, 10)
    with_replacement: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fanouts", tuple(int(f) for f in self.fanouts))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.fanouts:
            raise ValueError("at least one hop is required")
        if any(f < 0 for f in self.fanouts):
            raise ValueError("fanouts must be >= 0")
        if any(f > 0xFFFF for f in self.fanouts):
            raise ValueError("fanouts must fit in 16 bits")

    def scaled(self, factor: float) -> "SamplingConfig":
        fan = tuple(max(1, int(round(f * factor))) if f else 0 for f in self.fanouts)
        return SamplingConfig(self.batch_size, fan, self.with_replacement, self.seed)


@dataclass(frozen=True)
class RandomWalkConfig:
    walk_length: int = 2
    walks_per_target: int = 1
    seed: int = 0
    batch_size: int = 1024

    def __post_init__(self):
        if self.walk_length < 1 or self.walks_per_target < 1:
            raise ValueError("walk_length and walks_per_target must be >= 1")
        if self.walks_per_target > 0xFFFF or self.walk_length > 0xFFFF:
            raise ValueError("walk parameters must fit in 16 bits")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(eq=False)
class Subgraph:
    """Sampled mini-batch. ``layers[i]`` is a (parents, children) pair of arrays."""

    targets: np.ndarray
    layers: list[tuple[np.ndarray, np.ndarray]]
    sampled_set: np.ndarray
    fanouts: tuple[int, ...] | None = None
    with_replacement: bool = True

    def pairs(self, hop: int) -> list[tuple[int, int]]:
        p, c = self.layers[hop]
        return list(zip(p.tolist(), c.tolist()))

    @property
    def num_sampled(self) -> int:
        return int(sum(len(c) for _, c in self.layers))

    def __eq__(self, other):
        if not isinstance(other, Subgraph):
            return NotImplemented
        return (
            np.array_equal(self.targets, other.targets)
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                for a, b in zip(self.layers, other.layers)
            )
            and np.array_equal(self.sampled_set, other.sampled_set)
        )

    def canonical(self) -> "Subgraph":
        """Pairs sorted lexicographically per layer, sampled set sorted."""
        layers = []
        for p, c in self.layers:
            order = np.lexsort((c, p))
            layers.append((p[order], c[order]))
        return Subgraph(np.sort(self.targets), layers, np.sort(self.sampled_set),
                        self.fanouts, self.with_replacement)

    def digest(self) -> bytes:
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(self.targets, dtype="<i8").tobytes())
        for p, c in self.layers:
            h.update(len(p).to_bytes(8, "little"))
            h.update(np.ascontiguousarray(p, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(c, dtype="<i8").tobytes())
        return h.digest()


def unique_in_order(a: np.ndarray) -> np.ndarray:
    if len(a) == 0:
        return np.asarray(a, dtype=np.int64)
    _, first = np.unique(a, return_index=True)
    return a[np.sort(first)]


def reservoir_slots(deg: int, s: int, rng: CounterRng) -> np.ndarray:
    """Algorithm R over slot indices; consumes ``max(0, deg - s)`` draws."""
    if s >= deg:
        return np.arange(deg, dtype=np.int64)
    slots = np.arange(s, dtype=np.int64)
    if s == 0:
        return slots
    i = np.arange(s, deg, dtype=np.int64)
    j = rng.below(i + 1)
    hit = j < s
    # later i overwrite earlier ones; i is increasing so the max wins
    np.maximum.at(slots, j[hit], i[hit])
    return slots


def sample_neighbors(access: EdgeListAccess, u: int, s: int, rng: CounterRng,
                     with_replacement: bool = True) -> np.ndarray:
    """Draw ``s`` neighbors of ``u``.

    With replacement: exactly ``s`` uniform draws (none when degree is 0).
    Without: ``min(s, degree)`` distinct edge slots by reservoir sampling.
    """
    deg = access.degree(u)
    if deg == 0 or s == 0:
        return np.zeros(0, dtype=np.int64)
    nbrs = access.edge_list(u)
    if with_replacement:
        return nbrs[rng.below(np.full(s, deg))]
    return nbrs[reservoir_slots(deg, s, rng)]


def _sample_hop_vectorized(access: ArrayAccess, parents: np.ndarray, s: int, hop: int,
                           key: int) -> tuple[np.ndarray, np.ndarray]:
    g = access.graph
    start = g.indptr[parents]
    deg = g.indptr[parents + 1] - start
    live = deg > 0
    lp, ls, ld = parents[live], start[live], deg[live]
    if access.trace is not None:
        access.trace.extend(lp.tolist())
    n = len(lp)
    keys = np.repeat(derive_keys(key, hop, lp), s)
    counters = np.tile(np.arange(s, dtype=np.uint64), n)
    offs = (stream_values(keys, counters) % np.repeat(ld, s).astype(np.uint64)).astype(np.int64)
    children = np.asarray(g.indices[np.repeat(ls, s) + offs], dtype=np.int64)
    return np.repeat(lp, s), children


def build_subgraph(access: EdgeListAccess, targets: Sequence[int], config: SamplingConfig,
                   rng: CounterRng) -> Subgraph:
    """Multi-hop sampling: hop i parents are hop i-1 children, deduplicated in first-seen order."""
    targets = np.asarray(targets, dtype=np.int64)
    parents = unique_in_order(targets)
    layers = []
    vectorize = isinstance(access, ArrayAccess) and config.with_replacement
    for hop, s in enumerate(config.fanouts):
        if s == 0 or len(parents) == 0:
            layers.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
            parents = np.zeros(0, np.int64)
            continue
        if vectorize:
            p, c = _sample_hop_vectorized(access, parents, s, hop, rng.key)
        else:
            ps, cs = [], []
            for u in parents.tolist():
                got = sample_neighbors(access, u, s, rng.substream(hop, u), config.with_replacement)
                if len(got):
                    ps.append(np.full(len(got), u, dtype=np.int64))
                    cs.append(got)
            p = np.concatenate(ps) if ps else np.zeros(0, np.int64)
            c = np.concatenate(cs) if cs else np.zeros(0, np.int64)
        layers.append((p, c))
        parents = unique_in_order(c)
    sampled = unique_in_order(np.concatenate([targets] + [c for _, c in layers]))
    return Subgraph(targets, layers, sampled, config.fanouts, config.with_replacement)


def random_walk_sample(access: EdgeListAccess, targets: Sequence[int], config: RandomWalkConfig,
                       rng: CounterRng) -> Subgraph:
    """Uniform random walks; step i of walk w from target t uses draw w of stream (i, t).

    Layer i holds the (position, next position) pairs of walks still alive at
    step i; a walk halts at a degree-0 node.
    """
    targets = np.asarray(targets, dtype=np.int64)
    w = config.walks_per_target
    pos = np.repeat(targets, w)
    owner = pos.copy()
    walk_idx = np.tile(np.arange(w, dtype=np.uint64), len(targets))
    alive = np.ones(len(pos), dtype=bool)
    layers = []
    for step in range(config.walk_length):
        idx = np.flatnonzero(alive)
        cur = pos[idx]
        deg = np.array([access.degree(int(v)) for v in cur.tolist()], dtype=np.int64)
        live = deg > 0
        alive[idx[~live]] = False
        idx, cur, deg = idx[live], cur[live], deg[live]
        r = stream_values(derive_keys(rng.key, step, owner[idx]), walk_idx[idx])
        offs = (r % deg.astype(np.uint64)).astype(np.int64)
        nxt = np.empty(len(idx), dtype=np.int64)
        cache: dict[int, np.ndarray] = {}
        for k, v in enumerate(cur.tolist()):
            lst = cache.get(v)
            if lst is None:
                lst = cache[v] = access.edge_list(v)
            nxt[k] = lst[offs[k]]
        layers.append((cur, nxt))
        pos[idx] = nxt
    sampled = unique_in_order(np.concatenate([targets] + [c for _, c in layers]))
    return Subgraph(targets, layers, sampled, None, True)


@dataclass
class Verdict:
    ok: bool
    reason: str = ""
    pair: tuple[int, int] | None = None
    hop: int | None = None

    def __bool__(self):
        return self.ok


def validate_subgraph(graph: CsrGraph, sg: Subgraph) -> Verdict:
    """Check every Subgraph invariant against ``graph``; report the first violation."""
    n = graph.num_nodes
    targets = np.asarray(sg.targets, dtype=np.int64)
    if len(targets) and (targets.min() < 0 or targets.max() >= n):
        return Verdict(False, "target out of range")
    prev_children = targets
    for hop, (p, c) in enumerate(sg.layers):
        p = np.asarray(p, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        if len(p) != len(c):
            return Verdict(False, "parent/child length mismatch", hop=hop)
        bad = np.flatnonzero((p < 0) | (p >= n) | (c < 0) | (c >= n))
        if len(bad):
            k = int(bad[0])
            return Verdict(False, "node ID out of range", (int(p[k]), int(c[k])), hop)
        outside = np.flatnonzero(~np.isin(p, prev_children))
        if len(outside):
            k = int(outside[0])
            what = "targets" if hop == 0 else f"hop {hop - 1} children"
            return Verdict(False, f"parent not among {what}", (int(p[k]), int(c[k])), hop)
        if len(p):
            up = np.unique(p)
            rows = np.repeat(up, graph.indptr[up + 1] - graph.indptr[up])
            cols = np.concatenate([np.asarray(graph.indices[graph.indptr[u]:graph.indptr[u + 1]])
                                   for u in up.tolist()]).astype(np.int64)
            member = np.isin(p * n + c, rows * n + cols)
            miss = np.flatnonzero(~member)
            if len(miss):
                k = int(miss[0])
                return Verdict(False, "child is not a neighbor of parent", (int(p[k]), int(c[k])), hop)
        if sg.fanouts is not None and sg.fanouts[hop] > 0:
            cand = np.unique(prev_children)
            need = cand[graph.indptr[cand + 1] > graph.indptr[cand]]
            skipped = np.flatnonzero(~np.isin(need, p))
            if len(skipped):
                return Verdict(False, f"node {int(need[skipped[0]])} was not expanded", None, hop)
        if len(p) and sg.fanouts is not None:
            uniq, counts = np.unique(p, return_counts=True)
            deg = graph.indptr[uniq + 1] - graph.indptr[uniq]
            s = sg.fanouts[hop]
            want = np.full(len(uniq), s) if sg.with_replacement else np.minimum(s, deg)
            wrong = np.flatnonzero(counts != want)
            if len(wrong):
                k = int(wrong[0])
                return Verdict(False, f"parent {int(uniq[k])} has {int(counts[k])} children, "
                                      f"expected {int(want[k])}", None, hop)
        prev_children = c
    expect = np.unique(np.concatenate([targets] + [np.asarray(c) for _, c in sg.layers]))
    if not np.array_equal(np.unique(sg.sampled_set), expect):
        return Verdict(False, "sampled_set does not match targets and children")
    return Verdict(True)
