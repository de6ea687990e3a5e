"""CSR graph storage, the binary CSR file format, and Kronecker expansion.

The on-disk format is little-endian::

    magic      8 bytes  b"CSRGRAF1"
    num_nodes  u64
    num_edges  u64
    id_width   u8       4 or 8
    padding    7 bytes
    indptr     (num_nodes + 1) x u64
    indices    num_edges x id_width bytes
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

MAGIC = b"CSRGRAF1"
HEADER = struct.Struct("<8sQQB7x")
HEADER_BYTES = HEADER.size  # 32
_ID_DTYPES = {4: np.dtype("<u4"), 8: np.dtype("<u8")}
_INT64_MAX = 2**63 - 1


class CsrFormatError(ValueError):
    """Malformed CSR file. ``offset`` is the byte offset of the first bad field."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CapacityError(OverflowError):
    pass


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Immutable compressed-sparse-row adjacency.

    ``indices`` may be a read-only memory map of a CSR file; ``id_width`` is the
    width used when the graph is written to disk (and therefore the on-device
    layout the storage paths see).
    """

    indptr: np.ndarray
    indices: np.ndarray
    id_width: int = 8

    def __post_init__(self):
        indptr = np.asarray(self.indptr)
        if indptr.dtype != np.int64:
            indptr = indptr.astype(np.int64)
        indices = self.indices
        if not isinstance(indices, np.memmap):
            indices = np.asarray(indices)
            if indices.dtype != np.int64:
                indices = indices.astype(np.int64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        if self.id_width not in _ID_DTYPES:
            raise ValueError(f"id_width must be 4 or 8, got {self.id_width}")
        if indptr.ndim != 1 or len(indptr) < 1:
            raise ValueError("indptr must be a non-empty 1-D array")
        if indptr[0] != 0:
            raise ValueError("indptr[0] must be 0")
        if indptr[-1] != len(indices):
            raise ValueError(f"indptr[-1]={indptr[-1]} but there are {len(indices)} indices")
        if len(indptr) > 1 and np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if len(indices) and (int(indices.min()) < 0 or int(indices.max()) >= self.num_nodes):
            raise ValueError("indices contain out-of-range node IDs")
        if self.id_width == 4 and self.num_nodes > 2**32:
            raise ValueError("id_width 4 cannot address more than 2**32 nodes")

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def degree(self, v: int) -> int:
        _check_node(self, v)
        return int(self.indptr[v + 1] - self.indptr[v])

    def equals(self, other: "CsrGraph") -> bool:
        return (
            self.id_width == other.id_width
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    @classmethod
    def from_edges(cls, num_nodes: int, src, dst, id_width: int = 8) -> "CsrGraph":
        """Build from parallel edge arrays; rows keep the given edge order."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        order = np.argsort(src, kind="stable")
        counts = np.bincount(src, minlength=num_nodes) if len(src) else np.zeros(num_nodes, np.int64)
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(indptr, dst[order], id_width=id_width)


def _check_node(graph: CsrGraph, v: int) -> None:
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node {v} out of range [0, {graph.num_nodes})")


def neighbors(graph: CsrGraph, v: int) -> np.ndarray:
    """Contiguous view of v's edge list."""
    _check_node(graph, v)
    return graph.indices[graph.indptr[v] : graph.indptr[v + 1]]


# --- serialization -------------------------------------------------------


def save_csr(graph: CsrGraph, path: str | os.PathLike) -> None:
    dtype = _ID_DTYPES[graph.id_width]
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, graph.num_nodes, graph.num_edges, graph.id_width))
        f.write(graph.indptr.astype("<u8").tobytes())
        chunk = 1 << 24
        for lo in range(0, graph.num_edges, chunk):
            f.write(np.asarray(graph.indices[lo : lo + chunk]).astype(dtype).tobytes())


def load_csr(path: str | os.PathLike, mmap: bool = False) -> CsrGraph:
    """Read a binary CSR file, validating every structural invariant.

    With ``mmap=True`` the indices stay on disk as a read-only memory map in
    their stored width; indptr is always loaded.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
        if len(head) < 8 or head[:8] != MAGIC:
            raise CsrFormatError(f"bad magic {head[:8]!r}", 0)
        if len(head) < HEADER_BYTES:
            raise CsrFormatError("truncated header", len(head))
        _, num_nodes, num_edges, id_width = HEADER.unpack(head)
        if id_width not in _ID_DTYPES:
            raise CsrFormatError(f"id_width must be 4 or 8, got {id_width}", 24)
        indptr_bytes = 8 * (num_nodes + 1)
        expected = HEADER_BYTES + indptr_bytes + id_width * num_edges
        if size < HEADER_BYTES + indptr_bytes:
            raise CsrFormatError("truncated indptr array", size)
        raw = f.read(indptr_bytes)
        indptr = np.frombuffer(raw, dtype="<u8").astype(np.int64)
    if size < expected:
        raise CsrFormatError("truncated indices array", size)
    if size > expected:
        raise CsrFormatError("trailing bytes after indices array", expected)

    if indptr[0] != 0:
        raise CsrFormatError("indptr[0] must be 0", HEADER_BYTES)
    bad = np.flatnonzero(np.diff(indptr) < 0)
    if len(bad):
        raise CsrFormatError("indptr decreases", HEADER_BYTES + 8 * int(bad[0] + 1))
    if indptr[-1] != num_edges:
        raise CsrFormatError(
            f"indptr[last]={indptr[-1]} != num_edges={num_edges}", HEADER_BYTES + 8 * num_nodes
        )

    start = HEADER_BYTES + indptr_bytes
    dtype = _ID_DTYPES[id_width]
    if mmap and num_edges:
        indices = np.memmap(path, dtype=dtype, mode="r", offset=start, shape=(num_edges,))
    else:
        indices = np.fromfile(path, dtype=dtype, count=num_edges, offset=start).astype(np.int64)
    if num_edges:
        hi = int(indices.max())
        if hi >= num_nodes:
            pos = int(np.argmax(np.asarray(indices) >= num_nodes))
            raise CsrFormatError(f"node ID {hi} >= num_nodes", start + id_width * pos)
    return CsrGraph(indptr, indices, id_width=id_width)


# --- Kronecker expansion -------------------------------------------------


@dataclass(frozen=True)
class KroneckerBase:
    """Binary m x m base pattern applied ``reps`` times."""

    dim: int
    edges: tuple[tuple[int, int], ...]
    reps: int = 1

    def __post_init__(self):
        edges = tuple(sorted((int(r), int(c)) for r, c in self.edges))
        object.__setattr__(self, "edges", edges)
        if self.dim < 1:
            raise ValueError("base dim must be >= 1")
        if self.reps < 0:
            raise ValueError("reps must be >= 0")
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate base edges")
        for r, c in edges:
            if not (0 <= r < self.dim and 0 <= c < self.dim):
                raise ValueError(f"base edge {(r, c)} outside [0, {self.dim})^2")

    @classmethod
    def from_matrix(cls, matrix, reps: int = 1) -> "KroneckerBase":
        m = np.asarray(matrix)
        rows, cols = np.nonzero(m)
        return cls(m.shape[0], tuple(zip(rows.tolist(), cols.tolist())), reps)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=np.int64)
        for r, c in self.edges:
            out[r, c] = 1
        return out


def kronecker_expand(graph: CsrGraph, base: KroneckerBase) -> CsrGraph:
    """Apply ``G <- G (x) B`` ``base.reps`` times.

    Node ``i`` of G and row ``j`` of B become node ``i * m + j``; its edge list
    is ``a * m + b`` for a in N_G(i) (outer) and b in N_B(j) (inner).
    """
    m, e = base.dim, len(base.edges)
    nodes = graph.num_nodes * m**base.reps
    edges = graph.num_edges * e**base.reps
    if nodes > _INT64_MAX or edges > _INT64_MAX:
        raise CapacityError(f"expansion needs {nodes} nodes / {edges} edges; exceeds 64-bit counters")
    id_width = graph.id_width
    if id_width == 4 and nodes > 2**32:
        id_width = 8
    if base.reps == 0:
        return CsrGraph(graph.indptr.copy(), np.array(graph.indices, dtype=np.int64), graph.id_width)

    b_rows = np.array([r for r, _ in base.edges], dtype=np.int64)
    b_cols = np.array([c for _, c in base.edges], dtype=np.int64)
    b_deg = np.bincount(b_rows, minlength=m) if e else np.zeros(m, dtype=np.int64)
    b_first = np.concatenate([[0], np.cumsum(b_deg)[:-1]])
    b_pos = np.arange(e) - b_first[b_rows]

    indptr, indices = graph.indptr, np.asarray(graph.indices, dtype=np.int64)
    for _ in range(base.reps):
        n = len(indptr) - 1
        deg = np.diff(indptr)
        new_indptr = np.zeros(n * m + 1, dtype=np.int64)
        np.cumsum(np.outer(deg, b_deg).ravel(), out=new_indptr[1:])
        out = np.empty(len(indices) * e, dtype=np.int64)
        row = np.repeat(np.arange(n, dtype=np.int64), deg)
        pos_in_row = np.arange(len(indices), dtype=np.int64) - indptr[row]
        scaled = indices * m
        for j, b, q in zip(b_rows.tolist(), b_cols.tolist(), b_pos.tolist()):
            dest = new_indptr[row * m + j] + pos_in_row * b_deg[j] + q
            out[dest] = scaled + b
        del row, pos_in_row, scaled
        indptr, indices = new_indptr, out
    return CsrGraph(indptr, indices, id_width=id_width)


# --- degree statistics ---------------------------------------------------


@dataclass(frozen=True)
class DegreeHistogram:
    buckets: dict[int, int] = field(default_factory=dict)
    avg_degree: Fraction = Fraction(0)

    def top_buckets(self, k: int) -> list[tuple[int, int]]:
        """The k most populated (degree, count) buckets, ties broken by degree."""
        return sorted(self.buckets.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def degree_distribution(graph: CsrGraph) -> DegreeHistogram:
    if graph.num_nodes == 0:
        return DegreeHistogram({}, Fraction(0))
    values, counts = np.unique(graph.degrees(), return_counts=True)
    buckets = dict(zip(values.tolist(), counts.tolist()))
    return DegreeHistogram(buckets, Fraction(graph.num_edges, graph.num_nodes))


# --- seed graphs ---------------------------------------------------------


def triangle() -> CsrGraph:
    return CsrGraph(np.array([0, 2, 4, 6]), np.array([1, 2, 0, 2, 0, 1]))


def powerlaw_graph(num_nodes: int, avg_degree: float, exponent: float = 2.5, seed: int = 0,
                   id_width: int = 8) -> CsrGraph:
    """Symmetric Chung-Lu style random graph with a power-law expected degree sequence.

    Each undirected edge is stored in both directions, so the realized average
    degree is close to ``avg_degree``. Duplicate pairs are kept as multi-edges.
    """
    if num_nodes < 1:
        return CsrGraph(np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), id_width)
    rng = np.random.default_rng(seed)
    rank = np.arange(1, num_nodes + 1, dtype=np.float64)
    weight = rank ** (-1.0 / (exponent - 1.0))
    weight /= weight.sum()
    half = int(round(num_nodes * avg_degree / 2))
    src = rng.choice(num_nodes, size=half, p=weight)
    dst = rng.choice(num_nodes, size=half, p=weight)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    perm = rng.permutation(num_nodes)  # scatter hubs across the ID space
    src, dst = perm[src], perm[dst]
    return CsrGraph.from_edges(
        num_nodes, np.concatenate([src, dst]), np.concatenate([dst, src]), id_width=id_width
    )
