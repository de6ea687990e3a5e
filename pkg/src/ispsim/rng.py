"""Counter-based 64-bit random streams.

Output ``i`` of a stream is ``splitmix64(key + (i + 1) * GOLDEN)``: a pure
function of (key, i). Streams are derived per (mini-batch, hop, node), so the
draws a node receives never depend on which access path, worker, or NVMe
command services it.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_U64 = np.uint64


def mix64(x):
    """splitmix64 finalizer; works on Python ints and uint64 arrays."""
    if isinstance(x, np.ndarray):
        with np.errstate(over="ignore"):
            x = x.astype(_U64, copy=True)
            x ^= x >> _U64(30)
            x *= _U64(0xBF58476D1CE4E5B9)
            x ^= x >> _U64(27)
            x *= _U64(0x94D049BB133111EB)
            x ^= x >> _U64(31)
        return x
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_key(key: int, *labels: int) -> int:
    for label in labels:
        key = mix64((key ^ mix64((label + GOLDEN) & MASK64)) + GOLDEN)
    return key


def derive_keys(key: int, hop: int, nodes: np.ndarray) -> np.ndarray:
    """Vectorized ``derive_key(key, hop, node)`` for an array of nodes."""
    k = _U64(derive_key(key, hop))
    with np.errstate(over="ignore"):
        lab = mix64(nodes.astype(_U64) + _U64(GOLDEN))
        return mix64((k ^ lab) + _U64(GOLDEN))


def batch_seed(seed: int, batch: int) -> int:
    """Seed base for one mini-batch; this is what NSCONFIG carries to the device."""
    return derive_key(seed & MASK64, batch)


def stream_values(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    """Element-wise output ``counters[i]`` of stream ``keys[i]``."""
    with np.errstate(over="ignore"):
        return mix64(keys.astype(_U64) + (counters.astype(_U64) + _U64(1)) * _U64(GOLDEN))


class CounterRng:
    """A single stream with a draw counter.

    ``substream(hop, node)`` gives the independent stream used for one
    sampling decision point.
    """

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key & MASK64
        self.counter = counter

    def substream(self, *labels: int) -> "CounterRng":
        return CounterRng(derive_key(self.key, *labels))

    def draws(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return stream_values(np.full(n, self.key, dtype=_U64), idx)

    def below(self, bounds) -> np.ndarray:
        """One draw per bound, each uniform in [0, bound)."""
        bounds = np.asarray(bounds, dtype=np.uint64)
        return (self.draws(len(bounds)) % bounds).astype(np.int64)

    def __repr__(self):
        return f"CounterRng(key={self.key:#018x}, counter={self.counter})"
