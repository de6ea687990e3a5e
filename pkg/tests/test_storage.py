import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ispsim.storage import (
    HOST_TO_SSD,
    SSD_TO_HOST,
    DramPageBuffer,
    FlashAddress,
    LruCache,
    SsdConfig,
    SsdModel,
    VirtualClock,
)


# --- configuration / FTL -------------------------------------------------------


def test_defaults():
    c = SsdConfig()
    assert (c.logical_block_bytes, c.flash_page_bytes, c.channels) == (4096, 16384, 8)
    assert (c.flash_read_us, c.dma_gbps, c.nvme_cmd_overhead_us) == (60.0, 3.2, 10.0)
    assert (c.firmware_cores, c.core_sample_rate, c.poll_interval_us) == (2, 1e7, 5.0)
    assert c.buffer_pages == 256 * 1024 * 1024 // 16384


@pytest.mark.parametrize("kw", [dict(flash_page_bytes=5000), dict(channels=0), dict(flash_read_us=0),
                                dict(firmware_cores=0), dict(dma_gbps=-1), dict(ftl_load=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SsdConfig(**kw)


@pytest.mark.parametrize("lba,addr", [(0, (0, 0)), (4, (1, 0)), (36, (1, 1)), (3, (0, 0)), (32, (0, 1))])
def test_ftl_examples(lba, addr):
    assert SsdModel().ftl_translate(lba) == FlashAddress(*addr)


def test_ftl_range():
    ssd = SsdModel(SsdConfig(capacity_bytes=4096 * 100))
    ssd.ftl_translate(99)
    with pytest.raises(IndexError):
        ssd.ftl_translate(100)
    with pytest.raises(IndexError):
        ssd.ftl_translate(-1)


@given(lba=st.integers(0, 2**28), ch=st.integers(1, 16), bpp=st.sampled_from([1, 2, 4, 8]))
def test_ftl_is_a_bijection_onto_pages(lba, ch, bpp):
    ssd = SsdModel(SsdConfig(channels=ch, flash_page_bytes=4096 * bpp))
    a = ssd.ftl_translate(lba)
    assert 0 <= a.channel < ch
    assert a.page * ch + a.channel == lba // bpp


# --- flash reads ---------------------------------------------------------


def test_single_cold_block():
    ssd = SsdModel()
    done, flash_bytes = ssd.read_blocks(0.0, [5])
    assert done == 60.0 and flash_bytes == 16384


def test_second_read_hits_buffer():
    ssd = SsdModel()
    ssd.read_blocks(0.0, [5])
    done, flash_bytes = ssd.read_blocks(100.0, [5, 6])  # same page
    assert done == 100.0 and flash_bytes == 0
    assert ssd.buffer.hits == 1


def test_hit_on_in_flight_page_waits_for_fill():
    ssd = SsdModel()
    ssd.read_blocks(0.0, [0])
    done, _ = ssd.read_blocks(10.0, [1])
    assert done == 60.0


def test_channel_overlap():
    spread = SsdModel()
    done, _ = spread.read_blocks(0.0, [4 * i for i in range(8)])
    assert done == 60.0
    same = SsdModel()
    done, _ = same.read_blocks(0.0, [4 * 8 * i for i in range(8)])
    assert done == 8 * 60.0


def channel_queue_oracle(requests, channels, tr, bpp):
    """Independent per-channel FIFO simulation with an unbounded page buffer."""
    ready = {}
    queues = [[] for _ in range(channels)]  # list of completion times
    out = []
    for at, lbas in requests:
        done = at
        for lba in lbas:
            page = lba // bpp
            if page not in ready:
                q = queues[page % channels]
                start = max([at] + q[-1:])
                q.append(start + tr)
                ready[page] = start + tr
            done = max(done, ready[page])
        out.append(done)
    return out


@settings(max_examples=100, deadline=None)
@given(data=st.data(), channels=st.integers(1, 8))
def test_read_blocks_matches_channel_queue_oracle(data, channels):
    n = data.draw(st.integers(1, 30))
    gaps = data.draw(st.lists(st.floats(0, 200), min_size=n, max_size=n))
    times = np.cumsum(gaps).tolist()
    reqs = [(t, data.draw(st.lists(st.integers(0, 400), min_size=1, max_size=12))) for t in times]
    ssd = SsdModel(SsdConfig(channels=channels))
    got = [ssd.read_blocks(t, lbas)[0] for t, lbas in reqs]
    assert got == pytest.approx(channel_queue_oracle(reqs, channels, 60.0, 4))


@settings(max_examples=60, deadline=None)
@given(lbas=st.lists(st.integers(0, 10_000), min_size=1, max_size=50))
def test_flash_bytes_at_least_host_bytes_when_cold(lbas):
    ssd = SsdModel()
    _, flash_bytes = ssd.read_blocks(0.0, lbas)
    host_bytes = len(set(lbas)) * 4096
    assert flash_bytes >= host_bytes
    aligned = sorted({lba // 4 for lba in lbas})
    ssd2 = SsdModel()
    full = [4 * p + k for p in aligned for k in range(4)]
    assert ssd2.read_blocks(0.0, full)[1] == len(full) * 4096


# --- DMA --------------------------------------------------------------------


def test_dma_examples():
    ssd = SsdModel()
    assert ssd.dma_transfer(5.0, 0, SSD_TO_HOST) == 5.0
    assert SsdModel().dma_transfer(0.0, 4096, SSD_TO_HOST) == pytest.approx(1.28)
    assert SsdModel().dma_transfer(0.0, 3_200_000_000, HOST_TO_SSD) == pytest.approx(1e6)


def test_dma_directions_are_independent_fifo():
    ssd = SsdModel()
    a = ssd.dma_transfer(0.0, 4096, SSD_TO_HOST)
    b = ssd.dma_transfer(0.0, 4096, SSD_TO_HOST)
    c = ssd.dma_transfer(0.0, 4096, HOST_TO_SSD)
    assert b == pytest.approx(2 * a) and c == pytest.approx(a)
    assert (ssd.bytes_to_host, ssd.bytes_from_host) == (8192, 4096)
    with pytest.raises(ValueError):
        ssd.dma_transfer(0.0, -1, SSD_TO_HOST)
    with pytest.raises(ValueError):
        ssd.dma_transfer(0.0, 1, "sideways")


# --- LRU ----------------------------------------------------------------------


class ListLru:
    """Brute-force LRU: a Python list, most recent at the end."""

    def __init__(self, cap):
        self.cap, self.items = cap, []

    def access(self, key) -> bool:
        hit = key in self.items
        if hit:
            self.items.remove(key)
        self.items.append(key)
        if len(self.items) > self.cap:
            self.items.pop(0)
        return hit


@pytest.mark.parametrize("cap,universe", [(1, 5), (16, 40), (64, 64), (100, 1000), (0, 10)])
def test_lru_matches_list_oracle(cap, universe):
    rng = np.random.default_rng(cap * 1000 + universe)
    trace = rng.zipf(1.3, 10_000) % universe
    lru, oracle = LruCache(cap), ListLru(cap)
    for k in trace.tolist():
        assert lru.access(k) == oracle.access(k)
        assert lru.keys() == oracle.items
    assert lru.hits + lru.misses == 10_000


def test_dram_buffer_residency_matches_oracle_through_reads():
    cfg = SsdConfig(page_buffer_bytes=16384 * 32)
    ssd = SsdModel(cfg)
    oracle = ListLru(32)
    rng = np.random.default_rng(1)
    t = 0.0
    for lba in rng.integers(0, 4 * 200, 10_000).tolist():
        ssd.read_blocks(t, [lba])
        oracle.access(lba // 4)
        t += 1.0
    assert ssd.buffer.keys() == oracle.items
    assert isinstance(ssd.buffer, DramPageBuffer) and len(ssd.buffer) <= 32


def test_touch_does_not_count():
    lru = LruCache(2)
    lru.insert("a", 1.0)
    lru.insert("b", 2.0)
    assert lru.touch("a") == 1.0 and lru.touch("zzz") is None
    lru.insert("c", 3.0)
    assert lru.keys() == ["a", "c"] and lru.hits == lru.misses == 0


# --- virtual clock -------------------------------------------------------


def test_clock_orders_by_time_then_sequence():
    clock = VirtualClock()
    seen = []
    for at, tag in [(5, "a"), (1, "b"), (5, "c"), (1, "d"), (3, "e")]:
        clock.schedule(at, seen.append, tag)
    clock.run()
    assert seen == ["b", "d", "e", "a", "c"]


def test_clock_never_goes_backwards():
    clock = VirtualClock()
    times = []

    def proc(delays):
        for d in delays:
            yield clock.now + d
            times.append(clock.now)
            clock.schedule(clock.now - 10, lambda: times.append(clock.now))

    clock.spawn(proc([3, 1, 4]))
    clock.spawn(proc([2, 7]))
    clock.run()
    assert times == sorted(times)


def test_signal_wakes_waiters():
    clock = VirtualClock(record=True)
    sig = clock.signal()
    state = {"ready": False}

    def waiter():
        while not state["ready"]:
            yield sig
        clock.log("woke")

    def setter():
        yield 7.0
        state["ready"] = True
        sig.notify()

    clock.spawn(waiter())
    clock.spawn(setter())
    assert clock.run() == 7.0
    assert clock.events == [(7.0, "woke")]


def test_run_until_stops_early():
    clock = VirtualClock()
    hit = []
    clock.schedule(10, hit.append, 1)
    clock.schedule(20, hit.append, 2)
    clock.run(until=15)
    assert hit == [1]
    clock.run()
    assert hit == [1, 2]
