import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ispsim.firmware import (
    PAYLOAD_HEAD,
    CoreScheduler,
    IspFirmware,
    IspRequest,
    PayloadError,
    PendingFlashQueue,
    PendingSubgraphBuffer,
    RequestState,
    StateError,
    SubgraphBufferOverflow,
    contention_slowdown,
    decode_payload,
    encode_payload,
)
from ispsim.graph import HEADER_BYTES, CsrGraph, powerlaw_graph
from ispsim.hostio import (
    FLAG_RANDOM_WALK,
    FLAG_WITH_REPLACEMENT,
    GraphFileLayout,
    GraphImage,
    NsConfigBlob,
    NvmeCommand,
    build_nsconfig,
    make_records,
    submit_isp_request,
)
from ispsim.rng import CounterRng, batch_seed
from ispsim.sampler import (
    ArrayAccess,
    RandomWalkConfig,
    SamplingConfig,
    build_subgraph,
    random_walk_sample,
    unique_in_order,
)
from ispsim.storage import SsdConfig, SsdModel

from conftest import random_graph


def device(g, cfg=None, record=False):
    ssd = SsdModel(cfg or SsdConfig())
    return IspFirmware(ssd, GraphImage(graph=g), record=record)


def one_command(g, targets, sampling, key, flags=None):
    blob = build_nsconfig(GraphFileLayout.of(g), targets, sampling, key, flags=flags)
    cmds, _ = submit_isp_request(blob, blob.target_count, SsdConfig())
    return cmds[0]


def isp_subgraph(g, targets, sampling, key, cfg=None):
    fw = device(g, cfg)
    req = fw.run_command(one_command(g, targets, sampling, key))
    assert req.ok, req.error
    _, sg = decode_payload(req.payload, targets)
    return sg, req, fw


# --- command intake ------------------------------------------------------------


def test_translation_time_for_1024_records():
    g = powerlaw_graph(5000, 6, seed=1)
    fw = device(g)
    req = fw.handle_isp_command(one_command(g, np.arange(1024), SamplingConfig(), 1), 0.0)
    received = dict(req.history)[RequestState.RECEIVED]
    assert req.state is RequestState.TRANSLATED
    assert req.time - received == pytest.approx(204.8)
    assert fw.stats.records_translated == 1024


def test_blob_dma_is_charged():
    g = powerlaw_graph(5000, 6, seed=1)
    fw = device(g)
    cmd = one_command(g, np.arange(1024), SamplingConfig(), 1)
    req = fw.handle_isp_command(cmd, 0.0)
    assert dict(req.history)[RequestState.RECEIVED] == pytest.approx(len(cmd.payload) / 3200)
    assert fw.ssd.bytes_from_host == len(cmd.payload) == 26_660


def test_bad_magic_rejected():
    g = powerlaw_graph(100, 4, seed=1)
    cmd = one_command(g, [1], SamplingConfig(), 1)
    cmd.payload = b"BAD!" + cmd.payload[4:]
    fw = device(g)
    req = fw.run_command(cmd)
    assert req.state is RequestState.FAILED and "magic" in req.error
    assert fw.stats.rejected == 1 and not req.capacity_error


def test_non_isp_and_out_of_image_rejected():
    g = powerlaw_graph(100, 4, seed=1)
    fw = device(g)
    assert not fw.run_command(NvmeCommand("write", 0, 1)).ok
    blob = build_nsconfig(GraphFileLayout.of(g), [1], SamplingConfig(), 1)
    blob.records["count"] = 10**9
    cmd = NvmeCommand("write", 0, 1, isp_flag=True, payload=blob.encode())
    assert not fw.run_command(cmd).ok


def test_one_target_enqueues_flash_reads():
    g = powerlaw_graph(100, 4, seed=1)
    v = int(np.argmax(g.degrees()))
    fw = device(g)
    fw.handle_isp_command(one_command(g, [v], SamplingConfig(), 1), 0.0)
    assert len(fw.flash_queue) >= 1


# --- sampling ----------------------------------------------------------------------


def test_degree_zero_target_reads_nothing():
    g = CsrGraph.from_edges(4, [1, 2], [2, 1])
    sg, req, fw = isp_subgraph(g, [0], SamplingConfig(1, (3,)), 5)
    assert fw.ssd.flash_reads == 0
    assert len(sg.layers[0][1]) == 0 and req.ids_sampled == 0


def test_single_page_list_one_read_two_ids():
    g = CsrGraph.from_edges(10, [0] * 5, [1, 2, 3, 4, 5])
    sg, req, fw = isp_subgraph(g, [0], SamplingConfig(1, (2,)), 5)
    assert fw.ssd.flash_reads == 1 and req.ids_sampled == 2
    assert len(sg.layers[0][1]) == 2


def test_states_advance_in_order():
    g = powerlaw_graph(300, 6, seed=2)
    _, req, _ = isp_subgraph(g, np.arange(20), SamplingConfig(20, (3, 2)), 5)
    states = [s for s, _ in req.history]
    assert states == [RequestState.RECEIVED, RequestState.TRANSLATED, RequestState.READING,
                      RequestState.SAMPLING, RequestState.READY, RequestState.RETURNED]
    times = [t for _, t in req.history]
    assert times == sorted(times)
    assert req.completed_at == times[-1]


def test_state_machine_rejects_skips_and_regressions():
    r = IspRequest(0, 0, 0.0)
    with pytest.raises(StateError):
        r.advance(RequestState.TRANSLATED, 0)
    r.advance(RequestState.RECEIVED, 0)
    r.advance(RequestState.TRANSLATED, 1)
    with pytest.raises(StateError):
        r.advance(RequestState.RECEIVED, 2)
    with pytest.raises(StateError):
        r.advance(RequestState.SAMPLING, 2)
    r.advance(RequestState.FAILED, 3)
    with pytest.raises(StateError):
        r.advance(RequestState.READING, 4)


def test_service_requires_translated_request():
    g = powerlaw_graph(100, 4, seed=1)
    fw = device(g)
    with pytest.raises(StateError):
        fw.service_flash_and_sample(IspRequest(0, 0, 0.0, state=RequestState.RECEIVED))


def _host(g, targets, cfg, key):
    return build_subgraph(ArrayAccess(g), targets, cfg, CounterRng(key))


@pytest.mark.parametrize("replace", [True, False])
def test_equivalence_on_1k_node_graph(replace):
    g = powerlaw_graph(1000, 12, seed=3, id_width=4)
    cfg = SamplingConfig(64, (8, 4), replace, 21)
    key = batch_seed(21, 0)
    targets = np.random.default_rng(1).integers(0, 1000, 64)
    sg, _, _ = isp_subgraph(g, targets, cfg, key)
    host = _host(g, targets, cfg, key)
    assert sg == host
    assert sg.digest() == host.digest()


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), fan=st.lists(st.integers(0, 8), min_size=1, max_size=3),
       replace=st.booleans(), width=st.sampled_from([4, 8]))
def test_equivalence_randomized(seed, fan, replace, width):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 2000)), int(rng.integers(0, 20000)), width)
    targets = rng.integers(0, g.num_nodes, int(rng.integers(1, 100)))
    cfg = SamplingConfig(len(targets), tuple(fan), replace, seed)
    sg, _, _ = isp_subgraph(g, targets, cfg, seed)
    assert sg == _host(g, targets, cfg, seed)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), length=st.integers(1, 4), w=st.integers(1, 3))
def test_walk_equivalence(seed, length, w):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 500, 3000)
    targets = rng.integers(0, 500, 20)
    blob = NsConfigBlob((w,) * length, seed, make_records(GraphFileLayout.of(g), targets),
                        GraphFileLayout.of(g).indices_offset, g.id_width,
                        FLAG_WITH_REPLACEMENT | FLAG_RANDOM_WALK)
    req = device(g).run_command(submit_isp_request(blob, 20, SsdConfig())[0][0])
    _, sg = decode_payload(req.payload, targets, random_walk=True, walks_per_target=w)
    assert sg == random_walk_sample(ArrayAccess(g), targets, RandomWalkConfig(length, w, seed),
                                    CounterRng(seed))


def test_only_derivable_pages_are_read():
    g = powerlaw_graph(3000, 20, seed=4)
    cfg = SamplingConfig(50, (10, 5), True, 8)
    targets = np.arange(0, 3000, 60)
    fw = device(g, record=True)
    fw.ssd.pages_read_log = []
    req = fw.run_command(one_command(g, targets, cfg, 8))
    _, sg = decode_payload(req.payload, targets)
    P = 16384
    lay = GraphFileLayout.of(g)
    allowed = set()
    expanded = np.concatenate([targets] + [c for _, c in sg.layers])
    for v in np.unique(expanded).tolist():
        lba, off, length = lay.locate_edge_list(v)
        if length:
            s = lba * 4096 + off
            allowed.update(range(s // P, (s + length - 1) // P + 1))
        for b in (HEADER_BYTES + 8 * v, HEADER_BYTES + 8 * v + 15):
            allowed.add(b // P)
    assert set(fw.ssd.pages_read_log) <= allowed
    for addr, rid, node in fw.flash_queue.log:
        assert addr.channel < 8 and node in set(expanded.tolist())


# --- subgraph buffer -----------------------------------------------------------


def test_overflow_fails_with_capacity_error():
    g = powerlaw_graph(2000, 20, seed=5)
    cfg = SsdConfig(subgraph_buffer_bytes=2048)
    fw = device(g, cfg)
    req = fw.run_command(one_command(g, np.arange(200), SamplingConfig(200, (25, 10)), 1))
    assert req.state is RequestState.FAILED and req.capacity_error
    assert fw.stats.capacity_failures == 1
    assert fw.subgraph_buffer.total == 0 and fw.scheduler.active_streams == 0


def test_subgraph_buffer_accounting():
    buf = PendingSubgraphBuffer(100)
    buf.reserve(1, 60)
    with pytest.raises(SubgraphBufferOverflow):
        buf.reserve(2, 41)
    buf.reserve(2, 40)
    buf.release(1)
    assert buf.total == 40 and buf.peak == 100


def test_flash_queue_dedups_in_fifo_order():
    q = PendingFlashQueue(8, record=True)
    q.push(np.array([5, 9, 5]), 1, np.array([0, 0, 1]))
    q.push(np.array([9, 2]), 2, np.array([3, 4]))
    assert len(q) == 5
    assert q.drain().tolist() == [5, 9, 2]
    assert len(q) == 0 and q.log[0][0].channel == 5


# --- polling and return -----------------------------------------------------


def test_poll_without_ready_requests_is_noop():
    g = powerlaw_graph(100, 4, seed=1)
    fw = device(g)
    assert fw.poll_and_return(1000.0) == []
    assert fw.ssd.bytes_to_host == 0


def test_return_waits_for_poll_tick():
    g = powerlaw_graph(300, 6, seed=2)
    fw = device(g)
    req = fw.handle_isp_command(one_command(g, np.arange(10), SamplingConfig(10, (3,)), 1), 0.0)
    fw.service_flash_and_sample(req)
    assert req.state is RequestState.READY
    assert fw.poll_and_return(req.ready_at - 1e-3) == []
    tick = fw.next_poll(req.ready_at)
    assert tick % 5 == pytest.approx(0) and tick >= req.ready_at
    assert fw.poll_and_return(tick) == [req]
    assert req.state is RequestState.RETURNED
    assert fw.ssd.bytes_to_host == len(req.payload)


def test_35_id_payload_size():
    # target 0 has 25 distinct neighbors; only neighbor 1 has neighbors of its own
    src = [0] * 25 + [1] * 12
    dst = list(range(1, 26)) + list(range(26, 38))
    g = CsrGraph.from_edges(40, src, dst)
    cfg = SamplingConfig(1, (25, 10), False, 3)
    sg, req, fw = isp_subgraph(g, [0], cfg, 3)
    assert req.ids_sampled == 35
    hop_slots = 1 + 25
    assert len(req.payload) == PAYLOAD_HEAD.size + 2 * hop_slots + 35 * 8
    assert fw.ssd.bytes_to_host == len(req.payload)


def test_worst_case_return_bytes_bound():
    g = powerlaw_graph(5000, 40, seed=6, id_width=4)
    sg, req, _ = isp_subgraph(g, np.arange(1024), SamplingConfig(1024, (25, 10)), 7)
    assert req.ids_sampled * 8 <= 1024 * (25 + 25 * 10) * 8


# --- payload codec ---------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), layers=st.integers(1, 3), m=st.integers(1, 40))
def test_payload_round_trip(seed, layers, m):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 10**12, m)
    slots = unique_in_order(targets)
    hops = []
    for _ in range(layers):
        counts = rng.integers(0, 4, len(slots))
        ids = rng.integers(0, 2**63 - 1, int(counts.sum()))
        hops.append((counts, ids))
        slots = unique_in_order(ids)
    blob = encode_payload(77, m, hops)
    rid, sg = decode_payload(blob, targets)
    assert rid == 77
    for (counts, ids), (p, c) in zip(hops, sg.layers):
        assert c.tolist() == ids.tolist() and len(p) == len(c)
    with pytest.raises(PayloadError):
        decode_payload(blob[:-1], targets)
    with pytest.raises(PayloadError):
        decode_payload(blob + b"\0", targets)


def test_payload_target_count_checked():
    blob = encode_payload(1, 2, [(np.array([0, 0]), np.zeros(0, np.int64))])
    with pytest.raises(PayloadError):
        decode_payload(blob, [1, 2, 3])


# --- core contention -------------------------------------------------------------


def test_contention_examples():
    sch = CoreScheduler(2, 1e7, 0.2)
    full = 2 * 1e7 * 0.8
    assert contention_slowdown(1, sch) == pytest.approx(full)
    assert contention_slowdown(2, sch) == pytest.approx(full)
    assert contention_slowdown(4, sch) == pytest.approx(full / 2)
    rates = [contention_slowdown(n, sch) for n in range(1, 13)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        contention_slowdown(0, sch)


def test_scheduler_counts_distinct_streams():
    sch = CoreScheduler(2, 1e7, 0.0)
    for s in (1, 1, 2, 3, 4):
        sch.acquire(s)
    assert sch.active_streams == 4 and sch.rate() == pytest.approx(1e7)
    sch.release(1)
    assert sch.active_streams == 4
    sch.release(1)
    assert sch.active_streams == 3
