import queue
import threading
import time

import numpy as np
import pytest

from featdrive.graph import (
    SampledBatch,
    SamplingError,
    Topology,
    batch_rng_seed,
    max_batch_nodes,
    partition_epoch,
    sample_khop,
    sampler_worker,
    validate_fanouts,
)


def star(n_leaves=20):
    return Topology.from_edges(n_leaves + 1, np.arange(1, n_leaves + 1), np.zeros(n_leaves, dtype=int))


def test_partition_examples():
    chunks = partition_epoch(np.arange(10), 4, 123)
    assert [len(c) for c in chunks] == [4, 4, 2]
    assert sorted(np.concatenate(chunks).tolist()) == list(range(10))
    again = partition_epoch(np.arange(10), 4, 123)
    assert all(np.array_equal(a, b) for a, b in zip(chunks, again))
    singles = partition_epoch(np.arange(10), 1, 123)
    assert [c.tolist() for c in singles] == [[x] for x in np.concatenate(chunks).tolist()]
    assert partition_epoch([], 4, 0) == []
    with pytest.raises(ValueError):
        partition_epoch(np.arange(3), 0, 0)


def test_fanout_validation_and_bound():
    with pytest.raises(ValueError):
        validate_fanouts(())
    with pytest.raises(ValueError):
        validate_fanouts((10, 0))
    assert max_batch_nodes(1000, (10, 10, 10)) == 1000 * 1111 == 1_111_000
    assert max_batch_nodes(1000, (10, 10, 10), num_nodes=5000) == 5000
    assert 4 * max_batch_nodes(1000, (10, 10, 10)) == 4_444_000


def test_topology_validation():
    with pytest.raises(ValueError):
        Topology(np.array([0, 2, 1]), np.zeros(1, dtype=np.uint64))
    with pytest.raises(ValueError):
        Topology(np.array([0, 1, 3]), np.zeros(2, dtype=np.uint64))
    t = Topology.from_edges(3, [1, 2, 0], [0, 0, 2])
    assert t.in_neighbors(0).tolist() == [1, 2] and t.in_degree([0, 1, 2]).tolist() == [2, 0, 1]


def test_single_neighbor_always_taken():
    t = Topology.from_edges(2, [1], [0])
    for s in range(20):
        b = sample_khop(t, [0], (10,), s)
        assert b.nodes.tolist() == [0, 1] and b.edges.tolist() == [[1], [0]]


def test_zero_degree_seed():
    t = Topology.from_edges(3, [1], [0])
    b = sample_khop(t, [2], (5, 5, 5), 0)
    assert b.nodes.tolist() == [2] and b.edges.shape == (2, 0)


def test_seed_out_of_range():
    with pytest.raises(IndexError):
        sample_khop(star(), [21], (5,), 0)


def test_star_uniformity():
    t = star(20)
    counts = np.zeros(21)
    runs = 10_000
    for r in range(runs):
        b = sample_khop(t, [0], (5,), batch_rng_seed(99, 0, r))
        assert len(b.nodes) == 6
        counts[b.nodes[1:]] += 1
    freq = counts[1:] / runs
    assert np.all(np.abs(freq - 5 / 20) <= 0.02), freq


def test_batch_invariants_and_determinism(ds64):
    topo = ds64.topology
    seeds = np.random.default_rng(1).choice(topo.num_nodes, 300, replace=False)
    fan = (10, 5, 3)
    a = sample_khop(topo, seeds, fan, batch_rng_seed(7, 2, 11), batch_id=11, epoch=2)
    b = sample_khop(topo, seeds, fan, batch_rng_seed(7, 2, 11), batch_id=11, epoch=2)
    c = sample_khop(topo, seeds, fan, batch_rng_seed(7, 2, 12))
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.edges, b.edges)
    assert not np.array_equal(a.nodes, c.nodes)
    assert len(np.unique(a.nodes)) == len(a.nodes)
    assert a.nodes[:300].tolist() == seeds.tolist()
    assert a.edges.max() < len(a.nodes)
    assert len(a.nodes) <= max_batch_nodes(300, fan)
    # every edge is a real in-edge and within one target, neighbors are distinct
    src, dst = a.nodes[a.edges[0]], a.nodes[a.edges[1]]
    for s, d in list(zip(src.tolist(), dst.tolist()))[:2000]:
        assert s in topo.in_neighbors(d)
    pairs = set(zip(src.tolist(), dst.tolist()))
    assert len(pairs) == len(src)
    per_target = np.bincount(a.edges[1], minlength=len(a.nodes))
    assert per_target.max() <= 10


def test_duplicate_seeds_are_merged():
    t = star(5)
    b = sample_khop(t, [0, 0, 3], (2,), 0)
    assert b.nodes[:2].tolist() == [0, 3]
    assert len(np.unique(b.nodes)) == len(b.nodes)


def test_degree_above_fanout_respects_fanout(ds64):
    topo = ds64.topology
    hub = int(np.argmax(np.diff(topo.indptr)))
    b = sample_khop(topo, [hub], (3,), 0)
    assert len(b.nodes) == 4


def _tasks(chunks, n_samplers):
    q = queue.Queue()
    for i, c in enumerate(chunks):
        q.put((i, c))
    for _ in range(n_samplers):
        q.put(None)
    return q


def test_sampler_workers_exactly_once(ds64):
    chunks = partition_epoch(np.arange(1000), 100, 0)
    tasks = _tasks(chunks, 4)
    out = queue.Queue()
    ts = [threading.Thread(target=sampler_worker, args=(ds64.topology, (5, 5), tasks, out, 0)) for _ in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    got = [out.get_nowait() for _ in range(out.qsize())]
    assert sorted(b.batch_id for b in got) == list(range(10))
    assert sorted(np.concatenate([b.seeds for b in got]).tolist()) == list(range(1000))
    ref = sample_khop(ds64.topology, chunks[3], (5, 5), batch_rng_seed(0, 0, 3))
    assert np.array_equal(next(b for b in got if b.batch_id == 3).nodes, ref.nodes)


def test_single_sampler_order(ds64):
    tasks = _tasks([np.array([1, 2])], 1)
    out = queue.Queue()
    assert sampler_worker(ds64.topology, (2,), tasks, out, 0) == 1
    assert out.get_nowait().batch_id == 0


def test_samplers_block_on_full_queue(ds64):
    chunks = partition_epoch(np.arange(1000), 50, 0)
    tasks = _tasks(chunks, 4)
    out = queue.Queue(6)
    stop = threading.Event()
    ts = [threading.Thread(target=sampler_worker, args=(ds64.topology, (3,), tasks, out, 0),
                           kwargs={"stop": stop, "poll": 0.01}) for _ in range(4)]
    for t in ts:
        t.start()
    time.sleep(0.5)
    assert out.qsize() == 6
    assert all(t.is_alive() for t in ts)
    drained = 0
    while drained < len(chunks):
        out.get(timeout=5)
        drained += 1
    for t in ts:
        t.join(5)
    assert drained == 20 and not any(t.is_alive() for t in ts)


def test_sampling_error_carries_batch_id():
    tasks = _tasks([np.array([0]), np.array([99])], 1)
    with pytest.raises(SamplingError) as ei:
        sampler_worker(star(3), (2,), tasks, queue.Queue(), 0)
    assert ei.value.batch_id == 1


def test_sampled_batch_num_nodes():
    b = SampledBatch(0, np.array([1]), np.array([1, 2, 3]), np.zeros((2, 0), dtype=int))
    assert b.num_nodes == 3
