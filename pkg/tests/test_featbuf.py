import threading
import time

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from featdrive.featbuf import (
    BufferTimeout,
    FeatureBuffer,
    InvariantError,
    StagingBuffer,
    StandbyList,
)


def load(fb, nodes):
    """Metadata-only load of claimed nodes."""
    nodes = np.asarray(nodes)
    slots = fb.get_standby_slots(len(nodes))
    assert len(slots) == len(nodes)
    fb.bind_slots(nodes, slots)
    fb.publish_valid(nodes)
    return slots


def reuse_state(mapping="dense"):
    """Slots 0,1,5 hold referenced nodes 1,9,3; slot 3 holds released node 0, slot 4 released node 7;
    slot 2 is free. Standby (LRU->MRU) = [2, 3, 4]."""
    fb = FeatureBuffer(10, 6, 4, mapping=mapping, check=True)
    nodes = np.array([1, 9, 8, 0, 7, 3])
    acq = fb.acquire_for_batch(nodes)
    assert len(acq.load_pos) == 6
    slots = fb.get_standby_slots(6)
    assert slots.tolist() == [0, 1, 2, 3, 4, 5]
    fb.bind_slots(nodes, slots)
    fb.abort_loads([8])
    fb.publish_valid([1, 9, 0, 7, 3])
    fb.release_batch([8, 0, 7])
    assert fb.standby.order().tolist() == [2, 3, 4]
    return fb


@pytest.mark.parametrize("mapping", ["dense", "sparse"])
def test_slot_reuse_walkthrough(mapping):
    fb = reuse_state(mapping)
    batch = np.array([7, 6, 1, 9, 5])
    acq = fb.acquire_for_batch(batch)
    assert acq.alias.tolist() == [4, -1, 0, 1, -1]
    assert batch[acq.load_pos].tolist() == [6, 5] and len(acq.wait_pos) == 0
    assert fb.entry(7) == (4, 1, 1)
    assert 4 not in fb.standby
    assert fb.entry(1) == (0, 2, 1) and fb.entry(9) == (1, 2, 1)

    s6 = fb.get_standby_slot()
    assert s6 == 2
    fb.bind_slot(6, s6)
    assert fb.reverse[2] == 6 and fb.entry(6) == (2, 1, 0)
    s5 = fb.get_standby_slot()
    assert s5 == 3
    assert fb.entry(0) == (-1, 0, 0)  # node 0 invalidated when slot 3 was reused
    fb.bind_slot(5, s5)
    fb.publish_valid([6, 5])
    assert fb.slots_of(batch).tolist() == [4, 2, 0, 1, 3]
    assert fb.stats()["evictions"] == 1

    fb.release_batch([3])
    assert fb.standby.order().tolist()[-1] == 5
    assert fb.entry(3) == (5, 0, 1)  # lazily kept valid
    fb.check_invariants()


def test_cold_start():
    fb = FeatureBuffer(100, 10, 4, check=True)
    acq = fb.acquire_for_batch([5, 6, 7])
    assert acq.alias.tolist() == [-1, -1, -1] and acq.load_pos.tolist() == [0, 1, 2]
    assert len(acq.wait_pos) == 0


def test_free_lru_slot_no_invalidation():
    fb = FeatureBuffer(100, 4, 4, check=True)
    fb.acquire_for_batch([1])
    assert fb.get_standby_slot() == 0
    assert fb.stats()["evictions"] == 0


def test_lazy_invalidation_reuse():
    fb = FeatureBuffer(100, 4, 4, check=True)
    fb.acquire_for_batch([1, 2])
    load(fb, [1, 2])
    fb.release_batch([1, 2])
    acq = fb.acquire_for_batch([2])
    assert len(acq.load_pos) == 0 and acq.alias.tolist() == [1]
    assert fb.stats()["hits"] == 1


def test_lru_order_and_eviction():
    fb = FeatureBuffer(100, 3, 4, check=True)
    for n in (10, 11, 12):
        fb.acquire_for_batch([n])
        load(fb, [n])
    fb.release_batch([11])
    fb.release_batch([10])
    fb.release_batch([12])
    assert fb.standby.order().tolist() == [1, 0, 2]
    fb.acquire_for_batch([20])
    assert fb.get_standby_slot() == 1
    assert fb.entry(11) == (-1, 0, 0)
    assert fb.entry(10)[2] == 1


def test_release_with_higher_ref():
    fb = FeatureBuffer(100, 4, 4, check=True)
    fb.acquire_for_batch([1])
    load(fb, [1])
    fb.acquire_for_batch([1])
    n_standby = len(fb.standby)
    fb.release_batch([1])
    assert fb.entry(1)[1] == 1 and len(fb.standby) == n_standby
    fb.release_batch([1])
    assert fb.entry(1)[1] == 0 and len(fb.standby) == n_standby + 1
    with pytest.raises(InvariantError):
        fb.release_batch([1])


def test_guards():
    fb = FeatureBuffer(100, 4, 4, check=True)
    fb.acquire_for_batch([1, 2])
    s = fb.get_standby_slots(2)
    fb.bind_slot(1, int(s[0]))
    with pytest.raises(InvariantError):
        fb.bind_slot(2, int(s[0]))  # slot already bound
    with pytest.raises(InvariantError):
        fb.publish_valid([2])  # no slot: impossible state
    with pytest.raises(ValueError):
        FeatureBuffer(100, 7, 4, min_slots=8)
    with pytest.raises(InvariantError):
        fb.acquire_for_batch([3, 3])


def test_blocked_allocation_wakes_on_release():
    fb = FeatureBuffer(100, 1, 4, check=True)
    fb.acquire_for_batch([1])
    load(fb, [1])
    fb.acquire_for_batch([2])
    got = []
    t = threading.Thread(target=lambda: got.append(fb.get_standby_slot(timeout=5)))
    t.start()
    time.sleep(0.1)
    assert t.is_alive()
    fb.release_batch([1])
    t.join(5)
    assert got == [0] and fb.entry(1) == (-1, 0, 0)


def test_allocation_timeout():
    fb = FeatureBuffer(100, 1, 4, wait_timeout=0.05)
    fb.acquire_for_batch([1])
    load(fb, [1])
    with pytest.raises(BufferTimeout):
        fb.get_standby_slot()
    assert len(fb.get_standby_slots(1, block=False)) == 0


def test_two_waiters_wake_on_one_publish():
    fb = FeatureBuffer(100, 4, 4, check=True)
    acq = fb.acquire_for_batch([1])
    assert len(acq.load_pos) == 1
    results = []
    barrier = threading.Barrier(3)

    def waiter():
        a = fb.acquire_for_batch([1])
        assert a.wait_pos.tolist() == [0]
        barrier.wait()
        results.append(fb.wait_valid([1], timeout=5))

    ts = [threading.Thread(target=waiter) for _ in range(2)]
    for t in ts:
        t.start()
    barrier.wait()
    time.sleep(0.05)
    fb.bind_slot(1, fb.get_standby_slot())
    fb.publish_valid([1])
    for t in ts:
        t.join(5)
    assert [len(r) for r in results] == [0, 0]
    assert fb.entry(1)[1] == 3


def test_failed_load_is_reclaimed_by_waiter():
    fb = FeatureBuffer(100, 4, 4, check=True)
    fb.acquire_for_batch([1, 2])
    s = fb.get_standby_slots(2)
    fb.bind_slots([1, 2], s)
    b = fb.acquire_for_batch([2])
    assert b.wait_pos.tolist() == [0]
    fb.abort_loads([1, 2])  # first loader gives up
    fb.release_batch([1, 2])
    orphans = fb.wait_valid([2], timeout=1)
    assert orphans.tolist() == [2] and fb.stats()["abandoned_loads"] == 1
    load(fb, [2])
    assert len(fb.wait_valid([2], timeout=1)) == 0
    # aborted slots come back first
    assert fb.standby.order()[0] in s
    fb.check_invariants()


def test_standby_list_ops():
    sb = StandbyList(6)
    assert sb.pop_lru(2).tolist() == [0, 1]
    sb.remove([3])
    assert sb.order().tolist() == [2, 4, 5]
    sb.append([3, 0])
    sb.push_front([1])
    assert sb.order().tolist() == [1, 2, 4, 5, 3, 0]
    with pytest.raises(InvariantError):
        sb.append([2])
    sb.remove([4])
    with pytest.raises(InvariantError):
        sb.remove([4])
    assert sb.pop_lru(10).tolist() == [1, 2, 5, 3, 0]
    assert len(sb) == 0 and sb.pop_lru(1).tolist() == []


def test_standby_compaction_keeps_order():
    sb = StandbyList(8)
    rng = np.random.default_rng(0)
    ref = list(range(8))
    for _ in range(2000):
        k = int(rng.integers(1, 4))
        got = sb.pop_lru(k).tolist()
        assert got == ref[:k]
        ref = ref[k:]
        back = rng.permutation(got).tolist()
        sb.append(back)
        ref += back
    assert sb.order().tolist() == ref


class BufferMachine(RuleBasedStateMachine):
    """Random single-threaded interleavings of several logical extractors, checked against
    an event-log reference count oracle."""

    N, S = 12, 6

    def __init__(self):
        super().__init__()
        self.fb = FeatureBuffer(self.N, self.S, 4, check=True)
        self.held = []  # batches between acquire and release
        self.pending = {}  # node -> loader batch index
        self.region = np.full(self.S, -1)

    @rule(nodes=st.lists(st.integers(0, 11), min_size=1, max_size=3, unique=True))
    def acquire(self, nodes):
        if sum(len(b) for b in self.held) + len(nodes) > self.S:
            return
        acq = self.fb.acquire_for_batch(nodes)
        for p in acq.load_pos:
            self.pending[nodes[p]] = len(self.held)
        self.held.append(list(nodes))

    @precondition(lambda self: self.pending)
    @rule(data=st.data())
    def load_one(self, data):
        node = data.draw(st.sampled_from(sorted(self.pending)))
        slots = self.fb.get_standby_slots(1, block=False)
        if not len(slots):
            return
        self.fb.bind_slot(node, int(slots[0]))
        if data.draw(st.booleans()) and data.draw(st.booleans()):
            self.fb.abort_loads([node])  # loader failure
            self.fb.map.loading[node] = True  # a waiter re-claims it
        else:
            self.region[slots[0]] = node
            self.fb.publish_valid([node])
            del self.pending[node]

    @precondition(lambda self: self.held)
    @rule(data=st.data())
    def release(self, data):
        i = data.draw(st.integers(0, len(self.held) - 1))
        batch = self.held[i]
        if any(n in self.pending for n in batch):
            return
        assert self.region[self.fb.slots_of(batch)].tolist() == batch
        self.fb.release_batch(batch)
        self.held.pop(i)

    @invariant()
    def consistent(self):
        self.fb.check_invariants()
        counts = np.zeros(self.N, dtype=int)
        for b in self.held:
            counts[b] += 1
        assert self.fb.map.ref.tolist() == counts.tolist()
        m = self.fb.map
        assert not np.any((m.slot < 0) & m.valid)


TestBufferMachine = BufferMachine.TestCase
TestBufferMachine.settings = settings(max_examples=150, stateful_step_count=40, deadline=None)


def test_staging_sizes_and_alignment():
    sb = StagingBuffer(4, 1000, 512, block_rows=16)
    assert sb.total_bytes == 4 * 1000 * 512
    assert sb.base_address % 4096 == 0
    assert np.all(sb.addresses(np.arange(sb.num_blocks)) % 512 == 0)
    assert sb.blocks_per_region == 62
    acct = sb.accounting()
    assert acct["staging_bytes"] == 4 * 1000 * 512 and acct["free_blocks"] == 4 * 62
    sb.close()


def test_staging_alloc_and_borrow():
    same = StagingBuffer(2, 32, 512, block_rows=16, owners=[0, 0])
    assert len(same.alloc(0, 3)[0]) == 2  # siblings never lend
    same.close()
    sb = StagingBuffer(2, 64, 512, block_rows=16, owners=[0, 1])
    own, borrowed = sb.alloc(0, 3)
    assert len(own) == 3 and not borrowed.any() and set(sb.region_of(own)) == {0}
    more, borrowed = sb.alloc(0, 3)
    assert len(more) == 3 and borrowed.tolist() == [False, True, True]
    assert sb.borrows == 2
    none, _ = sb.alloc(0, 4, borrow=True)
    assert len(none) == 2
    assert len(sb.alloc(1, 1)[0]) == 0
    sb.free(np.concatenate((own, more, none)))
    assert sb.free_blocks() == 8
    sb.close()


def test_staging_resident_rows():
    sb = StagingBuffer(2, 32, 512, block_rows=16, keep_resident=True, owners=[0, 1])
    blocks, _ = sb.alloc(0, 1)
    offs = sb.offsets(blocks)[0] + np.array([0, 512])
    sb.note_resident([5, 6], offs, [blocks[0], blocks[0]])
    sb.free(blocks)
    mask, o, b = sb.pin_resident([6, 7, 5])
    assert mask.tolist() == [True, False, True] and o.tolist() == [offs[1], offs[0]]
    # pinned block is not handed out again while pinned
    got, _ = sb.alloc(0, 2, borrow=False)
    assert blocks[0] not in got
    sb.free(got)
    sb.unpin(b)
    got, _ = sb.alloc(0, 2, borrow=False)
    assert blocks[0] in got
    assert sb.pin_resident([5])[0].tolist() == [False]  # reuse forgot the rows
    sb.close()
