"""Feature-buffer slot management.

Four pieces cooperate under one mutex:

* a mapping table (node -> slot index, reference count, valid bit, plus an
  in-flight "loading" bit naming whether some extractor owns the load),
* the slot array itself (owned by a host or simulated-device region),
* a reverse mapping (slot -> node or -1),
* a standby list of slots that are free or hold unreferenced rows, in LRU order.

Released rows stay valid in their slots until the slot is handed to another
node, so a later batch touching the same node reuses it without disk I/O.

All operations take arrays of node ids. No lock is held across disk I/O or
copies; the slot payload is written before :meth:`FeatureBuffer.publish_valid`
under the same lock, which gives waiters a happens-before edge.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

_FRONT = -1


class InvariantError(AssertionError):
    """A buffer-manager invariant was violated (always a bug, never an I/O condition)."""


class BufferTimeout(TimeoutError):
    """Waited longer than the configured timeout for a slot or a node."""


class StandbyList:
    """LRU-ordered set of slot ids with O(1) membership and removal.

    Entries live in an append-only queue of numpy chunks; removal just clears
    the slot's membership bit, and stale queue entries are skipped (then
    compacted) when popping. ``push_front`` puts slots at the LRU end so they
    are reused before anything else.
    """

    def __init__(self, num_slots, initial=True):
        self.num_slots = num_slots
        self._in = np.zeros(num_slots, dtype=bool)
        self._stamp = np.zeros(num_slots, dtype=np.int64)
        self._chunks = deque()
        self._head = 0
        self._queued = 0
        self._front = []
        self._next = 0
        self._live = 0
        if initial and num_slots:
            self.append(np.arange(num_slots, dtype=np.int64))

    def __len__(self):
        return self._live

    def __contains__(self, slot):
        return bool(self._in[slot])

    def contains(self, slots):
        return self._in[slots]

    def append(self, slots):
        """Insert at the MRU tail."""
        slots = np.asarray(slots, dtype=np.int64)
        if not len(slots):
            return
        if self._in[slots].any():
            raise InvariantError("slot already in standby list")
        st = np.arange(self._next, self._next + len(slots), dtype=np.int64)
        self._next += len(slots)
        self._stamp[slots] = st
        self._in[slots] = True
        self._chunks.append((slots.copy(), st))
        self._queued += len(slots)
        self._live += len(slots)
        if self._queued > 4 * self.num_slots + 1024:
            self._compact()

    def push_front(self, slots):
        """Insert at the LRU head."""
        slots = np.asarray(slots, dtype=np.int64)
        if not len(slots):
            return
        if self._in[slots].any():
            raise InvariantError("slot already in standby list")
        self._in[slots] = True
        self._stamp[slots] = _FRONT
        # stack: last element is popped first
        self._front.extend(slots[::-1].tolist())
        self._live += len(slots)

    def remove(self, slots):
        slots = np.asarray(slots, dtype=np.int64)
        if not len(slots):
            return
        if not self._in[slots].all():
            raise InvariantError("removing slot that is not in standby list")
        self._in[slots] = False
        self._live -= len(slots)

    def pop_lru(self, k):
        """Remove and return up to ``k`` slots, least recently used first."""
        out = []
        need = min(k, self._live)
        while need and self._front:
            s = self._front.pop()
            if self._in[s] and self._stamp[s] == _FRONT:
                self._in[s] = False
                out.append(np.array([s], dtype=np.int64))
                need -= 1
        while need and self._chunks:
            sl, st = self._chunks[0]
            sl_h, st_h = sl[self._head:], st[self._head:]
            ok = np.flatnonzero(self._in[sl_h] & (self._stamp[sl_h] == st_h))
            if len(ok) > need:
                ok = ok[:need]
                taken = sl_h[ok]
                advance = int(ok[-1]) + 1
                self._head += advance
                self._queued -= advance
            else:
                taken = sl_h[ok]
                self._queued -= len(sl_h)
                self._chunks.popleft()
                self._head = 0
            self._in[taken] = False
            out.append(taken)
            need -= len(taken)
        if not out:
            return np.empty(0, dtype=np.int64)
        got = np.concatenate(out)
        self._live -= len(got)
        return got

    def order(self):
        """Live slots from LRU to MRU (diagnostics and tests)."""
        parts = []
        front = [s for s in reversed(self._front) if self._in[s] and self._stamp[s] == _FRONT]
        seen = set()
        uniq_front = []
        for s in front:
            if s not in seen:
                seen.add(s)
                uniq_front.append(s)
        parts.append(np.array(uniq_front, dtype=np.int64))
        for i, (sl, st) in enumerate(self._chunks):
            h = self._head if i == 0 else 0
            sl_h, st_h = sl[h:], st[h:]
            parts.append(sl_h[self._in[sl_h] & (self._stamp[sl_h] == st_h)])
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def _compact(self):
        live = self.order()
        front = [s for s in live.tolist() if self._stamp[s] == _FRONT]
        rest = live[len(front):]
        self._chunks.clear()
        self._head = 0
        self._queued = len(rest)
        self._front = front[::-1]
        if len(rest):
            self._chunks.append((rest.copy(), self._stamp[rest].copy()))


class DenseMapping:
    """Mapping table as flat arrays indexed by node id."""

    kind = "dense"

    def __init__(self, num_nodes):
        self.num_nodes = num_nodes
        self.slot = np.full(num_nodes, -1, dtype=np.int64)
        self.ref = np.zeros(num_nodes, dtype=np.int32)
        self.valid = np.zeros(num_nodes, dtype=bool)
        self.loading = np.zeros(num_nodes, dtype=bool)

    def rows(self, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= self.num_nodes):
            raise IndexError("node id out of range")
        return nodes

    def touched(self):
        return np.flatnonzero((self.slot >= 0) | (self.ref > 0) | self.loading | self.valid)

    def node_of_row(self, rows):
        return rows

    @property
    def entry_bytes(self):
        return 8 + 4 + 1 + 1


class SparseMapping:
    """Mapping table keyed by a hash map; rows are allocated on first touch.

    For graphs where a dense table would not fit in memory. Rows are never
    reclaimed, so memory follows the number of distinct nodes ever extracted.
    """

    kind = "sparse"

    def __init__(self, num_nodes, initial_rows=1024):
        self.num_nodes = num_nodes
        self._index = {}
        self._nodes = np.empty(initial_rows, dtype=np.int64)
        self.slot = np.full(initial_rows, -1, dtype=np.int64)
        self.ref = np.zeros(initial_rows, dtype=np.int32)
        self.valid = np.zeros(initial_rows, dtype=bool)
        self.loading = np.zeros(initial_rows, dtype=bool)
        self._used = 0

    def _grow(self, need):
        cap = len(self.slot)
        while cap < need:
            cap *= 2
        if cap == len(self.slot):
            return
        n = len(self.slot)
        self._nodes = np.concatenate((self._nodes, np.empty(cap - n, dtype=np.int64)))
        self.slot = np.concatenate((self.slot, np.full(cap - n, -1, dtype=np.int64)))
        self.ref = np.concatenate((self.ref, np.zeros(cap - n, dtype=np.int32)))
        self.valid = np.concatenate((self.valid, np.zeros(cap - n, dtype=bool)))
        self.loading = np.concatenate((self.loading, np.zeros(cap - n, dtype=bool)))

    def rows(self, nodes):
        out = np.empty(len(nodes), dtype=np.int64)
        index = self._index
        for i, n in enumerate(np.asarray(nodes, dtype=np.int64).tolist()):
            r = index.get(n)
            if r is None:
                if not 0 <= n < self.num_nodes:
                    raise IndexError("node id out of range")
                r = self._used
                self._grow(r + 1)
                index[n] = r
                self._nodes[r] = n
                self._used += 1
            out[i] = r
        return out

    def touched(self):
        return np.arange(self._used)

    def node_of_row(self, rows):
        return self._nodes[rows]

    @property
    def entry_bytes(self):
        return 8 + 4 + 1 + 1 + 8 + 64  # arrays plus rough dict overhead per node


@dataclass
class Acquisition:
    nodes: np.ndarray
    alias: np.ndarray  # slot per node, -1 where a load is still required
    load_pos: np.ndarray  # positions this extractor must load
    wait_pos: np.ndarray  # positions another extractor is loading


class FeatureBuffer:
    """Slot pool plus mapping metadata shared by extractors and the releaser."""

    def __init__(self, num_nodes, num_slots, row_bytes, min_slots=0, mapping="auto",
                 wait_timeout=60.0, check=False):
        if num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        if num_slots < min_slots:
            raise ValueError(f"{num_slots} slots < reservation N_e x M_b = {min_slots}")
        if mapping == "auto":
            mapping = "dense" if num_nodes <= 32_000_000 else "sparse"
        if mapping not in ("dense", "sparse"):
            raise ValueError(f"mapping must be dense, sparse or auto, not {mapping!r}")
        self.num_nodes = num_nodes
        self.num_slots = num_slots
        self.row_bytes = row_bytes
        self.wait_timeout = wait_timeout
        self.check = check
        self.map = DenseMapping(num_nodes) if mapping == "dense" else SparseMapping(num_nodes)
        self.reverse = np.full(num_slots, -1, dtype=np.int64)
        self.standby = StandbyList(num_slots)
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.hits = 0
        self.loads = 0
        self.waits = 0
        self.evictions = 0
        self.abandoned = 0

    # -- metadata operations -------------------------------------------------

    def acquire_for_batch(self, nodes):
        """Reference every node once and sort it into hit / wait / load."""
        nodes = np.asarray(nodes, dtype=np.int64)
        with self.lock:
            m = self.map
            r = m.rows(nodes)
            if self.check and len(np.unique(r)) != len(r):
                raise InvariantError("batch node list is not deduplicated")
            valid = m.valid[r]
            ref = m.ref[r]
            loading = m.loading[r]
            alias = np.full(len(nodes), -1, dtype=np.int64)

            reuse = valid & (ref == 0)
            if reuse.any():
                self.standby.remove(m.slot[r[reuse]])
            alias[valid] = m.slot[r[valid]]

            wait = ~valid & loading
            alias[wait] = m.slot[r[wait]]
            load = ~valid & ~loading
            m.loading[r[load]] = True
            m.ref[r] += 1

            self.hits += int(valid.sum())
            self.waits += int(wait.sum())
            if self.check:
                self._check_locked(r)
        return Acquisition(nodes, alias, np.flatnonzero(load), np.flatnonzero(wait))

    def get_standby_slots(self, k, block=True, timeout=None):
        """Pop up to ``k`` LRU standby slots, invalidating whatever they held.

        With ``block`` the call waits until at least one slot is available
        (raising :class:`BufferTimeout` after ``timeout``, default the buffer's
        wait timeout); otherwise it may return an empty array.
        """
        if k <= 0:
            return np.empty(0, dtype=np.int64)
        timeout = self.wait_timeout if timeout is None else timeout
        with self.cond:
            if block and not len(self.standby):
                end = time.monotonic() + timeout
                while not len(self.standby):
                    left = end - time.monotonic()
                    if left <= 0:
                        raise BufferTimeout(
                            f"no standby slot within {timeout:.1f}s "
                            f"(slots={self.num_slots}); feature buffer undersized?")
                    self.cond.wait(left)
            slots = self.standby.pop_lru(k)
            prev = self.reverse[slots]
            held = prev >= 0
            if held.any():
                m = self.map
                pr = m.rows(prev[held])
                if self.check and (m.ref[pr].any() or not m.valid[pr].all()):
                    raise InvariantError("standby slot held a referenced or invalid node")
                m.valid[pr] = False
                m.slot[pr] = -1
                self.reverse[slots[held]] = -1
                self.evictions += int(held.sum())
        return slots

    def get_standby_slot(self, timeout=None):
        return int(self.get_standby_slots(1, block=True, timeout=timeout)[0])

    def bind_slots(self, nodes, slots):
        """Point each node at its freshly obtained slot; the valid bit stays 0."""
        nodes = np.asarray(nodes, dtype=np.int64)
        slots = np.asarray(slots, dtype=np.int64)
        with self.lock:
            m = self.map
            r = m.rows(nodes)
            if (self.reverse[slots] >= 0).any():
                raise InvariantError("binding a slot that is already bound")
            if (m.slot[r] >= 0).any():
                raise InvariantError("binding a node that already has a slot")
            if self.standby.contains(slots).any():
                raise InvariantError("binding a slot that is still on standby")
            m.slot[r] = slots
            self.reverse[slots] = nodes
            self.loads += len(nodes)

    def bind_slot(self, node, slot):
        self.bind_slots([node], [slot])

    def publish_valid(self, nodes):
        """Mark loaded rows ready and wake anyone waiting on them."""
        nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
        with self.cond:
            m = self.map
            r = m.rows(nodes)
            if (m.slot[r] < 0).any():
                raise InvariantError("publishing a node with no slot (impossible state)")
            m.valid[r] = True
            m.loading[r] = False
            self.cond.notify_all()

    def wait_valid(self, nodes, timeout=None):
        """Block until every node is valid, or return nodes this caller must load.

        A node whose loader gave up (not valid, nobody loading) is claimed for
        the caller and returned; the caller loads it and calls again for the
        rest. An empty result means everything is valid.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        timeout = self.wait_timeout if timeout is None else timeout
        end = time.monotonic() + timeout
        with self.cond:
            m = self.map
            r = m.rows(nodes)
            while True:
                pending = ~m.valid[r]
                if not pending.any():
                    return np.empty(0, dtype=np.int64)
                orphan = pending & ~m.loading[r]
                if orphan.any():
                    m.loading[r[orphan]] = True
                    self.abandoned += int(orphan.sum())
                    return nodes[orphan]
                left = end - time.monotonic()
                if left <= 0:
                    raise BufferTimeout(f"{int(pending.sum())} nodes not extracted within {timeout:.1f}s")
                self.cond.wait(left)

    def abort_loads(self, nodes):
        """Undo claims and binds for loads that will not complete."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if not len(nodes):
            return
        with self.cond:
            m = self.map
            r = m.rows(nodes)
            if m.valid[r].any():
                raise InvariantError("aborting a load that was already published")
            bound = m.slot[r] >= 0
            slots = m.slot[r[bound]]
            self.reverse[slots] = -1
            self.standby.push_front(slots)
            m.slot[r] = -1
            m.loading[r] = False
            self.loads -= int(bound.sum())
            self.cond.notify_all()

    def release_batch(self, nodes):
        """Drop one reference per node; unreferenced rows go to the MRU end of standby."""
        nodes = np.asarray(nodes, dtype=np.int64)
        with self.cond:
            m = self.map
            r = m.rows(nodes)
            if (m.ref[r] <= 0).any():
                raise InvariantError("reference count would drop below zero")
            m.ref[r] -= 1
            zero = m.ref[r] == 0
            if zero.any():
                rz = r[zero]
                if m.loading[rz].any():
                    raise InvariantError("last reference dropped while a load is in flight")
                ready = rz[m.valid[rz]]
                self.standby.append(m.slot[ready])
                self.cond.notify_all()
            if self.check:
                self._check_locked(r)

    def slots_of(self, nodes):
        with self.lock:
            m = self.map
            r = m.rows(nodes)
            if self.check and not m.valid[r].all():
                raise InvariantError("alias requested for a node that is not valid")
            return m.slot[r].copy()

    def entry(self, node):
        """(slot_index, ref_count, valid) for one node."""
        with self.lock:
            r = self.map.rows([node])[0]
            return int(self.map.slot[r]), int(self.map.ref[r]), int(self.map.valid[r])

    # -- diagnostics ---------------------------------------------------------

    def stats(self):
        with self.lock:
            return {
                "hits": self.hits,
                "loads": self.loads,
                "waits": self.waits,
                "evictions": self.evictions,
                "abandoned_loads": self.abandoned,
                "standby_len": len(self.standby),
                "slots": self.num_slots,
            }

    @property
    def buffer_bytes(self):
        return self.num_slots * self.row_bytes

    def check_invariants(self):
        with self.lock:
            self._check_locked(None)

    def _check_locked(self, rows):
        m = self.map
        r = m.touched() if rows is None else rows
        slot, valid, ref, loading = m.slot[r], m.valid[r], m.ref[r], m.loading[r]
        if (valid & (slot < 0)).any():
            raise InvariantError("valid node without slot (impossible state)")
        if (valid & loading).any():
            raise InvariantError("node both valid and loading")
        if (loading & (ref <= 0)).any():
            raise InvariantError("load in flight for an unreferenced node")
        if (ref < 0).any():
            raise InvariantError("negative reference count")
        has = slot >= 0
        nodes = m.node_of_row(r)
        if (self.reverse[slot[has]] != nodes[has]).any():
            raise InvariantError("mapping and reverse mapping disagree")
        if (has & ~valid & ~loading).any():
            raise InvariantError("bound slot neither valid nor loading")
        on_standby = np.zeros(len(r), dtype=bool)
        on_standby[has] = self.standby.contains(slot[has])
        if (on_standby & (ref > 0)).any():
            raise InvariantError("referenced node's slot is on standby")
        if (has & valid & (ref == 0) & ~on_standby).any():
            raise InvariantError("unreferenced valid node's slot is missing from standby")
        if rows is None:
            bound = np.flatnonzero(self.reverse >= 0)
            br = m.rows(self.reverse[bound])
            if (m.slot[br] != bound).any():
                raise InvariantError("reverse mapping points at a node mapped elsewhere")
            in_sb = self.standby.contains(np.arange(self.num_slots))
            if len(self.standby) != int(in_sb.sum()):
                raise InvariantError("standby length accounting drifted")
