"""Two-phase asynchronous extraction of one mini-batch per extractor.

Phase one reads feature rows from disk into the extractor's staging region;
each completed read immediately starts phase two, a copy of its pad-stripped
rows into feature-buffer slots. Rows are published (valid bit set) as their
copies land. Nodes another extractor is already loading are waited on at the
end rather than read twice.
"""

import itertools
import queue
from collections import deque
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .featbuf import BufferTimeout
from .storage.aio import open_reader
from .storage.format import SECTOR

_ROUND_SHIFT = 32


class ExtractionError(RuntimeError):
    def __init__(self, batch_id, reason):
        super().__init__(f"batch {batch_id}: {reason}")
        self.batch_id = batch_id
        self.reason = reason


def _ranges(starts, ends):
    """Concatenation of arange(s, e) for each pair."""
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    return np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(total)


def _gather_rows(src, offsets, row_bytes):
    return src[offsets[:, None] + np.arange(row_bytes)]


# -- feature-buffer backing regions ---------------------------------------


class HostRegion:
    """Feature-buffer slots in host memory; transfers are plain in-line copies."""

    placement = "host"

    def __init__(self, num_slots, row_bytes):
        self.num_slots = num_slots
        self.row_bytes = row_bytes
        self.data = np.zeros((num_slots, row_bytes), dtype=np.uint8)
        self.copies = 0

    @property
    def nbytes(self):
        return self.data.nbytes

    def stream(self):
        return _InlineStream(self)

    def close(self):
        pass


class _InlineStream:
    def __init__(self, region):
        self._region = region
        self._done = []

    @property
    def pending(self):
        return len(self._done)

    def transfer(self, src, src_offsets, dst_slots, tag):
        self._region.data[dst_slots] = _gather_rows(src, src_offsets, self._region.row_bytes)
        self._region.copies += 1
        self._done.append((tag, None))

    def reap(self, min_complete=0, timeout=None):
        out, self._done = self._done, []
        return out


class DeviceRegion:
    """Simulated device memory with an asynchronous copy engine.

    One engine thread services copies from every stream in FIFO order. A copy
    is reported complete no earlier than ``submit_time + copy_latency``; the
    latency clocks of queued copies run concurrently, like a DMA engine with
    many descriptors in flight.
    """

    placement = "device-sim"

    def __init__(self, num_slots, row_bytes, copy_latency=0.0):
        self.num_slots = num_slots
        self.row_bytes = row_bytes
        self.copy_latency = float(copy_latency)
        self.data = np.zeros((num_slots, row_bytes), dtype=np.uint8)
        self.copies = 0
        self.fault = None  # test hook: callable(tag) raising to simulate an engine fault
        self._q = queue.SimpleQueue()
        self._engine = threading.Thread(target=self._run, name="copy-engine", daemon=True)
        self._engine.start()

    @property
    def nbytes(self):
        return self.data.nbytes

    def stream(self):
        return CopyStream(self)

    def _run(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            stream, src, src_offsets, dst_slots, tag, due = item
            err = None
            try:
                if self.fault is not None:
                    self.fault(tag)
                self.data[dst_slots] = _gather_rows(src, src_offsets, self.row_bytes)
                self.copies += 1
            except Exception as e:  # reported through the stream, never lost
                err = e
            stream._done.put((due, tag, err))

    def close(self):
        if self._engine.is_alive():
            self._q.put(None)
            self._engine.join()


class CopyStream:
    """Per-submitter completion stream on a :class:`DeviceRegion`."""

    def __init__(self, region):
        self._region = region
        self._done = queue.SimpleQueue()
        self._held = []
        self.pending = 0

    def transfer(self, src, src_offsets, dst_slots, tag):
        """Queue an asynchronous copy of rows at ``src[src_offsets]`` into ``dst_slots``."""
        due = time.monotonic() + self._region.copy_latency
        self.pending += 1
        self._region._q.put((self, src, src_offsets, dst_slots, tag, due))

    def reap(self, min_complete=0, timeout=None):
        """Return finished copies as ``(tag, error_or_None)`` pairs."""
        min_complete = min(min_complete, self.pending)
        deadline = None if timeout is None else time.monotonic() + timeout
        out = []
        while True:
            while True:
                try:
                    self._held.append(self._done.get_nowait())
                except queue.Empty:
                    break
            now = time.monotonic()
            keep = []
            for due, tag, err in self._held:
                if due <= now:
                    out.append((tag, err))
                else:
                    keep.append((due, tag, err))
            self._held = keep
            if len(out) >= min_complete:
                break
            if deadline is not None and now >= deadline:
                break
            wake = min((h[0] for h in self._held), default=None)
            if deadline is not None:
                wake = deadline if wake is None else min(wake, deadline)
            if self.pending - len(out) > len(self._held):
                try:
                    self._held.append(self._done.get(timeout=None if wake is None else max(wake - now, 0.0)))
                except queue.Empty:
                    pass
            else:
                time.sleep(max(wake - now, 0.0))
        self.pending -= len(out)
        return out


def make_region(placement, num_slots, row_bytes, copy_latency=0.0):
    if placement in ("host", "host-only", "cpu"):
        return HostRegion(num_slots, row_bytes)
    if placement in ("device-sim", "device", "gpu"):
        return DeviceRegion(num_slots, row_bytes, copy_latency)
    raise ValueError(f"unknown placement {placement!r}")


def transfer_to_region(stream, src, src_offsets, dst_slots, tag=None):
    """Start copying staged rows into feature-buffer slots; the caller does not wait."""
    stream.transfer(src, np.asarray(src_offsets, dtype=np.int64), np.asarray(dst_slots, dtype=np.int64), tag)


# -- extraction ------------------------------------------------------------


@dataclass
class _Round:
    """Read requests formed from one sorted pool of bound (node, slot) pairs."""

    nodes: np.ndarray
    slots: np.ndarray
    rel: np.ndarray  # member row offset relative to its extent start
    g_start: np.ndarray
    g_end: np.ndarray
    ext_off: np.ndarray
    ext_len: np.ndarray
    ext_need: np.ndarray
    blocks: np.ndarray
    tries: np.ndarray
    outstanding: int = 0
    next_group: int = 0


@dataclass
class ExtractorStats:
    batches: int = 0
    failed_batches: int = 0
    read_requests: int = 0
    rows_loaded: int = 0
    rows_from_staging: int = 0
    bytes_requested: int = 0
    useful_bytes: int = 0
    redundant_bytes: int = 0
    retries: int = 0
    busy_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "extra"}
        d.update(self.extra)
        return d


class Extractor:
    """One extraction worker: a private read ring, staging region and copy stream."""

    def __init__(self, featbuf, header, features_path, staging, region_id, region,
                 io_depth=64, engine="auto", direct=True, read_latency=0.0, retries=0,
                 observer=None, name="extractor"):
        self.fb = featbuf
        self.header = header
        self.staging = staging
        self.region_id = region_id
        self.region = region
        self.io_depth = io_depth
        self.retries = retries
        self.observer = observer
        self.name = name
        self.reader = open_reader(features_path, depth=io_depth, direct=direct,
                                  latency=read_latency, engine=engine)
        self.stream = region.stream()
        self.stats = ExtractorStats()
        self._round_ids = itertools.count(1)
        self._rounds = {}
        self._row_bytes = header.row_bytes
        self._block_rows = staging.block_rows

    def close(self):
        self.reader.close()

    # phase bookkeeping is per call; the object is reused across batches
    def extract_batch(self, batch):
        """Load every row of ``batch`` into the feature buffer and return its alias list."""
        t0 = time.perf_counter()
        nodes = np.asarray(batch.nodes, dtype=np.int64)
        acq = self.fb.acquire_for_batch(nodes)
        self._claimed = [nodes[acq.load_pos]]
        self._published = []
        try:
            self._load(batch.batch_id, self._claimed[0])
            waiting = nodes[acq.wait_pos]
            while len(waiting):
                orphans = self.fb.wait_valid(waiting)
                if not len(orphans):
                    break
                self._claimed.append(orphans)
                self._load(batch.batch_id, orphans)
            alias = self.fb.slots_of(nodes)
        except BaseException as e:
            self._rollback(nodes)
            self.stats.failed_batches += 1
            self.stats.busy_s += time.perf_counter() - t0
            if isinstance(e, ExtractionError):
                raise
            if isinstance(e, BufferTimeout):
                raise ExtractionError(batch.batch_id, str(e)) from e
            raise
        self.stats.batches += 1
        self.stats.busy_s += time.perf_counter() - t0
        return alias

    def _rollback(self, nodes):
        claimed = np.concatenate(self._claimed) if self._claimed else np.empty(0, np.int64)
        done = np.concatenate(self._published) if self._published else np.empty(0, np.int64)
        unpublished = np.setdiff1d(claimed, done)
        if self.observer is not None and len(unpublished):
            self.observer.load_end(self, unpublished)
        self.fb.abort_loads(unpublished)
        self.fb.release_batch(nodes)

    def _load(self, batch_id, claimed):
        fb = self.fb
        unbound = claimed
        self._queue = deque()  # rounds with groups not yet submitted
        failure = None
        dry_since = None
        if self.observer is not None and len(claimed):
            self.observer.load_start(self, claimed)
        try:
            while True:
                if failure is None and len(unbound):
                    got = fb.get_standby_slots(len(unbound), block=False)
                    if len(got):
                        unbound = self._bind(unbound, got)

                submitted = 0
                if failure is None and self._queue and self.reader.inflight < self.io_depth:
                    submitted = self._submit()

                copies_pending = self.stream.pending > 0
                reads_pending = self.reader.inflight > 0
                if not reads_pending and not copies_pending:
                    if failure is not None:
                        raise failure
                    if not self._queue and not len(unbound):
                        return
                    if self._queue and not submitted:
                        # every block is lent out to another worker or pinned
                        if dry_since is None:
                            dry_since = time.monotonic()
                        elif time.monotonic() - dry_since > fb.wait_timeout:
                            raise ExtractionError(batch_id, "staging buffer exhausted")
                        time.sleep(0.0005)
                        continue
                    dry_since = None
                    if len(unbound) and not self._queue:
                        unbound = self._bind(unbound, fb.get_standby_slots(len(unbound), block=True))
                    continue

                can_submit_more = failure is None and bool(
                    (self._queue and self.reader.inflight < self.io_depth
                     and self.staging.free_blocks(self.region_id)) or len(unbound))
                if reads_pending:
                    if can_submit_more or copies_pending:
                        ids, res = self.reader.reap(0 if can_submit_more else 1,
                                                    timeout=0.0 if can_submit_more else 0.002)
                    else:
                        ids, res = self.reader.reap(1)
                    if len(ids):
                        failure = self._on_reads(batch_id, ids, res) or failure
                if self.stream.pending:
                    wait = not reads_pending and not can_submit_more
                    done = self.stream.reap(1 if wait else 0)
                    failure = self._on_copies(batch_id, done) or failure
        finally:
            self._queue.clear()
            self._rounds.clear()

    def _bind(self, unbound, got):
        fresh, rest = unbound[:len(got)], unbound[len(got):]
        self.fb.bind_slots(fresh, got)
        fresh, got = self._from_staging(fresh, got)
        if len(fresh):
            self._prepare(fresh, got)
        return rest

    def _from_staging(self, nodes, slots):
        """Transfer rows already resident in the shared staging buffer; return the rest."""
        if not self.staging.keep_resident:
            return nodes, slots
        mask, offs, blks = self.staging.pin_resident(nodes)
        if not mask.any():
            return nodes, slots
        transfer_to_region(self.stream, self.staging.data, offs, slots[mask],
                           tag=("resident", nodes[mask], blks))
        self.stats.rows_from_staging += int(mask.sum())
        return nodes[~mask], slots[~mask]

    def _prepare(self, nodes, slots):
        """Sort freshly bound nodes and cut them into joint read extents.

        Rows whose sectors touch (same or adjacent sector after sorting by id)
        share one request, capped so a group's span fits a staging block.
        """
        order = np.argsort(nodes, kind="stable")
        nodes, slots = nodes[order], slots[order]
        rs = self.header.data_offset + nodes * self._row_bytes
        re = rs + self._row_bytes
        join = np.zeros(len(nodes), dtype=bool)
        join[1:] = rs[1:] // SECTOR <= -(-re[:-1] // SECTOR)
        run = np.cumsum(~join) - 1
        run_first = nodes[np.flatnonzero(~join)][run]
        sub = (nodes - run_first) // self._block_rows
        brk = np.ones(len(nodes), dtype=bool)
        brk[1:] = (run[1:] != run[:-1]) | (sub[1:] != sub[:-1])
        g_start = np.flatnonzero(brk)
        g_end = np.append(g_start[1:], len(nodes))
        ng = len(g_start)
        ext_off = (rs[g_start] // SECTOR) * SECTOR
        ext_end = -(-re[g_end - 1] // SECTOR) * SECTOR
        rnd = _Round(
            nodes=nodes, slots=slots, rel=rs - np.repeat(ext_off, g_end - g_start),
            g_start=g_start, g_end=g_end,
            ext_off=ext_off, ext_len=ext_end - ext_off, ext_need=re[g_end - 1] - ext_off,
            blocks=np.full(ng, -1, dtype=np.int64),
            tries=np.zeros(ng, dtype=np.int64), outstanding=ng,
        )
        rid = next(self._round_ids)
        self._rounds[rid] = rnd
        self._queue.append(rid)

    def _submit(self):
        """Issue reads for queued groups as far as depth and staging blocks allow."""
        total = 0
        while self._queue:
            room = self.io_depth - self.reader.inflight
            if room <= 0:
                break
            rid = self._queue[0]
            rnd = self._rounds[rid]
            lo = rnd.next_group
            want = min(room, len(rnd.g_start) - lo)
            blocks, _ = self.staging.alloc(self.region_id, want)
            k = len(blocks)
            if k == 0:
                break
            g = np.arange(lo, lo + k)
            rnd.blocks[g] = blocks
            rnd.next_group = lo + k
            if rnd.next_group == len(rnd.g_start):
                self._queue.popleft()
            self.reader.submit((rid << _ROUND_SHIFT) + g, rnd.ext_off[g], rnd.ext_len[g],
                               self.staging.addresses(blocks))
            self.reader.flush()
            rows = int(rnd.g_end[g[-1]] - rnd.g_start[lo])
            nbytes = int(rnd.ext_len[g].sum())
            st = self.stats
            st.read_requests += k
            st.rows_loaded += rows
            st.bytes_requested += nbytes
            st.useful_bytes += rows * self._row_bytes
            st.redundant_bytes += nbytes - rows * self._row_bytes
            if self.observer is not None and hasattr(self.observer, "reads"):
                self.observer.reads(self, rnd.nodes[rnd.g_start[lo]:rnd.g_end[g[-1]]])
            total += k
            if k < want:
                break
        return total

    def _on_reads(self, batch_id, ids, res):
        failure = None
        rids = ids >> _ROUND_SHIFT
        for rid in np.unique(rids).tolist():
            sel = rids == rid
            g = ids[sel] & ((1 << _ROUND_SHIFT) - 1)
            r = res[sel]
            rnd = self._rounds[rid]
            ok = r >= rnd.ext_need[g]  # negative results are -errno
            bad = g[~ok]
            if len(bad):
                retry = bad[rnd.tries[bad] < self.retries]
                if len(retry) and failure is None:
                    rnd.tries[retry] += 1
                    self.stats.retries += len(retry)
                    self.reader.submit((rid << _ROUND_SHIFT) + retry, rnd.ext_off[retry], rnd.ext_len[retry],
                                       self.staging.addresses(rnd.blocks[retry]))
                    self.reader.flush()
                    bad = np.setdiff1d(bad, retry)
                if len(bad):
                    rnd.outstanding -= len(bad)
                    self._release_blocks(rnd, bad)
                    errs = r[~ok][:1].tolist()
                    failure = failure or ExtractionError(
                        batch_id, f"{len(bad)} feature read(s) failed (first result {errs[0]})")
                    self._maybe_drop(rid)
            good = g[ok]
            if len(good):
                m = _ranges(rnd.g_start[good], rnd.g_end[good])
                src = np.repeat(self.staging.offsets(rnd.blocks[good]), rnd.g_end[good] - rnd.g_start[good]) + rnd.rel[m]
                transfer_to_region(self.stream, self.staging.data, src, rnd.slots[m], tag=("read", rid, good, src))
        return failure

    def _on_copies(self, batch_id, done):
        failure = None
        for tag, err in done:
            if tag[0] == "resident":
                _, nodes, blks = tag
                self.staging.unpin(blks)
            else:
                _, rid, good, src = tag
                rnd = self._rounds[rid]
                m = _ranges(rnd.g_start[good], rnd.g_end[good])
                nodes = rnd.nodes[m]
                if err is None:
                    self.staging.note_resident(nodes, src, np.repeat(rnd.blocks[good], rnd.g_end[good] - rnd.g_start[good]))
                rnd.outstanding -= len(good)
                self._release_blocks(rnd, good)
                self._maybe_drop(rid)
            if err is not None:
                failure = failure or ExtractionError(batch_id, f"copy engine fault: {err!r}")
                continue
            self.fb.publish_valid(nodes)
            self._published.append(nodes)
            if self.observer is not None:
                self.observer.load_end(self, nodes)
        return failure

    def _release_blocks(self, rnd, groups):
        # borrowed blocks go straight back to their lender too
        self.staging.free(rnd.blocks[groups])

    def _maybe_drop(self, rid):
        if self._rounds[rid].outstanding == 0:
            del self._rounds[rid]


@dataclass
class TrainTicket:
    batch: object
    alias: np.ndarray = None
    extractor: str = ""
    error: Exception = None
    t_extracted: float = 0.0

    @property
    def failed(self):
        return self.error is not None


def extractor_worker(extractor, in_queue, out_queue, stop=None, poll=0.1, on_error=None):
    """Extract batches from ``in_queue`` until a ``None`` sentinel.

    Each batch yields exactly one ticket on ``out_queue``: the alias list on
    success, or the error when extraction failed and was rolled back. Put
    blocks while the training queue is full.
    """
    while True:
        batch = _get(in_queue, stop, poll)
        if batch is None:
            return
        try:
            alias = extractor.extract_batch(batch)
            ticket = TrainTicket(batch, alias, extractor.name, t_extracted=time.perf_counter())
        except ExtractionError as e:
            if on_error is not None:
                on_error(e)
            ticket = TrainTicket(batch, None, extractor.name, error=e)
        if not _put(out_queue, ticket, stop, poll):
            return


def _get(q, stop, poll):
    while True:
        if stop is not None and stop.is_set():
            return None
        try:
            return q.get(timeout=poll)
        except queue.Empty:
            continue


def _put(q, item, stop, poll):
    while True:
        if stop is not None and stop.is_set():
            return False
        try:
            q.put(item, timeout=poll)
            return True
        except queue.Full:
            continue
