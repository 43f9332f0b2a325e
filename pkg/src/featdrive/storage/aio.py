"""Asynchronous read engines with a submission/completion contract.

Two engines share one array-oriented interface:

* ``UringReader``: a real io_uring ring driven from the submitting thread.
* ``ThreadReader``: a pool of blocking ``preadv`` workers behind a pair of
  queues, for kernels or architectures where io_uring is unavailable.

Requests are submitted and reaped in batches of numpy arrays (request ids,
file offsets, lengths, destination addresses). Destination memory must stay
alive until the request is reaped.

An optional injected per-request latency holds each completion back until
``submit_time + latency``. In-flight requests age concurrently, so this models
a slower device without serialising the queue.
"""

import ctypes
import errno as _errno
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .format import SECTOR, ReadExtent
from .uring import Ring, uring_available

OK = "ok"
SHORT_READ = "short-read"
OS_ERROR = "os-error"

_EMPTY = np.empty(0, dtype=np.int64)


@dataclass
class IoRequest:
    req_id: int
    extent: ReadExtent
    dest: np.ndarray  # writable uint8 view, len >= extent.byte_len
    tag: object = None


@dataclass
class IoCompletion:
    req_id: int
    status: str
    nbytes: int = 0
    errno: int = 0
    tag: object = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == OK


def classify(res, need):
    """Map raw results (bytes or -errno) to a status string."""
    if res < 0:
        return OS_ERROR
    if res < need:
        return SHORT_READ
    return OK


def open_for_read(path, direct):
    """Open ``path`` read-only; returns (fd, direct_actually_used)."""
    path = os.fspath(path)
    if direct and hasattr(os, "O_DIRECT"):
        try:
            return os.open(path, os.O_RDONLY | os.O_DIRECT), True
        except OSError as e:
            if e.errno not in (_errno.EINVAL, _errno.EOPNOTSUPP):
                raise
    return os.open(path, os.O_RDONLY), False


def address_of(buf):
    """Base address of a numpy array or writable buffer."""
    if isinstance(buf, np.ndarray):
        return buf.ctypes.data
    return ctypes.addressof(ctypes.c_char.from_buffer(buf))


class Reader:
    """Shared bookkeeping: request slots, latency hold-back, accounting."""

    engine = "base"

    def __init__(self, path, depth=64, direct=True, latency=0.0):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.path = os.fspath(path)
        self.depth = depth
        self.latency = float(latency)
        self.fd, self.direct = open_for_read(self.path, direct)
        self.inflight = 0
        self.submitted = 0
        self.bytes_requested = 0
        self._free = list(range(depth))
        self._slot_req = np.zeros(depth, dtype=np.int64)
        self._slot_due = np.zeros(depth, dtype=np.float64)
        self._h_ids = _EMPTY
        self._h_res = _EMPTY
        self._h_due = np.empty(0)

    def submit(self, req_ids, offsets, lengths, addrs):
        req_ids = np.atleast_1d(np.asarray(req_ids, dtype=np.int64))
        k = len(req_ids)
        if k == 0:
            return
        offsets = np.broadcast_to(np.asarray(offsets, dtype=np.int64), (k,))
        lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (k,))
        addrs = np.broadcast_to(np.asarray(addrs, dtype=np.uint64), (k,))
        if self.inflight + k > self.depth:
            raise BufferError(f"io depth {self.depth} exhausted")
        if self.direct and np.any(((offsets | lengths) % SECTOR) | (addrs % SECTOR).astype(np.int64)):
            raise ValueError(f"direct I/O needs {SECTOR}-aligned offsets, lengths and buffers")
        slots = np.array([self._free.pop() for _ in range(k)], dtype=np.int64)
        self._slot_req[slots] = req_ids
        self._slot_due[slots] = time.monotonic() + self.latency if self.latency else 0.0
        self.inflight += k
        self.submitted += k
        self.bytes_requested += int(lengths.sum())
        self._submit(slots, offsets, lengths, addrs)

    def flush(self):
        """Hand queued submissions to the device (no-op for eager engines)."""

    def _complete(self, slots, res):
        ids = self._slot_req[slots]
        due = self._slot_due[slots]
        self._free.extend(slots.tolist())
        if not self.latency:
            return ids, res
        self._h_ids = np.concatenate((self._h_ids, ids))
        self._h_res = np.concatenate((self._h_res, res))
        self._h_due = np.concatenate((self._h_due, due))
        return _EMPTY, _EMPTY

    def _release_held(self, now):
        if not len(self._h_ids):
            return _EMPTY, _EMPTY
        ready = self._h_due <= now
        if not ready.any():
            return _EMPTY, _EMPTY
        ids, res = self._h_ids[ready], self._h_res[ready]
        keep = ~ready
        self._h_ids, self._h_res, self._h_due = self._h_ids[keep], self._h_res[keep], self._h_due[keep]
        return ids, res

    def reap(self, min_complete=0, timeout=None):
        """Collect finished requests as (req_ids, results) arrays.

        A result is the byte count read or ``-errno``. Blocks until at least
        ``min_complete`` (clamped to the number in flight) are available or
        ``timeout`` seconds pass.
        """
        min_complete = min(min_complete, self.inflight)
        deadline = None if timeout is None else time.monotonic() + timeout
        ids_out, res_out = [], []
        got = 0
        while True:
            for ids, res in (self._drain(block=False), self._release_held(time.monotonic())):
                if len(ids):
                    ids_out.append(ids)
                    res_out.append(res)
                    got += len(ids)
            if got >= min_complete:
                break
            now = time.monotonic()
            if deadline is not None and now >= deadline:
                break
            wake = float(self._h_due.min()) if len(self._h_due) else None
            if deadline is not None:
                wake = deadline if wake is None else min(wake, deadline)
            at_device = self.inflight - got - len(self._h_ids)
            if at_device > 0:
                ids, res = self._drain(block=True, timeout=None if wake is None else max(wake - now, 0.0))
                if len(ids):
                    ids_out.append(ids)
                    res_out.append(res)
                    got += len(ids)
            else:
                time.sleep(max(wake - now, 0.0))
        self.inflight -= got
        if not ids_out:
            return _EMPTY, _EMPTY
        if len(ids_out) == 1:
            return ids_out[0], res_out[0]
        return np.concatenate(ids_out), np.concatenate(res_out)

    def _submit(self, slots, offsets, lengths, addrs):
        raise NotImplementedError

    def _drain(self, block, timeout=None):
        raise NotImplementedError

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class UringReader(Reader):
    engine = "io_uring"

    def __init__(self, path, depth=64, direct=True, latency=0.0):
        super().__init__(path, depth, direct, latency)
        try:
            self._ring = Ring(max(depth, 2))
        except OSError:
            os.close(self.fd)
            raise
        self._at_device = 0

    def _submit(self, slots, offsets, lengths, addrs):
        self._ring.prep_reads(self.fd, addrs, lengths, offsets, slots.astype(np.uint64))
        self._at_device += len(slots)

    def flush(self):
        self._ring.enter()

    def _drain(self, block, timeout=None):
        ring = self._ring
        ring.enter()
        ud, res = ring.completions()
        if not len(ud) and block and self._at_device:
            if timeout is None:
                ring.enter(wait_nr=1)
                ud, res = ring.completions()
            else:
                # waiting with a timeout would need an extra timeout sqe; poll instead
                end = time.monotonic() + timeout
                while not len(ud) and time.monotonic() < end:
                    time.sleep(min(50e-6, max(end - time.monotonic(), 0.0)))
                    ud, res = ring.completions()
        if not len(ud):
            return _EMPTY, _EMPTY
        self._at_device -= len(ud)
        return self._complete(ud.astype(np.int64), res)

    def close(self):
        if self._ring.fd >= 0:
            # in-flight reads still target caller memory; let them land first
            while self._at_device:
                self.inflight -= len(self._drain(block=True)[0])
            self._ring.close()
        super().close()


class ThreadReader(Reader):
    engine = "threads"

    def __init__(self, path, depth=64, direct=True, latency=0.0):
        super().__init__(path, depth, direct, latency)
        self._sq = queue.SimpleQueue()
        self._cq = queue.SimpleQueue()
        self._workers = [
            threading.Thread(target=self._work, name=f"aio-{i}", daemon=True) for i in range(depth)
        ]
        for w in self._workers:
            w.start()

    def _work(self):
        fd = self.fd
        while True:
            item = self._sq.get()
            if item is None:
                return
            slot, offset, length, addr = item
            try:
                res = os.preadv(fd, [(ctypes.c_char * length).from_address(addr)], offset)
            except OSError as e:
                res = -(e.errno or _errno.EIO)
            self._cq.put((slot, res))

    def _submit(self, slots, offsets, lengths, addrs):
        for item in zip(slots.tolist(), offsets.tolist(), lengths.tolist(), addrs.tolist()):
            self._sq.put(item)

    def _drain(self, block, timeout=None):
        items = []
        try:
            items.append(self._cq.get(block=block, timeout=timeout if block else None))
        except queue.Empty:
            return _EMPTY, _EMPTY
        while True:
            try:
                items.append(self._cq.get_nowait())
            except queue.Empty:
                break
        arr = np.array(items, dtype=np.int64)
        return self._complete(arr[:, 0], arr[:, 1])

    def close(self):
        if self._workers:
            for _ in self._workers:
                self._sq.put(None)
            for w in self._workers:
                w.join()
            self._workers = []
        super().close()


ENGINES = {"io_uring": UringReader, "threads": ThreadReader}


def resolve_engine(engine):
    if engine == "auto":
        return "io_uring" if uring_available() else "threads"
    if engine not in ENGINES:
        raise ValueError(f"unknown I/O engine {engine!r}")
    return engine


def open_reader(path, depth=64, direct=True, latency=0.0, engine="auto"):
    return ENGINES[resolve_engine(engine)](path, depth=depth, direct=direct, latency=latency)


def submit_async_reads(reader, requests, io_depth=None):
    """Issue ``requests`` keeping at most ``io_depth`` in flight; yield completions.

    Every request id appears exactly once in the output. Failures are reported
    per request and never abort the rest. The generator is lazy, so a caller
    can interleave other work between harvested completions.
    """
    depth = min(io_depth or reader.depth, reader.depth)
    pending = iter(requests)
    meta = {}
    exhausted = False
    while True:
        while not exhausted and len(meta) < depth:
            req = next(pending, None)
            if req is None:
                exhausted = True
                break
            ext = req.extent
            if req.req_id in meta:
                raise ValueError(f"duplicate request id {req.req_id}")
            if req.dest.nbytes < ext.byte_len:
                raise ValueError(f"request {req.req_id}: destination smaller than extent")
            try:
                reader.submit([req.req_id], ext.byte_offset, ext.byte_len, address_of(req.dest))
            except ValueError:
                yield IoCompletion(req.req_id, OS_ERROR, 0, _errno.EINVAL, req.tag)
                continue
            meta[req.req_id] = (ext.need, req.tag, req.dest)
        reader.flush()
        if not meta:
            return
        ids, res = reader.reap(min_complete=1)
        for rid, r in zip(ids.tolist(), res.tolist()):
            need, tag, _ = meta.pop(rid)
            status = classify(r, need)
            yield IoCompletion(rid, status, max(r, 0), -r if r < 0 else 0, tag)
