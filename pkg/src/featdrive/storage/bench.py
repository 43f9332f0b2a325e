"""Random-read microbenchmark: blocking reads from N threads vs one async submitter."""

import mmap
import os
import threading
import time

import numpy as np

from .aio import open_for_read, open_reader
from .format import SECTOR

_OFFSET_CHUNK = 4096


def parse_mode(mode):
    """``"sync:8"`` -> ("sync", 8); tuples pass through."""
    if isinstance(mode, tuple):
        kind, n = mode
    else:
        kind, _, n = str(mode).partition(":")
    kind = {"sync-threads": "sync", "async-depth": "async"}.get(kind, kind)
    if kind not in ("sync", "async"):
        raise ValueError(f"mode must be sync:N or async:D, got {mode!r}")
    n = int(n)
    if n < 1:
        raise ValueError("thread count / io depth must be >= 1")
    return kind, n


def ensure_bench_file(path, size_bytes, seed=0):
    """Create ``path`` with ``size_bytes`` of written (non-sparse) random data."""
    size_bytes = -(-size_bytes // (1 << 20)) * (1 << 20)
    if os.path.exists(path) and os.path.getsize(path) >= size_bytes:
        return path
    block = np.random.default_rng(seed).integers(0, 256, size=64 << 20, dtype=np.uint8).tobytes()
    with open(path, "wb") as f:
        left = size_bytes
        while left:
            n = min(left, len(block))
            f.write(block[:n])
            left -= n
        f.flush()
        os.fsync(f.fileno())
    return path


def _aligned(nbytes):
    return np.frombuffer(mmap.mmap(-1, max(nbytes, mmap.PAGESIZE)), dtype=np.uint8)


class _Offsets:
    """Deterministic stream of block-aligned random offsets."""

    def __init__(self, seed, stream, nblocks, block):
        self._rng = np.random.default_rng([seed, stream])
        self._nblocks = nblocks
        self._block = block
        self._buf = []

    def __next__(self):
        if not self._buf:
            self._buf = (self._rng.integers(0, self._nblocks, _OFFSET_CHUNK) * self._block).tolist()[::-1]
        return self._buf.pop()


def _drop_cache(fd):
    if hasattr(os, "posix_fadvise"):
        os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
        os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_RANDOM)


def run_io_bench(path, mode, block_bytes=SECTOR, io_mode="direct", duration=5.0, seed=0,
                 engine="auto", cold_cache=True):
    """Random-offset reads for ``duration`` seconds.

    Returns a dict with ``bandwidth_mb_s`` (1e6 bytes/s) and ``mean_latency_us``
    plus raw counts. With ``cold_cache`` buffered runs first evict the file from
    the page cache and set random-access advice, so both I/O modes start cold.
    """
    kind, n = parse_mode(mode)
    if io_mode not in ("direct", "buffered"):
        raise ValueError("io_mode must be 'direct' or 'buffered'")
    direct = io_mode == "direct"
    if block_bytes < 1 or (direct and block_bytes % SECTOR):
        raise ValueError(f"direct mode needs block_bytes to be a multiple of {SECTOR}")
    size = os.path.getsize(path)
    nblocks = size // block_bytes
    if nblocks < 1:
        raise ValueError("file smaller than one block")
    result = {
        "file": os.fspath(path), "mode": f"{kind}:{n}", "block_bytes": block_bytes,
        "io_mode": io_mode, "duration_s": duration, "seed": seed,
        "requests": 0, "bytes": 0, "elapsed_s": 0.0,
        "bandwidth_mb_s": 0.0, "mean_latency_us": 0.0,
    }
    if duration <= 0:
        return result

    if kind == "sync":
        fd, used_direct = open_for_read(path, direct)
        try:
            if cold_cache and not used_direct:
                _drop_cache(fd)
            reqs, lat, elapsed = _bench_sync(fd, n, block_bytes, nblocks, duration, seed)
        finally:
            os.close(fd)
        result["engine"] = "pread"
    else:
        with open_reader(path, depth=n, direct=direct, engine=engine) as reader:
            used_direct = reader.direct
            if cold_cache and not used_direct:
                _drop_cache(reader.fd)
            reqs, lat, elapsed = _bench_async(reader, n, block_bytes, nblocks, duration, seed)
            result["engine"] = reader.engine
    result["direct_used"] = used_direct
    result["requests"] = reqs
    result["bytes"] = reqs * block_bytes
    result["elapsed_s"] = elapsed
    if reqs:
        result["bandwidth_mb_s"] = reqs * block_bytes / 1e6 / elapsed
        result["mean_latency_us"] = lat / reqs * 1e6
    return result


def _bench_sync(fd, threads, block, nblocks, duration, seed):
    counts = [0] * threads
    lats = [0.0] * threads
    start_gate = threading.Barrier(threads + 1)
    stop_at = [0.0]

    def worker(t):
        buf = _aligned(block)[:block]
        offs = _Offsets(seed, t, nblocks, block)
        clock = time.perf_counter
        n = 0
        lat = 0.0
        start_gate.wait()
        end = stop_at[0]
        while True:
            t0 = clock()
            if t0 >= end:
                break
            os.preadv(fd, [buf], next(offs))
            lat += clock() - t0
            n += 1
        counts[t] = n
        lats[t] = lat

    pool = [threading.Thread(target=worker, args=(t,), daemon=True) for t in range(threads)]
    for p in pool:
        p.start()
    t_start = time.perf_counter()
    stop_at[0] = t_start + duration
    start_gate.wait()
    for p in pool:
        p.join()
    elapsed = time.perf_counter() - t_start
    return sum(counts), sum(lats), elapsed


def _bench_async(reader, depth, block, nblocks, duration, seed):
    bufs = _aligned(depth * block)
    base = bufs.ctypes.data
    rng = np.random.default_rng([seed, 0])
    clock = time.perf_counter
    issued_at = np.zeros(depth)
    free = np.arange(depth, dtype=np.int64)
    offs = np.empty(0, dtype=np.int64)
    n = 0
    lat = 0.0
    t_start = clock()
    end = t_start + duration
    while True:
        now = clock()
        if now < end and len(free):
            k = len(free)
            if len(offs) < k:
                offs = np.concatenate((offs, rng.integers(0, nblocks, _OFFSET_CHUNK) * block))
            issued_at[free] = now
            reader.submit(free, offs[:k], block, base + free * block)
            offs = offs[k:]
            free = free[:0]
            reader.flush()
        elif now >= end and reader.inflight == 0:
            break
        ids, res = reader.reap(min_complete=1)
        lat += float((clock() - issued_at[ids]).sum())
        n += int(np.count_nonzero(res == block))
        free = np.concatenate((free, ids))
    return n, lat, clock() - t_start
