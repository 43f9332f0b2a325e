"""Minimal io_uring binding over raw syscalls.

Only what the read path needs: one ring, IORING_OP_READ submissions and bulk
completion harvesting. Submission and completion entries are numpy views of
the kernel-shared ring memory so whole batches are written or read with a
handful of vectorised operations. Ring indices are published with plain
stores, which is sound on x86-64's total store order; other architectures
should use the thread-backed engine.
"""

import ctypes
import mmap
import os
import platform

import numpy as np

_SYS_IO_URING_SETUP = 425
_SYS_IO_URING_ENTER = 426

_IORING_OFF_SQ_RING = 0
_IORING_OFF_CQ_RING = 0x8000000
_IORING_OFF_SQES = 0x10000000

_IORING_FEAT_SINGLE_MMAP = 1 << 0
_IORING_ENTER_GETEVENTS = 1 << 0
IORING_OP_READ = 22

SQE_DTYPE = np.dtype({
    "names": ["opcode", "flags", "ioprio", "fd", "off", "addr", "len", "rw_flags", "user_data"],
    "formats": ["u1", "u1", "<u2", "<i4", "<u8", "<u8", "<u4", "<u4", "<u8"],
    "offsets": [0, 1, 2, 4, 8, 16, 24, 28, 32],
    "itemsize": 64,
})
CQE_DTYPE = np.dtype([("user_data", "<u8"), ("res", "<i4"), ("flags", "<u4")])

_libc = ctypes.CDLL(None, use_errno=True)
_syscall = _libc.syscall
_syscall.restype = ctypes.c_long


class _SqOffsets(ctypes.Structure):
    _fields_ = [(n, ctypes.c_uint32) for n in
                ("head", "tail", "ring_mask", "ring_entries", "flags", "dropped", "array", "resv1")]
    _fields_ += [("user_addr", ctypes.c_uint64)]


class _CqOffsets(ctypes.Structure):
    _fields_ = [(n, ctypes.c_uint32) for n in
                ("head", "tail", "ring_mask", "ring_entries", "overflow", "cqes", "flags", "resv1")]
    _fields_ += [("user_addr", ctypes.c_uint64)]


class _Params(ctypes.Structure):
    _fields_ = [
        ("sq_entries", ctypes.c_uint32),
        ("cq_entries", ctypes.c_uint32),
        ("flags", ctypes.c_uint32),
        ("sq_thread_cpu", ctypes.c_uint32),
        ("sq_thread_idle", ctypes.c_uint32),
        ("features", ctypes.c_uint32),
        ("wq_fd", ctypes.c_uint32),
        ("resv", ctypes.c_uint32 * 3),
        ("sq_off", _SqOffsets),
        ("cq_off", _CqOffsets),
    ]


def _check(ret):
    if ret < 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))
    return ret


_available = None


def uring_available():
    """True when the kernel accepts io_uring and the ring protocol here is safe."""
    global _available
    if _available is None:
        if platform.machine() not in ("x86_64", "AMD64"):
            _available = False
        else:
            try:
                ring = Ring(4)
            except OSError:
                _available = False
            else:
                ring.close()
                _available = True
    return _available


class Ring:
    """One submission/completion ring pair.

    Not thread-safe: a ring belongs to the worker that submits on it.
    """

    def __init__(self, entries):
        params = _Params()
        self.fd = _check(_syscall(_SYS_IO_URING_SETUP, ctypes.c_uint(entries), ctypes.byref(params)))
        try:
            self._map(params)
        except Exception:
            os.close(self.fd)
            raise
        self.sq_entries = params.sq_entries
        self.cq_entries = params.cq_entries
        self._pending = 0  # sqes published in the ring but not yet handed to the kernel

    def _map(self, p):
        sq_size = p.sq_off.array + p.sq_entries * 4
        cq_size = p.cq_off.cqes + p.cq_entries * CQE_DTYPE.itemsize
        flags = mmap.MAP_SHARED | getattr(mmap, "MAP_POPULATE", 0)
        prot = mmap.PROT_READ | mmap.PROT_WRITE
        if p.features & _IORING_FEAT_SINGLE_MMAP:
            self._sq_mm = mmap.mmap(self.fd, max(sq_size, cq_size), flags, prot, offset=_IORING_OFF_SQ_RING)
            self._cq_mm = self._sq_mm
        else:
            self._sq_mm = mmap.mmap(self.fd, sq_size, flags, prot, offset=_IORING_OFF_SQ_RING)
            self._cq_mm = mmap.mmap(self.fd, cq_size, flags, prot, offset=_IORING_OFF_CQ_RING)
        self._sqe_mm = mmap.mmap(self.fd, p.sq_entries * SQE_DTYPE.itemsize, flags, prot, offset=_IORING_OFF_SQES)

        def u32(mm, off):
            return np.ndarray((1,), "<u4", buffer=mm, offset=off)

        self._sq_head = u32(self._sq_mm, p.sq_off.head)
        self._sq_tail = u32(self._sq_mm, p.sq_off.tail)
        self._sq_mask = int(u32(self._sq_mm, p.sq_off.ring_mask)[0])
        self._cq_head = u32(self._cq_mm, p.cq_off.head)
        self._cq_tail = u32(self._cq_mm, p.cq_off.tail)
        self._cq_mask = int(u32(self._cq_mm, p.cq_off.ring_mask)[0])
        self._sqes = np.ndarray((p.sq_entries,), SQE_DTYPE, buffer=self._sqe_mm)
        self._cqes = np.ndarray((p.cq_entries,), CQE_DTYPE, buffer=self._cq_mm, offset=p.cq_off.cqes)
        # identity indirection: ring position i always uses sqe i
        sq_array = np.ndarray((p.sq_entries,), "<u4", buffer=self._sq_mm, offset=p.sq_off.array)
        sq_array[:] = np.arange(p.sq_entries, dtype=np.uint32)
        self._sqes[:] = np.zeros(1, SQE_DTYPE)

    def space(self):
        used = (int(self._sq_tail[0]) - int(self._sq_head[0])) & 0xFFFFFFFF
        return self.sq_entries - used

    def prep_reads(self, fd, addrs, lengths, offsets, user_data):
        """Publish a batch of read sqes; the kernel sees them on the next :meth:`enter`."""
        k = len(user_data)
        if k == 0:
            return
        if k > self.space():
            raise BufferError("submission ring full")
        tail = int(self._sq_tail[0])
        idx = (tail + np.arange(k, dtype=np.int64)) & self._sq_mask
        sqes = self._sqes
        sqes["opcode"][idx] = IORING_OP_READ
        sqes["fd"][idx] = fd
        sqes["off"][idx] = offsets
        sqes["addr"][idx] = addrs
        sqes["len"][idx] = lengths
        sqes["user_data"][idx] = user_data
        self._sq_tail[0] = (tail + k) & 0xFFFFFFFF
        self._pending += k

    def enter(self, wait_nr=0):
        """Hand pending sqes to the kernel and optionally wait for ``wait_nr`` completions."""
        to_submit = self._pending
        if not to_submit and not wait_nr:
            return 0
        flags = _IORING_ENTER_GETEVENTS if wait_nr else 0
        while True:
            ret = _syscall(
                _SYS_IO_URING_ENTER, ctypes.c_int(self.fd), ctypes.c_uint(to_submit),
                ctypes.c_uint(wait_nr), ctypes.c_uint(flags), None, ctypes.c_size_t(8),
            )
            if ret >= 0:
                break
            err = ctypes.get_errno()
            if err == 4:  # EINTR
                continue
            raise OSError(err, os.strerror(err))
        self._pending -= ret
        return ret

    def completions(self):
        """Drain every posted completion as (user_data, res) arrays."""
        head = int(self._cq_head[0])
        n = (int(self._cq_tail[0]) - head) & 0xFFFFFFFF
        if n == 0:
            return _EMPTY_U64, _EMPTY_I32
        idx = (head + np.arange(n, dtype=np.int64)) & self._cq_mask
        got = self._cqes[idx]  # fancy indexing copies out of the shared ring
        self._cq_head[0] = (head + n) & 0xFFFFFFFF
        return got["user_data"].copy(), got["res"].astype(np.int64)

    def close(self):
        if self.fd < 0:
            return
        # numpy views export the mmap buffers and must be dropped first
        del self._sq_head, self._sq_tail, self._cq_head, self._cq_tail, self._sqes, self._cqes
        if self._cq_mm is not self._sq_mm:
            self._cq_mm.close()
        self._sq_mm.close()
        self._sqe_mm.close()
        os.close(self.fd)
        self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_EMPTY_U64 = np.empty(0, dtype=np.uint64)
_EMPTY_I32 = np.empty(0, dtype=np.int64)
