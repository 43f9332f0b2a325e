"""Process memory probes: total RSS and resident bytes of specific buffers."""

import ctypes
import ctypes.util
import mmap
import os

import numpy as np

_libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
_libc.mincore.argtypes = (ctypes.c_void_p, ctypes.c_size_t, ctypes.c_void_p)
_PAGE = mmap.PAGESIZE


def rss_bytes():
    try:
        with open("/proc/self/statm") as f:
            return int(f.read().split()[1]) * _PAGE
    except OSError:
        return 0


def resident_bytes(arr):
    """Bytes of ``arr``'s memory currently resident in RAM (page granular)."""
    if arr is None or arr.nbytes == 0:
        return 0
    start = arr.ctypes.data // _PAGE * _PAGE
    end = -(-(arr.ctypes.data + arr.nbytes) // _PAGE) * _PAGE
    pages = (end - start) // _PAGE
    vec = np.zeros(pages, dtype=np.uint8)
    if _libc.mincore(ctypes.c_void_p(start), ctypes.c_size_t(end - start), vec.ctypes.data) != 0:
        raise OSError(ctypes.get_errno(), os.strerror(ctypes.get_errno()))
    return int(np.count_nonzero(vec & 1)) * _PAGE
