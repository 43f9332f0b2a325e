"""On-disk feature table layout and sector-aligned extent arithmetic."""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

SECTOR = 512
MAGIC = b"FEATDRV1"
VERSION = 1
HEADER_BYTES = 64
DTYPE_F32 = 0

_DTYPES = {DTYPE_F32: np.dtype("<f4")}
_HEADER = struct.Struct("<8sIQIIIQ")

FEATURES_FILE = "features.bin"
INDPTR_FILE = "indptr.bin"
INDICES_FILE = "indices.bin"
MANIFEST_FILE = "manifest.json"


class FormatError(ValueError):
    pass


def round_up(x, align=SECTOR):
    return -(-x // align) * align


def round_down(x, align=SECTOR):
    return (x // align) * align


@dataclass(frozen=True)
class DatasetHeader:
    num_nodes: int
    dim: int
    dtype_code: int = DTYPE_F32
    data_offset: int = SECTOR
    magic: bytes = MAGIC
    version: int = VERSION

    def __post_init__(self):
        if self.dtype_code not in _DTYPES:
            raise FormatError(f"unsupported dtype code {self.dtype_code}")
        if self.data_offset % SECTOR or self.data_offset < HEADER_BYTES:
            raise FormatError(f"data_offset {self.data_offset} must be a multiple of {SECTOR} past the header")

    @property
    def dtype(self):
        return _DTYPES[self.dtype_code]

    @property
    def row_bytes(self):
        return self.dim * self.dtype.itemsize

    @property
    def file_bytes(self):
        return self.data_offset + self.num_nodes * self.row_bytes

    @property
    def aligned_row_bytes(self):
        """Largest sector-aligned extent any single row can need.

        Row starts sit at multiples of gcd(row_bytes, 512) within a sector, so
        the worst lead offset is 512 - gcd.
        """
        g = math.gcd(self.row_bytes, SECTOR)
        return round_up(SECTOR - g + self.row_bytes)

    def row_start(self, node):
        return self.data_offset + node * self.row_bytes

    def pack(self):
        raw = _HEADER.pack(
            self.magic, self.version, self.num_nodes, self.dim,
            self.dtype_code, self.row_bytes, self.data_offset,
        )
        return raw.ljust(HEADER_BYTES, b"\0")

    @classmethod
    def unpack(cls, raw):
        if len(raw) < HEADER_BYTES:
            raise FormatError("truncated header")
        magic, version, num_nodes, dim, dtype_code, row_bytes, data_offset = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        hdr = cls(num_nodes=num_nodes, dim=dim, dtype_code=dtype_code, data_offset=data_offset)
        if hdr.row_bytes != row_bytes:
            raise FormatError(f"row_bytes {row_bytes} != dim x itemsize {hdr.row_bytes}")
        return hdr


def read_header(path):
    with open(path, "rb") as f:
        hdr = DatasetHeader.unpack(f.read(HEADER_BYTES))
    size = os.path.getsize(path)
    if size != hdr.file_bytes:
        raise FormatError(f"{path}: length {size} != expected {hdr.file_bytes}")
    return hdr


@dataclass(frozen=True)
class ReadExtent:
    node_lo: int
    node_hi: int
    byte_offset: int
    byte_len: int
    lead_pad: int
    tail_pad: int

    @property
    def num_rows(self):
        return self.node_hi - self.node_lo + 1

    @property
    def need(self):
        """Bytes that must arrive for every covered row to be complete."""
        return self.byte_len - self.tail_pad


def compute_read_extent(header, node_lo, node_hi=None):
    """Smallest 512-aligned byte range covering rows ``node_lo..node_hi`` inclusive."""
    if node_hi is None:
        node_hi = node_lo
    if not 0 <= node_lo <= node_hi < header.num_nodes:
        raise IndexError(f"node range [{node_lo}, {node_hi}] outside [0, {header.num_nodes})")
    start = header.row_start(node_lo)
    end = header.row_start(node_hi) + header.row_bytes
    off = round_down(start)
    stop = round_up(end)
    return ReadExtent(node_lo, node_hi, off, stop - off, start - off, stop - end)


class FeatureTable:
    """Read-only handle on a feature file with ordinary buffered reads."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self.header = read_header(self.path)
        self._fd = os.open(self.path, os.O_RDONLY)

    @property
    def num_nodes(self):
        return self.header.num_nodes

    @property
    def row_bytes(self):
        return self.header.row_bytes

    def read_row_sync(self, node):
        node = int(node)
        if not 0 <= node < self.header.num_nodes:
            raise IndexError(f"node {node} outside [0, {self.header.num_nodes})")
        raw = os.pread(self._fd, self.header.row_bytes, self.header.row_start(node))
        if len(raw) != self.header.row_bytes:
            raise OSError(f"{self.path}: short read for node {node}")
        return raw

    def read_rows_sync(self, nodes):
        """Rows for ``nodes`` as a (len(nodes), row_bytes) uint8 array.

        Bulk form of :meth:`read_row_sync` used by verification passes; runs of
        consecutive ids are fetched with one pread each.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        rb = self.header.row_bytes
        out = np.empty((len(nodes), rb), dtype=np.uint8)
        if len(nodes) == 0:
            return out
        if nodes.min() < 0 or nodes.max() >= self.header.num_nodes:
            raise IndexError("node id out of range")
        order = np.argsort(nodes, kind="stable")
        sn = nodes[order]
        breaks = np.flatnonzero(np.diff(sn) != 1) + 1
        starts = np.concatenate(([0], breaks))
        stops = np.concatenate((breaks, [len(sn)]))
        sorted_rows = np.empty_like(out)
        for a, b in zip(starts.tolist(), stops.tolist()):
            lo = int(sn[a])
            raw = os.pread(self._fd, (b - a) * rb, self.header.row_start(lo))
            sorted_rows[a:b] = np.frombuffer(raw, dtype=np.uint8).reshape(b - a, rb)
        out[order] = sorted_rows
        return out

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
