"""Sector-aligned host staging memory that disk loads land in.

The buffer is one anonymous mapping (page aligned, hence 512-aligned) split
into regions, one per extractor. A region is carved into fixed blocks of
``block_rows`` row-slots; one read request (possibly several adjacent rows)
occupies one block until its rows have been transferred.

With ``keep_resident`` the buffer also remembers which node rows are still
sitting in freed blocks, so another worker can transfer them without going
back to disk. Blocks are then recycled FIFO to keep rows resident longer;
otherwise LIFO, which keeps the touched working set small.
"""

import mmap
import threading
from collections import deque

import numpy as np


class StagingExhausted(RuntimeError):
    pass


class StagingBuffer:
    def __init__(self, num_regions, rows_per_region, aligned_row_bytes, block_rows=16,
                 keep_resident=False, owners=None):
        if num_regions < 1 or rows_per_region < 1:
            raise ValueError("staging buffer needs at least one region and one row")
        self.num_regions = num_regions
        self.rows_per_region = rows_per_region
        self.aligned_row_bytes = aligned_row_bytes
        self.block_rows = min(block_rows, rows_per_region)
        self.block_bytes = self.block_rows * aligned_row_bytes
        self.blocks_per_region = rows_per_region // self.block_rows
        self.region_bytes = rows_per_region * aligned_row_bytes
        self.total_bytes = num_regions * self.region_bytes
        self.keep_resident = keep_resident
        # region -> portion (worker) id; only other portions lend blocks
        self.owners = list(owners) if owners is not None else [0] * num_regions

        self._mm = mmap.mmap(-1, self.total_bytes)
        self.data = np.frombuffer(self._mm, dtype=np.uint8)
        self.base_address = self.data.ctypes.data

        nb = num_regions * self.blocks_per_region
        self._block_region = np.repeat(np.arange(num_regions), self.blocks_per_region)
        local = np.tile(np.arange(self.blocks_per_region), num_regions)
        self._block_offset = self._block_region * self.region_bytes + local * self.block_bytes
        self._free = [deque(range(r * self.blocks_per_region, (r + 1) * self.blocks_per_region))
                      for r in range(num_regions)]
        self._pins = np.zeros(nb, dtype=np.int64)
        self._lock = threading.Lock()
        self._resident = {}  # node -> (byte offset in data, block)
        self._block_nodes = {}  # block -> nodes indexed from it
        self.borrows = 0
        self.resident_hits = 0

    @property
    def num_blocks(self):
        return len(self._pins)

    def offsets(self, blocks):
        return self._block_offset[blocks]

    def addresses(self, blocks):
        return (self.base_address + self._block_offset[blocks]).astype(np.uint64)

    def region_of(self, blocks):
        return self._block_region[blocks]

    def free_blocks(self, region=None):
        with self._lock:
            if region is None:
                return sum(len(f) for f in self._free)
            return len(self._free[region])

    def _take(self, region, k, out):
        fl = self._free[region]
        skipped = 0
        while k and fl and skipped <= len(fl):
            b = fl.popleft() if self.keep_resident else fl.pop()
            if self._pins[b]:
                fl.append(b)
                skipped += 1
                continue
            self._forget(b)
            out.append(b)
            k -= 1
        return k

    def alloc(self, region, k, borrow=True):
        """Up to ``k`` free blocks from ``region``, borrowing from other portions if it is dry.

        Regions of the same portion never lend to each other: their extractors
        share a feature buffer and wait on each other's loads, so a borrowed
        block held across such a wait could starve the lender forever.

        Returns ``(blocks, borrowed)``; ``borrowed`` flags blocks that belong to
        another region and must be handed back with :meth:`free` like any other.
        """
        out = []
        with self._lock:
            left = self._take(region, k, out)
            own = len(out)
            if left and borrow:
                mine = self.owners[region]
                for r in range(self.num_regions):
                    if self.owners[r] == mine:
                        continue
                    left = self._take(r, left, out)
                    if not left:
                        break
                self.borrows += len(out) - own
        blocks = np.array(out, dtype=np.int64)
        borrowed = np.zeros(len(blocks), dtype=bool)
        borrowed[own:] = True
        return blocks, borrowed

    def free(self, blocks):
        with self._lock:
            for b in np.asarray(blocks, dtype=np.int64).tolist():
                self._free[self._block_region[b]].append(b)

    def _forget(self, block):
        nodes = self._block_nodes.pop(block, None)
        if nodes:
            for n in nodes:
                ent = self._resident.get(n)
                if ent is not None and ent[1] == block:
                    del self._resident[n]

    def note_resident(self, nodes, offsets, blocks):
        """Record that rows for ``nodes`` sit at ``offsets`` inside ``blocks``."""
        if not self.keep_resident:
            return
        with self._lock:
            for n, off, b in zip(np.asarray(nodes).tolist(), np.asarray(offsets).tolist(),
                                 np.asarray(blocks).tolist()):
                self._resident[n] = (off, b)
                self._block_nodes.setdefault(b, []).append(n)

    def pin_resident(self, nodes):
        """Find resident rows; returns (mask, offsets, blocks) and pins those blocks."""
        nodes = np.asarray(nodes, dtype=np.int64)
        mask = np.zeros(len(nodes), dtype=bool)
        offs = np.zeros(len(nodes), dtype=np.int64)
        blks = np.zeros(len(nodes), dtype=np.int64)
        if not self.keep_resident or not len(nodes):
            return mask, offs, blks
        with self._lock:
            for i, n in enumerate(nodes.tolist()):
                ent = self._resident.get(n)
                if ent is not None:
                    mask[i] = True
                    offs[i], blks[i] = ent
                    self._pins[ent[1]] += 1
            self.resident_hits += int(mask.sum())
        return mask, offs[mask], blks[mask]

    def unpin(self, blocks):
        with self._lock:
            np.subtract.at(self._pins, np.asarray(blocks, dtype=np.int64), 1)

    def accounting(self):
        with self._lock:
            return {
                "staging_bytes": self.total_bytes,
                "regions": self.num_regions,
                "rows_per_region": self.rows_per_region,
                "aligned_row_bytes": self.aligned_row_bytes,
                "block_bytes": self.block_bytes,
                "free_blocks": sum(len(f) for f in self._free),
                "total_blocks": self.num_blocks,
                "pinned_blocks": int(np.count_nonzero(self._pins)),
                "resident_rows": len(self._resident),
                "borrows": self.borrows,
                "resident_hits": self.resident_hits,
            }

    def close(self):
        self.data = None
        try:
            self._mm.close()
        except BufferError:
            pass  # a caller still holds a view; the mapping goes when it does
