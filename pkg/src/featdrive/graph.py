"""CSC topology and uniform k-hop in-neighbor sampling."""

import queue
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .storage.format import INDICES_FILE, INDPTR_FILE


class Topology:
    """In-memory index pointers plus a file-mapped (or in-memory) index array."""

    def __init__(self, indptr, indices):
        indptr = np.asarray(indptr, dtype=np.int64)
        if indptr.ndim != 1 or len(indptr) < 1 or indptr[0] != 0:
            raise ValueError("indptr must be a 1-d array starting at 0")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if int(indptr[-1]) != len(indices):
            raise ValueError(f"indptr[-1]={int(indptr[-1])} but {len(indices)} indices")
        self.indptr = indptr
        self.indices = indices
        self.num_nodes = len(indptr) - 1

    @property
    def num_edges(self):
        return int(self.indptr[-1])

    @classmethod
    def load(cls, dataset_dir, mmap=True):
        d = Path(dataset_dir)
        indptr = np.fromfile(d / INDPTR_FILE, dtype="<u8").astype(np.int64)
        if mmap and (d / INDICES_FILE).stat().st_size > 0:
            indices = np.memmap(d / INDICES_FILE, dtype="<u8", mode="r")
        else:
            indices = np.fromfile(d / INDICES_FILE, dtype="<u8")
        return cls(indptr, indices)

    @classmethod
    def from_edges(cls, num_nodes, src, dst):
        """CSC from (src -> dst) edges: column ``dst`` lists in-neighbor ``src``."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        order = np.lexsort((src, dst))
        counts = np.bincount(dst, minlength=num_nodes)
        indptr = np.concatenate(([0], np.cumsum(counts)))
        return cls(indptr, src[order].astype(np.uint64))

    def in_degree(self, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        return self.indptr[nodes + 1] - self.indptr[nodes]

    def in_neighbors(self, node):
        return np.asarray(self.indices[self.indptr[node]:self.indptr[node + 1]], dtype=np.int64)


class SamplingError(RuntimeError):
    def __init__(self, batch_id, cause):
        super().__init__(f"sampling batch {batch_id} failed: {cause!r}")
        self.batch_id = batch_id


def validate_fanouts(fanouts):
    fanouts = tuple(int(f) for f in fanouts)
    if not fanouts:
        raise ValueError("need at least one hop")
    if any(f < 1 for f in fanouts):
        raise ValueError(f"fanouts must be >= 1, got {fanouts}")
    return fanouts


def max_batch_nodes(batch_size, fanouts, num_nodes=None):
    """Upper bound M_b on unique nodes of one mini-batch.

    ``batch_size * (1 + f1 + f1*f2 + ...)``, optionally clipped to the graph size.
    """
    total = 1
    prod = 1
    for f in validate_fanouts(fanouts):
        prod *= f
        total += prod
    bound = batch_size * total
    if num_nodes is not None:
        bound = min(bound, num_nodes)
    return bound


@dataclass
class SampledBatch:
    batch_id: int
    seeds: np.ndarray
    nodes: np.ndarray  # unique, seeds first
    edges: np.ndarray  # (2, E) local indices: row 0 source (neighbor), row 1 target
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self):
        return len(self.nodes)


def partition_epoch(train_ids, batch_size, shuffle_seed):
    """Shuffle ``train_ids`` with ``shuffle_seed`` and cut into ceil(n / batch_size) chunks."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = np.asarray(train_ids, dtype=np.int64)
    if len(ids) == 0:
        return []
    perm = np.random.default_rng([shuffle_seed]).permutation(len(ids))
    shuffled = ids[perm]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def batch_rng_seed(global_seed, epoch, batch_id):
    """Seed material for one batch, independent of execution order."""
    return np.random.SeedSequence([global_seed, epoch, batch_id])


def _ordered_unique(values):
    """Unique values in first-appearance order."""
    if len(values) == 0:
        return values
    uniq, first = np.unique(values, return_index=True)
    return uniq[np.argsort(first, kind="stable")]


def _sample_layer(topo, frontier, fanout, rng):
    """Sample in-neighbors of every frontier node; returns (neighbors, owner positions)."""
    starts = topo.indptr[frontier]
    degs = topo.indptr[frontier + 1] - starts
    take_all = degs <= fanout
    parts_pos, parts_owner = [], []

    if take_all.any():
        idx = np.flatnonzero(take_all)
        d = degs[idx]
        owner = np.repeat(idx, d)
        offs = np.arange(int(d.sum())) - np.repeat(np.cumsum(d) - d, d)
        parts_pos.append(np.repeat(starts[idx], d) + offs)
        parts_owner.append(owner)

    if (~take_all).any():
        idx = np.flatnonzero(~take_all)
        d = degs[idx]
        seg = np.repeat(np.arange(len(idx)), d)
        offs = np.arange(int(d.sum())) - np.repeat(np.cumsum(d) - d, d)
        keys = rng.random(len(seg))
        order = np.lexsort((keys, seg))
        # after sorting by (segment, key) each segment's first `fanout` entries are a uniform draw
        rank = np.arange(len(order)) - np.repeat(np.cumsum(d) - d, d)
        keep = order[rank < fanout]
        parts_pos.append(starts[idx][seg[keep]] + offs[keep])
        parts_owner.append(idx[seg[keep]])

    if not parts_pos:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pos = np.concatenate(parts_pos)
    owner = np.concatenate(parts_owner)
    order = np.argsort(owner, kind="stable")
    pos, owner = pos[order], owner[order]
    nbrs = np.asarray(topo.indices[pos], dtype=np.int64)
    return nbrs, owner


def sample_khop(topo, seeds, fanouts, rng_seed, batch_id=0, epoch=0):
    """Layer-wise uniform in-neighbor sampling without replacement.

    Each newly reached node is expanded once at the next hop. Nodes reached by
    several paths appear once in ``nodes``; seeds come first.
    """
    fanouts = validate_fanouts(fanouts)
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) and (seeds.min() < 0 or seeds.max() >= topo.num_nodes):
        raise IndexError(f"seed id outside [0, {topo.num_nodes})")
    rng = np.random.default_rng(rng_seed)
    seeds_u = _ordered_unique(seeds)
    nodes_parts = [seeds_u]
    seen = np.sort(seeds_u)
    frontier = seeds_u
    src_parts, dst_parts = [], []
    for f in fanouts:
        if len(frontier) == 0:
            break
        nbrs, owner = _sample_layer(topo, frontier, f, rng)
        src_parts.append(nbrs)
        dst_parts.append(frontier[owner])
        cand = _ordered_unique(nbrs)
        new = cand[~np.isin(cand, seen, assume_unique=True)]
        if len(new):
            nodes_parts.append(new)
            seen = np.union1d(seen, new)
        frontier = new
    nodes = np.concatenate(nodes_parts)
    if src_parts:
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
        sorter = np.argsort(nodes, kind="stable")
        sorted_nodes = nodes[sorter]
        edges = np.stack((sorter[np.searchsorted(sorted_nodes, src)], sorter[np.searchsorted(sorted_nodes, dst)]))
    else:
        edges = np.empty((2, 0), dtype=np.int64)
    return SampledBatch(batch_id=batch_id, seeds=seeds, nodes=nodes, edges=edges, epoch=epoch)


def sampler_worker(topo, fanouts, tasks, out_queue, global_seed, epoch=0, stop=None, poll=0.1,
                   on_sampled=None):
    """Sample chunks from ``tasks`` until a ``None`` sentinel, enqueueing each batch once.

    ``tasks`` yields ``(batch_id, seeds)``; ``out_queue.put`` blocks while the
    queue is full. Exceptions propagate to the caller with the batch id attached.
    ``on_sampled(seconds)`` is called with the time spent sampling each batch.
    Returns the number of batches enqueued.
    """
    done = 0
    while True:
        task = tasks.get()
        if task is None:
            return done
        batch_id, seeds = task
        t0 = time.perf_counter()
        try:
            batch = sample_khop(topo, seeds, fanouts, batch_rng_seed(global_seed, epoch, batch_id),
                                batch_id=batch_id, epoch=epoch)
        except Exception as e:
            raise SamplingError(batch_id, e) from e
        if on_sampled is not None:
            on_sampled(time.perf_counter() - t0)
        while True:
            if stop is not None and stop.is_set():
                return done
            try:
                out_queue.put(batch, timeout=poll)
                break
            except queue.Full:
                continue
        done += 1
