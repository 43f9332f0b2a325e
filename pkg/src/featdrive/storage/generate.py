"""Deterministic synthetic dataset generator.

Features are standard-normal float32 rows produced in fixed chunks of
:data:`FEATURE_CHUNK` nodes, each chunk from its own PRNG stream keyed by
``(seed, chunk index)``; any row can therefore be regenerated without touching
the file. Topology is a CSC in-neighbor adjacency with Zipf in-degrees capped
at ``4 * avg_degree`` and neighbors drawn uniformly without replacement.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .format import (
    DTYPE_F32,
    FEATURES_FILE,
    INDICES_FILE,
    INDPTR_FILE,
    MANIFEST_FILE,
    SECTOR,
    DatasetHeader,
)

FEATURE_CHUNK = 4096
ZIPF_EXPONENT = 2.0
_FEATURE_STREAM = 1
_DEGREE_STREAM = 2
_NEIGHBOR_STREAM = 3


def feature_rows(seed, dim, lo, hi):
    """Regenerate float32 rows for nodes ``lo..hi-1`` exactly as written."""
    if hi <= lo:
        return np.empty((0, dim), dtype="<f4")
    first, last = lo // FEATURE_CHUNK, (hi - 1) // FEATURE_CHUNK
    parts = []
    for c in range(first, last + 1):
        rng = np.random.default_rng([seed, _FEATURE_STREAM, c])
        block = rng.standard_normal((FEATURE_CHUNK, dim), dtype=np.float32)
        a = max(lo - c * FEATURE_CHUNK, 0)
        b = min(hi - c * FEATURE_CHUNK, FEATURE_CHUNK)
        parts.append(block[a:b])
    return np.ascontiguousarray(np.concatenate(parts), dtype="<f4")


def in_degrees(num_nodes, avg_degree, seed):
    cap = min(4 * avg_degree, num_nodes - 1)
    if avg_degree <= 0 or cap <= 0:
        return np.zeros(num_nodes, dtype=np.int64)
    rng = np.random.default_rng([seed, _DEGREE_STREAM])
    raw = rng.zipf(ZIPF_EXPONENT, num_nodes).astype(np.float64)
    target = min(avg_degree, cap)

    def mean_for(scale):
        return np.minimum(np.floor(raw * scale), cap).mean()

    lo, hi = 0.0, float(cap) + 1.0
    # mean_for is monotone in scale; 60 halvings pin it to float resolution
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mean_for(mid) < target:
            lo = mid
        else:
            hi = mid
    return np.minimum(np.floor(raw * hi), cap).astype(np.int64)


def in_neighbors(num_nodes, degrees, seed):
    """Concatenated sorted in-neighbor lists, no self loops, no repeats per node."""
    total = int(degrees.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng([seed, _NEIGHBOR_STREAM])
    owners = np.repeat(np.arange(num_nodes, dtype=np.int64), degrees)
    draws = rng.integers(0, num_nodes - 1, size=total, dtype=np.int64)
    draws += draws >= owners
    while True:
        key = owners * num_nodes + draws
        order = np.argsort(key, kind="stable")
        draws = draws[order]
        key = key[order]
        dup = np.flatnonzero(key[1:] == key[:-1]) + 1
        if len(dup) == 0:
            return draws
        fresh = rng.integers(0, num_nodes - 1, size=len(dup), dtype=np.int64)
        fresh += fresh >= owners[dup]
        draws[dup] = fresh


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write(path, writer):
    try:
        with open(path, "wb") as f:
            writer(f)
    except OSError as e:
        raise OSError(e.errno, f"writing dataset file: {e.strerror}", os.fspath(path)) from e


def create_synthetic_dataset(num_nodes, dim, avg_degree, seed, out_dir):
    """Write features, CSC topology and a manifest into ``out_dir``.

    Returns the manifest dict (also saved as ``manifest.json``).
    """
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if avg_degree < 0:
        raise ValueError("avg_degree must be >= 0")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(e.errno, f"creating dataset directory: {e.strerror}", os.fspath(out)) from e

    header = DatasetHeader(num_nodes=num_nodes, dim=dim, dtype_code=DTYPE_F32, data_offset=SECTOR)

    def write_features(f):
        f.write(header.pack().ljust(header.data_offset, b"\0"))
        for lo in range(0, num_nodes, FEATURE_CHUNK):
            hi = min(lo + FEATURE_CHUNK, num_nodes)
            f.write(feature_rows(seed, dim, lo, hi).tobytes())

    degrees = in_degrees(num_nodes, avg_degree, seed)
    indptr = np.zeros(num_nodes + 1, dtype="<u8")
    np.cumsum(degrees, out=indptr[1:])
    indices = in_neighbors(num_nodes, degrees, seed).astype("<u8")

    _write(out / FEATURES_FILE, write_features)
    _write(out / INDPTR_FILE, lambda f: f.write(indptr.tobytes()))
    _write(out / INDICES_FILE, lambda f: f.write(indices.tobytes()))

    files = {}
    for name in (FEATURES_FILE, INDPTR_FILE, INDICES_FILE):
        p = out / name
        files[name] = {"bytes": p.stat().st_size, "sha256": _sha256(p)}
    manifest = {
        "format": "featdrive-dataset",
        "version": 1,
        "params": {"num_nodes": num_nodes, "dim": dim, "avg_degree": avg_degree, "seed": seed},
        "header": {
            "num_nodes": num_nodes,
            "dim": dim,
            "dtype_code": header.dtype_code,
            "row_bytes": header.row_bytes,
            "data_offset": header.data_offset,
        },
        "num_edges": int(indptr[-1]),
        "topology": {"degree_law": "zipf", "zipf_exponent": ZIPF_EXPONENT, "degree_cap": 4 * avg_degree},
        "files": files,
    }
    _write(out / MANIFEST_FILE, lambda f: f.write(json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n"))
    return manifest


def load_manifest(dataset_dir):
    with open(Path(dataset_dir) / MANIFEST_FILE) as f:
        return json.load(f)
