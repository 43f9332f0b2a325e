"""Sample -> extract -> train -> release pipeline over three bounded queues.

Samplers push :class:`SampledBatch` objects into the extracting queue,
extractors push tickets (batch plus alias list) into the training queue, the
mock trainer checksums rows through the aliases and pushes node lists into the
releasing queue, and the releaser drops the references.

Shutdown is a poison-pill cascade driven by the supervisor: once all samplers
have returned, each extractor gets a sentinel; once they have all returned,
trainers get one, then releasers. Stage counters are checked against the
batch count at the end, so an epoch can never be silently truncated.
"""

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import xxhash

from .extractor import Extractor, extractor_worker, make_region
from .featbuf import FeatureBuffer, StagingBuffer
from .memstat import resident_bytes, rss_bytes
from .graph import (
    Topology,
    batch_rng_seed,
    max_batch_nodes,
    partition_epoch,
    sample_khop,
    sampler_worker,
    validate_fanouts,
)
from .storage import FEATURES_FILE, FeatureTable, load_manifest, read_header

log = logging.getLogger("featdrive.pipeline")

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """First fatal worker failure, tagged with the stage it came from."""

    def __init__(self, stage, cause, stats=None):
        super().__init__(f"{stage} failed: {cause!r}")
        self.stage = stage
        self.cause = cause
        self.stats = stats


class VerifyError(AssertionError):
    pass


@dataclass
class PipelineConfig:
    num_samplers: int = 4
    num_extractors: int = 4
    num_trainers: int = 1
    num_releasers: int = 1
    eq_cap: int = 6
    tq_cap: int = 4
    rq_cap: int = 8
    batch_size: int = 1000
    fanouts: tuple = (10, 10, 10)
    slots: int = None  # None: exactly N_e x M_b
    io_depth: int = 64
    mode: str = "async"  # or "sync"
    placement: str = "device-sim"  # or "host"
    workers: int = 1
    seed: int = 0
    compute_delay: float = 0.0
    read_latency: float = 0.0
    copy_latency: float = 0.0
    engine: str = "auto"
    direct: bool = True
    verify: bool = False
    check: bool = False
    retries: int = 0
    block_rows: int = 16
    wait_timeout: float = 60.0
    keep_resident: bool = None  # None: on when workers > 1

    def __post_init__(self):
        self.fanouts = tuple(self.fanouts)

    def m_b(self, num_nodes=None):
        return max_batch_nodes(self.batch_size, self.fanouts, num_nodes)

    def min_slots(self, num_nodes=None):
        return self.num_extractors * self.m_b(num_nodes)

    def resolved_slots(self, num_nodes=None):
        return self.min_slots(num_nodes) if self.slots is None else int(self.slots)

    def validate(self, num_nodes=None):
        try:
            validate_fanouts(self.fanouts)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ("num_samplers", "num_extractors", "num_trainers", "num_releasers",
                     "eq_cap", "tq_cap", "rq_cap", "batch_size", "io_depth", "workers", "block_rows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mode not in ("async", "sync"):
            raise ConfigError(f"mode must be async or sync, not {self.mode!r}")
        if self.placement not in ("device-sim", "host"):
            raise ConfigError(f"placement must be device-sim or host, not {self.placement!r}")
        if min(self.read_latency, self.copy_latency, self.compute_delay) < 0 or self.retries < 0:
            raise ConfigError("latencies, compute delay and retries must be >= 0")
        need = self.min_slots(num_nodes)
        if self.resolved_slots(num_nodes) < need:
            raise ConfigError(
                f"slots={self.resolved_slots(num_nodes)} is below N_e x M_b = "
                f"{self.num_extractors} x {self.m_b(num_nodes)} = {need}")
        return self


class Dataset:
    def __init__(self, path):
        self.path = Path(path)
        self.features_path = self.path / FEATURES_FILE
        self.header = read_header(self.features_path)
        self.topology = Topology.load(self.path)
        if self.topology.num_nodes != self.header.num_nodes:
            raise ConfigError(f"topology has {self.topology.num_nodes} nodes, "
                              f"features have {self.header.num_nodes}")
        try:
            self.manifest = load_manifest(self.path)
        except FileNotFoundError:
            self.manifest = None

    @property
    def num_nodes(self):
        return self.header.num_nodes


def default_train_ids(num_nodes, count=10_000, seed=0):
    """A fixed random subset of node ids used as the training set."""
    count = min(count, num_nodes)
    ids = np.random.default_rng([seed, 2]).choice(num_nodes, size=count, replace=False)
    return np.sort(ids).astype(np.int64)


def epoch_shuffle_seed(epoch_seed, epoch):
    return int(np.random.SeedSequence([epoch_seed, epoch]).generate_state(1, dtype=np.uint64)[0])


def batch_checksum(rows):
    """Order-insensitive checksum: sum of 64-bit xxh3 hashes of each row, mod 2^64."""
    rows = np.ascontiguousarray(rows)
    if rows.ndim == 1:
        rows = rows[None, :]
    rb = rows.shape[1] * rows.itemsize
    mv = memoryview(rows.view(np.uint8).reshape(-1))
    h = xxhash.xxh3_64_intdigest
    return sum(h(mv[i:i + rb]) for i in range(0, len(mv), rb)) & _MASK64


def trainer_step(ticket, region, compute_delay=0.0, oracle=None):
    """Gather rows through the alias list, checksum them and emulate model work.

    With an ``oracle`` (a :class:`FeatureTable`) every row is also compared
    byte-for-byte with a plain synchronous read.
    """
    alias = ticket.alias
    if alias is None or (len(alias) and (alias.min() < 0 or alias.max() >= region.num_slots)):
        raise AssertionError(f"batch {ticket.batch.batch_id}: invalid alias list")
    rows = region.data[alias]
    csum = batch_checksum(rows)
    if oracle is not None:
        ref = oracle.read_rows_sync(ticket.batch.nodes).view(np.uint8).reshape(len(alias), -1)
        bad = np.flatnonzero((ref != rows).any(axis=1))
        if len(bad):
            raise VerifyError(f"batch {ticket.batch.batch_id}: {len(bad)} rows differ from disk, "
                              f"first node {int(ticket.batch.nodes[bad[0]])}")
        if batch_checksum(ref) != csum:
            raise VerifyError(f"batch {ticket.batch.batch_id}: checksum differs from oracle")
    if compute_delay:
        time.sleep(compute_delay)
    return csum


@dataclass
class EpochStats:
    epoch: int = 0
    worker: int = 0
    mode: str = "async"
    wall_s: float = 0.0
    batches: int = 0
    sampled: int = 0
    extracted: int = 0
    failed: int = 0
    trained: int = 0
    released: int = 0
    stages: dict = field(default_factory=dict)  # stage -> {"busy_s", "wait_s", "workers"}
    io: dict = field(default_factory=dict)
    buffer: dict = field(default_factory=dict)
    memory: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)  # batch_id -> hex
    trained_seeds: int = 0
    failures: list = field(default_factory=list)
    verified: bool = False
    manifest: dict = None
    seed_parts: list = field(default_factory=list, repr=False)  # in memory only

    def seed_ids(self):
        """All trained seeds of the epoch, sorted."""
        if not self.seed_parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(self.seed_parts))

    @property
    def ok(self):
        return self.failed == 0 and not self.failures

    def checksum_multiset(self):
        return sorted(self.checksums.values())

    def to_dict(self):
        d = asdict(self)
        d.pop("seed_parts")
        d["checksums"] = {str(k): v for k, v in sorted(self.checksums.items())}
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


class NoOpBarrier:
    """Stands in for gradient synchronisation between workers; only counts calls."""

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def wait(self):
        with self._lock:
            self.calls += 1


class _Stage:
    def __init__(self, name):
        self.name = name
        self.busy = 0.0
        self.alive = 0.0
        self.workers = 0
        self.lock = threading.Lock()

    def add(self, busy, alive):
        with self.lock:
            self.busy += busy
            self.alive += alive
            self.workers += 1

    def as_dict(self):
        return {"busy_s": round(self.busy, 6), "wait_s": round(max(self.alive - self.busy, 0.0), 6),
                "workers": self.workers}


class Pipeline:
    """Long-lived pipeline state for one worker: feature buffer, region, extractors.

    Worker threads are started per epoch; buffer contents persist between
    epochs so later epochs can hit rows left behind by earlier ones.
    """

    def __init__(self, config, dataset, staging=None, region_base=0, worker=0, observer=None):
        if not isinstance(dataset, Dataset):
            dataset = Dataset(dataset)
        self.cfg = config.validate(dataset.num_nodes)
        self.ds = dataset
        self.worker = worker
        hdr = dataset.header
        self.m_b = config.m_b(hdr.num_nodes)
        self.num_slots = config.resolved_slots(hdr.num_nodes)
        self.oracle = FeatureTable(dataset.features_path) if config.verify or config.mode == "sync" else None
        self.fb = None
        self.extractors = []
        self.staging = None
        self.region = None
        self._own_staging = False
        self.barrier = NoOpBarrier()
        if config.mode == "sync":
            return
        self.fb = FeatureBuffer(hdr.num_nodes, self.num_slots, hdr.row_bytes,
                                min_slots=config.min_slots(hdr.num_nodes),
                                wait_timeout=config.wait_timeout, check=config.check)
        self.region = make_region(config.placement, self.num_slots, hdr.row_bytes, config.copy_latency)
        keep = config.keep_resident if config.keep_resident is not None else config.workers > 1
        if staging is None:
            staging = StagingBuffer(config.num_extractors, self.m_b, hdr.aligned_row_bytes,
                                    block_rows=config.block_rows, keep_resident=keep)
            self._own_staging = True
        self.staging = staging
        for i in range(config.num_extractors):
            self.extractors.append(Extractor(
                self.fb, hdr, dataset.features_path, staging, region_base + i, self.region,
                io_depth=config.io_depth, engine=config.engine, direct=config.direct,
                read_latency=config.read_latency, retries=config.retries, observer=observer,
                name=f"w{worker}.extractor{i}"))

    def close(self):
        for ex in self.extractors:
            ex.close()
        self.extractors = []
        if self.region is not None:
            self.region.close()
        if self._own_staging and self.staging is not None:
            self.staging.close()
            self.staging = None
        if self.oracle is not None:
            self.oracle.close()
            self.oracle = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- accounting ----------------------------------------------------------

    def memory(self):
        hdr = self.ds.header
        out = {"m_b": self.m_b, "slots": self.num_slots, "row_bytes": hdr.row_bytes,
               "aligned_row_bytes": hdr.aligned_row_bytes,
               "indptr_bytes": int(self.ds.topology.indptr.nbytes), "rss_bytes": rss_bytes()}
        if self.fb is not None:
            out["feature_buffer_bytes"] = int(self.region.nbytes)
            out["mapping_bytes"] = int(self.fb.map.entry_bytes * self.fb.num_nodes
                                       if self.fb.map.kind == "dense" else 0)
            out["placement"] = self.region.placement
            acct = self.staging.accounting()
            out["staging_bytes"] = acct["staging_bytes"]
            out["staging_free_blocks"] = acct["free_blocks"]
            out["staging_total_blocks"] = acct["total_blocks"]
            out["staging_pinned_blocks"] = acct["pinned_blocks"]
            # resident pages of the two big buffers; the rest of RSS is everything else
            buffers = resident_bytes(self.region.data) + resident_bytes(self.staging.data)
            out["buffers_resident_bytes"] = buffers
            out["unaccounted_rss_bytes"] = out["rss_bytes"] - buffers
        return out

    def _io_totals(self):
        keys = ("read_requests", "rows_loaded", "rows_from_staging", "bytes_requested",
                "useful_bytes", "redundant_bytes", "retries")
        tot = dict.fromkeys(keys, 0)
        for ex in self.extractors:
            d = ex.stats.as_dict()
            for k in keys:
                tot[k] += d[k]
        return tot

    # -- epochs ----------------------------------------------------------------

    def run_epoch(self, train_ids, epoch_seed=None, epoch=0, chunks=None, first_batch_id=0):
        """Run one epoch over ``train_ids`` (or explicit seed ``chunks``) and return stats.

        Batch ids count up from ``first_batch_id``; they key the per-batch
        sampling seed and the checksum map.
        """
        epoch_seed = self.cfg.seed if epoch_seed is None else epoch_seed
        if chunks is None:
            chunks = partition_epoch(train_ids, self.cfg.batch_size, epoch_shuffle_seed(epoch_seed, epoch))
        if self.cfg.mode == "sync":
            return self._run_sync(chunks, epoch_seed, epoch, first_batch_id)
        return self._run_async(chunks, epoch_seed, epoch, first_batch_id)

    def _run_sync(self, chunks, epoch_seed, epoch, first_id=0):
        cfg = self.cfg
        st = EpochStats(epoch=epoch, worker=self.worker, mode="sync", batches=len(chunks))
        hdr = self.ds.header
        reads = 0
        busy = {"sampler": 0.0, "extractor": 0.0, "trainer": 0.0}
        t0 = time.perf_counter()
        for bid, seeds in enumerate(chunks, start=first_id):
            t = time.perf_counter()
            batch = sample_khop(self.ds.topology, seeds, cfg.fanouts,
                                batch_rng_seed(epoch_seed, epoch, bid), batch_id=bid, epoch=epoch)
            st.sampled += 1
            t1 = time.perf_counter()
            rows = np.empty((batch.num_nodes, hdr.row_bytes), dtype=np.uint8)
            for i, n in enumerate(batch.nodes.tolist()):
                rows[i] = np.frombuffer(self.oracle.read_row_sync(n), dtype=np.uint8)
                if cfg.read_latency:
                    time.sleep(cfg.read_latency)
            reads += batch.num_nodes
            st.extracted += 1
            t2 = time.perf_counter()
            st.checksums[bid] = f"{batch_checksum(rows):016x}"
            if cfg.compute_delay:
                time.sleep(cfg.compute_delay)
            st.trained += 1
            st.released += 1
            st.trained_seeds += len(batch.seeds)
            st.seed_parts.append(batch.seeds)
            t3 = time.perf_counter()
            busy["sampler"] += t1 - t
            busy["extractor"] += t2 - t1
            busy["trainer"] += t3 - t2
        st.wall_s = time.perf_counter() - t0
        st.stages = {k: {"busy_s": round(v, 6), "wait_s": 0.0, "workers": 1} for k, v in busy.items()}
        st.io = {"read_requests": reads, "rows_loaded": reads, "rows_from_staging": 0,
                 "bytes_requested": reads * hdr.row_bytes, "useful_bytes": reads * hdr.row_bytes,
                 "redundant_bytes": 0, "retries": 0}
        st.memory = self.memory()
        st.verified = True
        return st

    def _run_async(self, chunks, epoch_seed, epoch, first_id=0):
        cfg = self.cfg
        st = EpochStats(epoch=epoch, worker=self.worker, mode="async", batches=len(chunks))
        io0 = self._io_totals()
        fb0 = self.fb.stats()
        stop = threading.Event()
        errors = []
        err_lock = threading.Lock()
        stages = {k: _Stage(k) for k in ("sampler", "extractor", "trainer", "releaser")}
        counts = {"trained": 0, "released": 0, "failed": 0, "seeds": 0}
        count_lock = threading.Lock()

        def fatal(stage, exc):
            with err_lock:
                errors.append((stage, exc))
            log.error("%s failed: %r", stage, exc)
            stop.set()

        tasks = queue.Queue()
        for bid, seeds in enumerate(chunks, start=first_id):
            tasks.put((bid, seeds))
        for _ in range(cfg.num_samplers):
            tasks.put(None)
        eq = queue.Queue(cfg.eq_cap)
        tq = queue.Queue(cfg.tq_cap)
        rq = queue.Queue(cfg.rq_cap)
        sampled = [0]

        class _CountingQueue:
            # counts sampler puts without wrapping the sampler loop
            def put(self, item, timeout=None):
                eq.put(item, timeout=timeout)
                with count_lock:
                    sampled[0] += 1

        def sampler_main():
            t = time.perf_counter()
            busy = [0.0]

            def took(sec):
                busy[0] += sec

            try:
                sampler_worker(self.ds.topology, cfg.fanouts, tasks, _CountingQueue(), epoch_seed,
                               epoch=epoch, stop=stop, on_sampled=took)
            except Exception as e:
                fatal("sampler", e)
            stages["sampler"].add(busy[0], time.perf_counter() - t)

        def extractor_main(ex):
            t = time.perf_counter()
            b0 = ex.stats.busy_s
            try:
                extractor_worker(ex, eq, tq, stop=stop, poll=0.05,
                                 on_error=lambda e: log.warning("%s: %s", ex.name, e))
            except Exception as e:
                fatal("extractor", e)
            stages["extractor"].add(ex.stats.busy_s - b0, time.perf_counter() - t)

        def trainer_main():
            t = time.perf_counter()
            busy = 0.0
            try:
                while True:
                    ticket = _get(tq, stop)
                    if ticket is None:
                        break
                    t1 = time.perf_counter()
                    if ticket.error is not None:
                        with count_lock:
                            counts["failed"] += 1
                        with err_lock:
                            st.failures.append({"stage": "extractor", "batch_id": ticket.batch.batch_id,
                                                "error": str(ticket.error)})
                        continue
                    csum = trainer_step(ticket, self.region, cfg.compute_delay,
                                        self.oracle if cfg.verify else None)
                    self.barrier.wait()
                    with count_lock:
                        st.checksums[ticket.batch.batch_id] = f"{csum:016x}"
                        counts["trained"] += 1
                        counts["seeds"] += len(ticket.batch.seeds)
                        st.seed_parts.append(ticket.batch.seeds)
                    busy += time.perf_counter() - t1
                    if not _put(rq, ticket.batch.nodes, stop):
                        break
            except Exception as e:
                fatal("trainer", e)
            stages["trainer"].add(busy, time.perf_counter() - t)

        def releaser_main():
            t = time.perf_counter()
            busy = 0.0
            try:
                while True:
                    nodes = _get(rq, stop)
                    if nodes is None:
                        break
                    t1 = time.perf_counter()
                    self.fb.release_batch(nodes)
                    with count_lock:
                        counts["released"] += 1
                    busy += time.perf_counter() - t1
            except Exception as e:
                fatal("releaser", e)
            stages["releaser"].add(busy, time.perf_counter() - t)

        def spawn(fn, n, name, *args):
            ts = [threading.Thread(target=fn, args=args, name=f"w{self.worker}.{name}{i}", daemon=True)
                  for i in range(n)]
            for th in ts:
                th.start()
            return ts

        t0 = time.perf_counter()
        samplers = spawn(sampler_main, cfg.num_samplers, "sampler")
        extractors = [threading.Thread(target=extractor_main, args=(ex,), name=ex.name, daemon=True)
                      for ex in self.extractors]
        for th in extractors:
            th.start()
        trainers = spawn(trainer_main, cfg.num_trainers, "trainer")
        releasers = spawn(releaser_main, cfg.num_releasers, "releaser")

        for group, q, n_next in ((samplers, eq, len(extractors)), (extractors, tq, len(trainers)),
                                 (trainers, rq, len(releasers)), (releasers, None, 0)):
            for th in group:
                th.join()
            for _ in range(n_next):
                _put(q, None, stop)
        st.wall_s = time.perf_counter() - t0

        st.sampled = sampled[0]
        st.trained = counts["trained"]
        st.released = counts["released"]
        st.failed = counts["failed"]
        st.extracted = st.trained + st.failed
        st.trained_seeds = counts["seeds"]
        st.stages = {k: s.as_dict() for k, s in stages.items()}
        io1 = self._io_totals()
        st.io = {k: io1[k] - io0[k] for k in io1}
        fb1 = self.fb.stats()
        st.buffer = {k: (fb1[k] - fb0[k] if k in ("hits", "loads", "waits", "evictions", "abandoned_loads")
                         else fb1[k]) for k in fb1}
        st.memory = self.memory()
        st.verified = bool(cfg.verify)
        if errors:
            stage, exc = errors[0]
            raise PipelineError(stage, exc, st)
        if not (st.sampled == st.batches and st.extracted == st.batches and st.released == st.trained):
            raise PipelineError("supervisor", RuntimeError(
                f"lifecycle counts disagree: batches={st.batches} sampled={st.sampled} "
                f"extracted={st.extracted} trained={st.trained} released={st.released}"), st)
        if cfg.check:
            self.fb.check_invariants()
        return st


def _get(q, stop, poll=0.05):
    while True:
        try:
            return q.get(timeout=poll)
        except queue.Empty:
            if stop.is_set():
                return None


def _put(q, item, stop, poll=0.05):
    while True:
        if stop.is_set():
            return False
        try:
            q.put(item, timeout=poll)
            return True
        except queue.Full:
            continue


def run_epoch(config, dataset, train_ids, epoch_seed=None, epoch=0):
    """Build a pipeline, run a single epoch and tear it down."""
    with Pipeline(config, dataset) as p:
        return p.run_epoch(train_ids, epoch_seed, epoch)


def split_segments(ids, workers):
    """Equal-size contiguous segments of an already shuffled id list."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return np.array_split(np.asarray(ids, dtype=np.int64), workers)


class MultiWorker:
    """W workers, each with its own feature buffer and queues, sharing topology and staging.

    Staging regions are numbered worker-major; region ``w * N_e + i`` belongs
    to extractor ``i`` of worker ``w``; only other workers' regions lend blocks.
    """

    def __init__(self, config, dataset, observer=None):
        if not isinstance(dataset, Dataset):
            dataset = Dataset(dataset)
        config.validate(dataset.num_nodes)
        if config.mode != "async":
            raise ConfigError("multi-worker runs need async mode")
        self.cfg = config
        self.ds = dataset
        w, ne = config.workers, config.num_extractors
        keep = True if config.keep_resident is None else config.keep_resident
        self.staging = StagingBuffer(w * ne, config.m_b(dataset.num_nodes), dataset.header.aligned_row_bytes,
                                     block_rows=config.block_rows, keep_resident=keep,
                                     owners=[i // ne for i in range(w * ne)])
        self.pipes = [Pipeline(config, dataset, staging=self.staging, region_base=i * ne, worker=i,
                               observer=observer) for i in range(w)]

    def close(self):
        for p in self.pipes:
            p.close()
        self.staging.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def run_epoch(self, train_ids, epoch_seed=None, epoch=0):
        cfg = self.cfg
        epoch_seed = cfg.seed if epoch_seed is None else epoch_seed
        ids = np.asarray(train_ids, dtype=np.int64)
        perm = np.random.default_rng([epoch_shuffle_seed(epoch_seed, epoch)]).permutation(len(ids))
        segs = split_segments(ids[perm], cfg.workers)
        per_worker = [[s[i:i + cfg.batch_size] for i in range(0, len(s), cfg.batch_size)] for s in segs]
        nb = [len(c) for c in per_worker]
        assert max(nb) - min(nb) <= 1, f"segment imbalance {nb}"
        # batch ids are global so per-batch sampling seeds never collide across workers
        results, errors = [None] * cfg.workers, []
        offset = np.cumsum([0] + nb[:-1])

        def work(i):
            try:
                results[i] = self.pipes[i].run_epoch(None, epoch_seed, epoch, chunks=per_worker[i],
                                                     first_batch_id=int(offset[i]))
            except Exception as e:
                errors.append((i, e))

        ts = [threading.Thread(target=work, args=(i,), name=f"worker{i}") for i in range(cfg.workers)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        if errors:
            raise errors[0][1]
        return results


def run_multi_worker(config, dataset, train_ids, epoch_seed=None, epoch=0):
    """One epoch split across ``config.workers`` segments; returns per-worker stats."""
    with MultiWorker(config, dataset) as mw:
        return mw.run_epoch(train_ids, epoch_seed, epoch)
