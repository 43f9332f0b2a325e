"""Concurrency stress for the feature-buffer protocol.

Extractor threads run the acquire / claim / bind / publish / wait sequence
on random overlapping node sets without disk I/O: a "load" writes the node id
into its slot of a small region array, so training can check that every alias
points at the right row. A releaser thread drops references. Loads fail at a
configurable rate to exercise rollback. Assertions are on throughout
(``check=True``) and a load observer enforces that no node is ever loaded by
two extractors at once.
"""

import queue
import random
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .featbuf import FeatureBuffer, InvariantError


class SingleLoaderObserver:
    """Records concurrent loads of the same node as violations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._loading = {}
        self.violations = []
        self.loads = 0

    def load_start(self, who, nodes):
        with self._lock:
            for n in np.asarray(nodes).tolist():
                if n in self._loading:
                    self.violations.append(f"node {n} loaded by {who} while {self._loading[n]} holds it")
                self._loading[n] = who
            self.loads += len(nodes)

    def load_end(self, who, nodes):
        with self._lock:
            for n in np.asarray(nodes).tolist():
                if self._loading.get(n) is who:
                    del self._loading[n]


@dataclass
class StressReport:
    batches: int = 0
    completed: int = 0
    failed_injected: int = 0
    released: int = 0
    nodes_acquired: int = 0
    hits: int = 0
    loads: int = 0
    waits: int = 0
    evictions: int = 0
    abandoned: int = 0
    full_checks: int = 0
    wall_s: float = 0.0
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


class _InjectedFailure(Exception):
    pass


def run_stress(num_batches=10_000, extractors=8, num_nodes=2_000, max_batch=200, slots=None,
               fail_rate=0.01, seed=0, hot_fraction=0.2, release_delay=0.0, check_every=500,
               timeout=120.0):
    """Drive ``num_batches`` random batches through one :class:`FeatureBuffer`.

    ``slots`` defaults to the reservation ``extractors * max_batch``. Batches
    mix a small hot set (shared across threads, forcing waits) with uniform
    draws over the whole id range (forcing evictions).
    """
    slots = extractors * max_batch if slots is None else slots
    fb = FeatureBuffer(num_nodes, slots, 8, min_slots=extractors * max_batch, check=True,
                       wait_timeout=timeout)
    region = np.full(slots, -1, dtype=np.int64)
    obs = SingleLoaderObserver()
    rep = StressReport(batches=num_batches)
    work = queue.Queue()
    for b in range(num_batches):
        work.put(b)
    for _ in range(extractors):
        work.put(None)
    rq = queue.Queue()
    lock = threading.Lock()
    hot = max(1, int(num_nodes * hot_fraction) // 10)
    stop = threading.Event()

    def violation(msg):
        with lock:
            rep.violations.append(msg)
        stop.set()

    def make_batch(rng):
        m = rng.integers(1, max_batch + 1)
        k_hot = min(hot, int(rng.integers(0, m + 1)))
        a = rng.choice(hot, size=k_hot, replace=False)
        b = rng.choice(num_nodes, size=m, replace=False)
        nodes = np.concatenate((a, b))
        _, first = np.unique(nodes, return_index=True)
        return nodes[np.sort(first)][:m].astype(np.int64)

    def load(who, nodes, rng, may_fail):
        obs.load_start(who, nodes)
        published = []
        left = nodes
        try:
            while len(left):
                got = fb.get_standby_slots(len(left), block=True)
                part, left = left[:len(got)], left[len(got):]
                fb.bind_slots(part, got)
                if may_fail and rng.random() < 0.5:
                    raise _InjectedFailure
                if rng.random() < 0.3:
                    time.sleep(0)
                region[got] = part
                # publish in a couple of chunks, like completions trickling in
                cut = int(rng.integers(0, len(part) + 1))
                for piece in (part[:cut], part[cut:]):
                    if len(piece):
                        fb.publish_valid(piece)
                        published.append(piece)
                        obs.load_end(who, piece)
        except BaseException:
            done = np.concatenate(published) if published else np.empty(0, np.int64)
            rest = np.setdiff1d(nodes, done)
            obs.load_end(who, rest)
            fb.abort_loads(rest)
            raise

    def extractor(idx):
        who = f"x{idx}"
        while not stop.is_set():
            bid = work.get()
            if bid is None:
                return
            rng = np.random.default_rng([seed, bid])
            nodes = make_batch(rng)
            may_fail = rng.random() < fail_rate
            try:
                acq = fb.acquire_for_batch(nodes)
                try:
                    load(who, nodes[acq.load_pos], rng, may_fail)
                    waiting = nodes[acq.wait_pos]
                    while len(waiting):
                        orphans = fb.wait_valid(waiting)
                        if not len(orphans):
                            break
                        load(who, orphans, rng, False)
                except _InjectedFailure:
                    fb.release_batch(nodes)
                    with lock:
                        rep.failed_injected += 1
                        rep.nodes_acquired += len(nodes)
                    continue
                alias = fb.slots_of(nodes)
                if len(np.unique(alias)) != len(alias):
                    violation(f"batch {bid}: two nodes share a slot")
                if not np.array_equal(region[alias], nodes):
                    violation(f"batch {bid}: alias points at another node's row")
                with lock:
                    rep.completed += 1
                    rep.nodes_acquired += len(nodes)
                rq.put(nodes)
                if bid % check_every == 0:
                    fb.check_invariants()
                    with lock:
                        rep.full_checks += 1
            except InvariantError as e:
                violation(f"batch {bid}: {e}")
            except Exception as e:
                violation(f"batch {bid}: {type(e).__name__}: {e}")

    def releaser():
        while True:
            nodes = rq.get()
            if nodes is None:
                return
            if release_delay:
                time.sleep(release_delay * random.random())
            try:
                fb.release_batch(nodes)
            except Exception as e:
                violation(f"release: {type(e).__name__}: {e}")
            with lock:
                rep.released += 1

    t0 = time.perf_counter()
    rel = threading.Thread(target=releaser, name="stress-releaser", daemon=True)
    rel.start()
    ts = [threading.Thread(target=extractor, args=(i,), name=f"stress-x{i}", daemon=True)
          for i in range(extractors)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(timeout)
        if t.is_alive():
            violation(f"{t.name} did not finish within {timeout}s (deadlock?)")
    rq.put(None)
    rel.join(timeout)
    rep.wall_s = time.perf_counter() - t0

    if not stop.is_set():
        try:
            fb.check_invariants()
            rep.full_checks += 1
        except InvariantError as e:
            rep.violations.append(f"final: {e}")
        m = fb.map
        if m.ref.any() or m.loading.any():
            rep.violations.append("references or loads left over after the run")
        if len(fb.standby) != slots:
            rep.violations.append(f"standby holds {len(fb.standby)} of {slots} slots after the run")
        if rep.completed + rep.failed_injected != num_batches or rep.released != rep.completed:
            rep.violations.append("batch conservation failed")
    rep.violations.extend(obs.violations)
    s = fb.stats()
    rep.hits, rep.loads, rep.waits = s["hits"], s["loads"], s["waits"]
    rep.evictions, rep.abandoned = s["evictions"], s["abandoned_loads"]
    return rep
