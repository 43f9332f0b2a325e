"""featdrive command line: gen, run, iobench, stress.

Machine-readable JSON goes to stdout (one document per line); a short human
summary goes to stderr. Exit codes: 0 success, 2 configuration error,
3 runtime failure (including any failed batch).
"""

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path


from . import __version__
from .pipeline import (
    ConfigError,
    Dataset,
    MultiWorker,
    Pipeline,
    PipelineConfig,
    PipelineError,
    default_train_ids,
)
from .storage import FormatError, create_synthetic_dataset, run_io_bench
from .stress import run_stress

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("featdrive")


class UsageError(Exception):
    pass


def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _fanouts(s):
    try:
        f = tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"fanouts must look like 10,10,10, got {s!r}") from None
    if not f or min(f) < 1:
        raise argparse.ArgumentTypeError(f"fanouts must be positive, got {s!r}")
    return f


def _slots(s):
    if s == "auto":
        return None
    return _positive_int(s)


def build_id():
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run_manifest(config, dataset, started):
    files = {}
    if dataset.manifest:
        files = {k: v.get("sha256") for k, v in dataset.manifest.get("files", {}).items()}
    return {"config": asdict(config), "dataset": str(dataset.path), "dataset_sha256": files,
            "build": build_id(), "started": started, "emitted": _stamp()}


def _emit(doc):
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


def _say(msg):
    print(msg, file=sys.stderr)


# -- commands ------------------------------------------------------------------


def cmd_gen(args):
    if args.nodes < 1 or args.dim < 1 or args.avg_degree < 0:
        raise UsageError("--nodes and --dim must be >= 1 and --avg-degree >= 0")
    t = time.perf_counter()
    man = create_synthetic_dataset(args.nodes, args.dim, args.avg_degree, args.seed, args.out)
    _emit(man)
    _say(f"wrote {args.nodes} nodes x {args.dim} dims, {man['num_edges']} edges to {args.out} "
         f"in {time.perf_counter() - t:.1f}s")
    return EXIT_OK


def config_from_args(args):
    return PipelineConfig(
        num_samplers=args.samplers, num_extractors=args.extractors, eq_cap=args.eq_cap,
        tq_cap=args.tq_cap, batch_size=args.batch_size, fanouts=args.fanout, slots=args.slots,
        io_depth=args.io_depth, mode=args.mode, placement=args.placement, workers=args.workers,
        seed=args.seed, compute_delay=args.compute_delay, read_latency=args.read_latency,
        copy_latency=args.copy_latency, engine=args.engine, direct=args.io == "direct",
        verify=args.verify, check=args.check, retries=args.retries)


def cmd_run(args):
    cfg = config_from_args(args)
    try:
        ds = Dataset(args.dataset)
    except (FileNotFoundError, FormatError) as e:
        raise UsageError(f"cannot open dataset {args.dataset}: {e}") from None
    cfg.validate(ds.num_nodes)
    _say(f"M_b = {cfg.m_b(ds.num_nodes)}, slots = {cfg.resolved_slots(ds.num_nodes)} "
         f"({cfg.resolved_slots(ds.num_nodes) * ds.header.row_bytes / 1e9:.2f} GB feature buffer)")
    train_ids = default_train_ids(ds.num_nodes, args.train_ids, args.seed)
    started = _stamp()
    failed = 0
    runner = MultiWorker(cfg, ds) if cfg.workers > 1 else Pipeline(cfg, ds)
    with runner:
        for epoch in range(args.epochs):
            result = runner.run_epoch(train_ids, args.seed, epoch)
            for st in result if isinstance(result, list) else [result]:
                st.manifest = run_manifest(cfg, ds, started)
                _emit(st.to_dict())
                failed += st.failed
                _say(f"epoch {epoch} worker {st.worker}: {st.trained}/{st.batches} batches in "
                     f"{st.wall_s:.2f}s, reads {st.io.get('read_requests', 0)}, "
                     f"hits {st.buffer.get('hits', '-')}, failed {st.failed}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_iobench(args):
    try:
        res = run_io_bench(args.file, args.mode, block_bytes=args.block, io_mode=args.io,
                           duration=args.secs, seed=args.seed, engine=args.engine,
                           cold_cache=not args.warm)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    res.update({"file": str(args.file), "mode": args.mode, "block": args.block, "io": args.io})
    _emit(res)
    _say(f"{args.mode} {args.io}: {res['bandwidth_mb_s']:.1f} MB/s, "
         f"{res['mean_latency_us']:.0f} us mean latency ({res.get('engine', args.engine)})")
    return EXIT_OK


def cmd_stress(args):
    rep = run_stress(num_batches=args.batches, extractors=args.extractors, num_nodes=args.nodes,
                     max_batch=args.max_batch, fail_rate=args.fail_rate, seed=args.seed)
    doc = asdict(rep)
    doc["ok"] = rep.ok
    _emit(doc)
    _say(f"{rep.batches} batches, {len(rep.violations)} violations, {rep.wall_s:.1f}s")
    return EXIT_OK if rep.ok else EXIT_RUNTIME


# -- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="featdrive", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--dim", type=int, default=128)
    g.add_argument("--avg-degree", type=float, default=15)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run training epochs over a dataset")
    r.add_argument("--dataset", type=Path, required=True)
    r.add_argument("--batch-size", type=_positive_int, default=1000)
    r.add_argument("--fanout", type=_fanouts, default=(10, 10, 10))
    r.add_argument("--samplers", type=_positive_int, default=4)
    r.add_argument("--extractors", type=_positive_int, default=4)
    r.add_argument("--eq-cap", type=_positive_int, default=6)
    r.add_argument("--tq-cap", type=_positive_int, default=4)
    r.add_argument("--slots", type=_slots, default=None, help="slot count or 'auto' (N_e x M_b)")
    r.add_argument("--io-depth", type=_positive_int, default=64)
    r.add_argument("--mode", choices=("async", "sync"), default="async")
    r.add_argument("--placement", choices=("device-sim", "host"), default="device-sim")
    r.add_argument("--workers", type=_positive_int, default=1)
    r.add_argument("--epochs", type=_positive_int, default=1)
    r.add_argument("--train-ids", type=_positive_int, default=10_000,
                   help="size of the fixed random training set")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--verify", action="store_true", help="compare every row with a synchronous read")
    r.add_argument("--check", action="store_true", help="check buffer invariants on every operation")
    r.add_argument("--compute-delay", type=float, default=0.0, help="seconds of mock model work per batch")
    r.add_argument("--read-latency", type=float, default=0.0, help="injected seconds per disk read")
    r.add_argument("--copy-latency", type=float, default=0.0, help="injected seconds per region copy")
    r.add_argument("--io", choices=("direct", "buffered"), default="direct")
    r.add_argument("--engine", choices=("auto", "uring", "threads"), default="auto")
    r.add_argument("--retries", type=int, default=0)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("iobench", help="random-read bandwidth microbenchmark")
    b.add_argument("--file", type=Path, required=True)
    b.add_argument("--mode", default="async:64", help="sync:N (N threads) or async:D (depth D)")
    b.add_argument("--block", type=_positive_int, default=512)
    b.add_argument("--io", choices=("direct", "buffered"), default="direct")
    b.add_argument("--secs", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--engine", choices=("auto", "uring", "threads"), default="auto")
    b.add_argument("--warm", action="store_true", help="skip dropping the file from the page cache")
    b.set_defaults(func=cmd_iobench)

    s = sub.add_parser("stress", help="randomized concurrency stress of the buffer manager")
    s.add_argument("--batches", type=_positive_int, default=10_000)
    s.add_argument("--extractors", type=_positive_int, default=8)
    s.add_argument("--nodes", type=_positive_int, default=2_000)
    s.add_argument("--max-batch", type=_positive_int, default=200)
    s.add_argument("--fail-rate", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_stress)
    return p


def main(argv=None):
    level = os.environ.get("FEATDRIVE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as e:
        _say(f"featdrive {args.command}: error: {e}")
        return EXIT_CONFIG
    except PipelineError as e:
        if e.stats is not None:
            _emit(e.stats.to_dict())
        _say(f"featdrive {args.command}: {e}")
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as e:
        _say(f"featdrive {args.command}: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
