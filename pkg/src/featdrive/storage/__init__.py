"""Dataset formats, generator, aligned read engines and the I/O microbenchmark."""

from .aio import (
    OK,
    OS_ERROR,
    SHORT_READ,
    IoCompletion,
    IoRequest,
    Reader,
    ThreadReader,
    UringReader,
    open_reader,
    resolve_engine,
    submit_async_reads,
)
from .bench import ensure_bench_file, run_io_bench
from .format import (
    FEATURES_FILE,
    INDICES_FILE,
    INDPTR_FILE,
    MANIFEST_FILE,
    SECTOR,
    DatasetHeader,
    FeatureTable,
    FormatError,
    ReadExtent,
    compute_read_extent,
    read_header,
)
from .generate import create_synthetic_dataset, feature_rows, load_manifest
from .uring import uring_available

__all__ = [
    "OK", "OS_ERROR", "SHORT_READ", "SECTOR",
    "FEATURES_FILE", "INDICES_FILE", "INDPTR_FILE", "MANIFEST_FILE",
    "DatasetHeader", "FeatureTable", "FormatError", "ReadExtent",
    "IoCompletion", "IoRequest", "Reader", "ThreadReader", "UringReader",
    "compute_read_extent", "create_synthetic_dataset", "ensure_bench_file",
    "feature_rows", "load_manifest", "open_reader", "read_header",
    "resolve_engine", "run_io_bench", "submit_async_reads", "uring_available",
]
