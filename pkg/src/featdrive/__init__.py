"""Out-of-core GNN feature extraction: buffer-managed, asynchronous, two-phase."""

__version__ = "0.1.0"

from .extractor import DeviceRegion, ExtractionError, Extractor, HostRegion, transfer_to_region
from .featbuf import FeatureBuffer, StagingBuffer
from .graph import SampledBatch, Topology, max_batch_nodes, partition_epoch, sample_khop
from .pipeline import (
    ConfigError,
    Dataset,
    EpochStats,
    MultiWorker,
    Pipeline,
    PipelineConfig,
    PipelineError,
    batch_checksum,
    default_train_ids,
    run_epoch,
    run_multi_worker,
    trainer_step,
)
from .storage import DatasetHeader, FeatureTable, create_synthetic_dataset, run_io_bench

__all__ = [
    "ConfigError", "Dataset", "DatasetHeader", "DeviceRegion", "EpochStats", "ExtractionError",
    "Extractor", "FeatureBuffer", "FeatureTable", "HostRegion", "MultiWorker", "Pipeline",
    "PipelineConfig", "PipelineError", "SampledBatch", "StagingBuffer", "Topology",
    "batch_checksum", "create_synthetic_dataset", "default_train_ids", "max_batch_nodes", "partition_epoch",
    "run_epoch", "run_io_bench", "run_multi_worker", "sample_khop", "trainer_step",
    "transfer_to_region",
]
