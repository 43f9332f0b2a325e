"""
Two workers share one staging buffer. Rows one worker has just read can be
handed to the other without another disk read.
"""

import tempfile

import numpy as np

from featdrive.graph import SampledBatch
from featdrive.pipeline import Dataset, MultiWorker, PipelineConfig, default_train_ids
from featdrive.storage import create_synthetic_dataset

workdir = tempfile.mkdtemp(prefix="featdrive-demo-")
create_synthetic_dataset(num_nodes=20_000, dim=64, avg_degree=10, seed=2, out_dir=workdir)
ds = Dataset(workdir)

cfg = PipelineConfig(batch_size=250, fanouts=(5, 5), workers=2)
train = default_train_ids(ds.num_nodes, 4_000, seed=0)

with MultiWorker(cfg, ds) as mw:
    results = mw.run_epoch(train, epoch_seed=0)
    for st in results:
        print(f"worker {st.worker}: {st.trained} batches, {len(st.seed_ids())} seeds, "
              f"{st.io['rows_loaded']} rows from disk, {st.io['rows_from_staging']} from shared staging")
    seen = np.sort(np.concatenate([st.seed_ids() for st in results]))
    print("every training id seen exactly once:", np.array_equal(seen, train))
    print("staging:", mw.staging.accounting())

# the same effect in isolation: worker 0 reads a run of rows, worker 1 asks for them next
cfg = PipelineConfig(batch_size=100, fanouts=(5,), workers=2, num_extractors=1)
nodes = np.arange(5_000, 5_200)
batch = SampledBatch(0, nodes[:100], nodes, np.empty((2, 0), dtype=np.int64))
with MultiWorker(cfg, ds) as mw:
    w0, w1 = mw.pipes[0].extractors[0], mw.pipes[1].extractors[0]
    w0.extract_batch(batch)
    w1.extract_batch(batch)
    print(f"worker 0 issued {w0.stats.read_requests} reads; worker 1 issued {w1.stats.read_requests} "
          f"and copied {w1.stats.rows_from_staging} rows out of staging")
