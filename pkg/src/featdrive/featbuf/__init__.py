"""Feature buffer manager and staging buffer."""

from .manager import (
    Acquisition,
    BufferTimeout,
    DenseMapping,
    FeatureBuffer,
    InvariantError,
    SparseMapping,
    StandbyList,
)
from .staging import StagingBuffer, StagingExhausted

__all__ = [
    "Acquisition", "BufferTimeout", "DenseMapping", "FeatureBuffer", "InvariantError",
    "SparseMapping", "StagingBuffer", "StagingExhausted", "StandbyList",
]
