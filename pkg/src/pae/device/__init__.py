"""Device side: datasets, the epoch-1 pipeline and the local session."""

from .dataset import Dataset, Sample, dataset_from_config, ingest_delimited, synth_dataset
from .pipeline import DevicePipeline, RetryPolicy, SessionResult, TransmitStats
from .session import DeviceSession, load_session, predict, save_session

__all__ = [
    "Dataset",
    "DevicePipeline",
    "DeviceSession",
    "RetryPolicy",
    "Sample",
    "SessionResult",
    "TransmitStats",
    "dataset_from_config",
    "ingest_delimited",
    "load_session",
    "predict",
    "save_session",
    "synth_dataset",
]
