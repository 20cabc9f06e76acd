# app/services/data/__init__.py
from app.services.data.ingest import ingest
from app.services.data.sample_file import read_samples, write_samples
from app.services.data.sampling import SplitPolicy, negative_sample, split
from app.services.data.types import IngestStats, Sample
from app.services.data.vocab import Vocabulary

__all__ = [
    "IngestStats",
    "Sample",
    "SplitPolicy",
    "Vocabulary",
    "ingest",
    "negative_sample",
    "read_samples",
    "split",
    "write_samples",
]
