"""One-step flow-matching generative sequential recommendation."""
from .config import TrainConfig
from .data import SplitDataset, build_splits, ingest_tsv, make_batch
from .model import FaveModel

__all__ = ["FaveModel", "SplitDataset", "TrainConfig", "build_splits", "ingest_tsv", "make_batch"]
__version__ = "0.1.0"
