"""Hierarchical attention spam classifier built on a minimal autodiff core."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .ingest import EmailDocument, RawEmail, load_corpus, parse_email
from .model import HanConfig, HanModel
from .training import TrainConfig, train
from .evaluation import EvalMatrix, aggregate, confusion_metrics, roc_auc
from .vocab import EmbeddingTable, Vocabulary, build_vocab

__all__ = [
    "Tape",
    "Tensor",
    "EmailDocument",
    "RawEmail",
    "load_corpus",
    "parse_email",
    "HanConfig",
    "HanModel",
    "TrainConfig",
    "train",
    "EvalMatrix",
    "aggregate",
    "confusion_metrics",
    "roc_auc",
    "EmbeddingTable",
    "Vocabulary",
    "build_vocab",
]
