"""Joint moment retrieval and highlight detection on clip/token features."""
from .datagen import Corpus, CorpusSpec, VideoTextPair, generate_corpus, read_corpus, write_corpus
from .harness import TrainConfig, ablate, evaluate, train
from .metrics import MetricsReport, compute_metrics
from .model import MomentHDModel

__all__ = [
    "Corpus", "CorpusSpec", "VideoTextPair", "generate_corpus", "read_corpus", "write_corpus",
    "TrainConfig", "ablate", "evaluate", "train", "MetricsReport", "compute_metrics", "MomentHDModel",
]
__version__ = "0.1.0"
