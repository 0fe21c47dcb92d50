"""Joint extraction of aspect-opinion term pairs with syntax-fused encoding
and high-order pair scoring."""

from .corpus import DatasetStats, GoldPair, Sentence, SpanRef, build_vocab, compute_stats, load_corpus
from .evaluate import EvalReport, correlation_table, evaluate_model, score_pairs
from .model import ModelConfig, SynFueModel, Vocabs
from .encoder import EncoderConfig
from .trainer import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DatasetStats",
    "EncoderConfig",
    "EvalReport",
    "GoldPair",
    "ModelConfig",
    "Sentence",
    "SpanRef",
    "SynFueModel",
    "TrainConfig",
    "Vocabs",
    "build_vocab",
    "compute_stats",
    "correlation_table",
    "evaluate_model",
    "load_corpus",
    "score_pairs",
    "train",
]
