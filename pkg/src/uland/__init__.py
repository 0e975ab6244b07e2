"""Uncertainty-gated key-frame landmark detection in videos."""
from .config import ArchConfig, GatingConfig, GenConfig, RunConfig, TrainConfig, load_config
from .corpus import Corpus, LandmarkLabel, SyntheticVideo, generate_corpus, generate_video, read_corpus, write_corpus
from .estimator import ULandDetector

__all__ = [
    "ArchConfig",
    "Corpus",
    "GatingConfig",
    "GenConfig",
    "LandmarkLabel",
    "RunConfig",
    "SyntheticVideo",
    "TrainConfig",
    "ULandDetector",
    "generate_corpus",
    "generate_video",
    "load_config",
    "read_corpus",
    "write_corpus",
]

__version__ = "0.1.0"
