"""Spatio-temporal GNN over sliding-window NetFlow graphs."""

__version__ = "0.1.0"

from .ingest import FeatureCodec, FlowRecord, LabelVocabulary, UNLABELED
from .metrics import MetricsReport
from .model import ModelConfig
from .training import TrainConfig
from .windows import GraphBuildConfig, TemporalGraph, WindowSnapshot

__all__ = [
    "FeatureCodec", "FlowRecord", "GraphBuildConfig", "LabelVocabulary",
    "MetricsReport", "ModelConfig", "TemporalGraph", "TrainConfig",
    "UNLABELED", "WindowSnapshot", "__version__",
]
