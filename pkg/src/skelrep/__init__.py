"""Self-supervised skeleton sequence representation learning toolkit."""

from .checkpoint import CheckpointRecord
from .contrast import CmlConfig, CmlModel, NegativeQueue
from .data import (
    DatasetManifest,
    JointMap,
    SkeletonSequence,
    SynthConfig,
    VelocitySequence,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .evaluate import EmbeddingSet, EvalReport, ProbeConfig, knn_eval, linear_probe
from .fuser import DistillConfig
from .numeric import Parameter, RngStream, Tensor
from .pipeline import MetricsLog, TrainConfig, train

__all__ = [
    "CheckpointRecord",
    "CmlConfig",
    "CmlModel",
    "DatasetManifest",
    "DistillConfig",
    "EmbeddingSet",
    "EvalReport",
    "JointMap",
    "MetricsLog",
    "NegativeQueue",
    "Parameter",
    "ProbeConfig",
    "RngStream",
    "SkeletonSequence",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "VelocitySequence",
    "knn_eval",
    "linear_probe",
    "load_dataset",
    "save_dataset",
    "synth_generate",
    "train",
]

__version__ = "0.1.0"
