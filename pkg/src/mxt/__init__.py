"""Multimodal attribute-value generation on numpy.

Text prompts are fused with a global image vector by a multimodal adaptation
gate, encoded by a transformer stack, fused again with image-region features
by cross-attention, and decoded greedily into an attribute value.
"""
from .encoder import ModelConfig
from .evaluation import MetricReport, PredictionRecord, exact_match, f1_report, recall_at_precision
from .synth import CatalogSpec, generate
from .tensor import Tape, Tensor, backward, grad_check
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CatalogSpec", "Checkpoint", "MetricReport", "ModelConfig", "PredictionRecord", "Tape", "Tensor",
    "TrainConfig", "backward", "exact_match", "f1_report", "generate", "grad_check", "load_checkpoint",
    "recall_at_precision", "save_checkpoint", "train",
]
