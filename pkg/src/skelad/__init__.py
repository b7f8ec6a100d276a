"""skelad: one-class anomaly detection for skeletal motion.

A separable graph-convolutional encoder plus projection head is trained
to contract normal-motion embeddings toward a center in a chosen latent
manifold (Euclidean, Poincare ball, or sphere); frames are scored by
latent distance from that center.
"""

from .encoder import EncoderConfig
from .manifolds import EUCLIDEAN, HYPERBOLIC, SPHERICAL, LatentPoint
from .model import ModelConfig, MotionModel, load_checkpoint, save_checkpoint
from .projector import ProjectorConfig
from .tensor import Tape, Tensor
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "ProjectorConfig",
    "ModelConfig",
    "MotionModel",
    "TrainConfig",
    "train",
    "Tape",
    "Tensor",
    "LatentPoint",
    "EUCLIDEAN",
    "HYPERBOLIC",
    "SPHERICAL",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
