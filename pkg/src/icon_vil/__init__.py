"""Versatile incremental learning on a frozen random backbone with trainable adapters.

Adapter shifts are steered away from earlier tasks' shift clusters, and the
classifier head grows a node when a known class degrades in a new domain.
"""
from .estimator import IconClassifier
from .metrics import EvalMatrix, average_accuracy, forgetting
from .model import ModelConfig, Network
from .scenario import generate_stream, synth_dataset
from .trainer import Learner, TrainerConfig, run_experiment

__version__ = "0.1.0"

__all__ = ["IconClassifier", "EvalMatrix", "average_accuracy", "forgetting", "ModelConfig",
           "Network", "generate_stream", "synth_dataset", "Learner", "TrainerConfig",
           "run_experiment"]
