"""Debiased self-attention for fairer Vision Transformers, in plain numpy.

Pipeline: :mod:`~dsalab.data` builds a biased synthetic task,
:mod:`~dsalab.biasonly` trains a model that sees only the sensitive cue,
:mod:`~dsalab.attack` perturbs the patches that model attends to, and
:mod:`~dsalab.trainer` trains the target model on clean and attacked pairs
with an attention alignment term from :mod:`~dsalab.align`.
"""

from . import align, attack, biasonly, checkpoint, data, fairness, formats, optim, tensor, trainer, vit, viz
from .attack import run_attack, attack_dataset, am_mask, pcgrad_combine
from .biasonly import BiasOnlyConfig, train_bias_only
from .data import Dataset, DatasetSpec, generate
from .fairness import FairnessReport, Undefined, evaluate_predictions
from .tensor import Tensor, NonFiniteError, ShapeError
from .trainer import TrainConfig, train, evaluate
from .vit import ViTConfig, init_params, forward

__version__ = "0.1.0"

__all__ = [
    "align", "attack", "biasonly", "checkpoint", "data", "fairness", "formats", "optim",
    "tensor", "trainer", "vit", "viz",
    "run_attack", "attack_dataset", "am_mask", "pcgrad_combine",
    "BiasOnlyConfig", "train_bias_only", "Dataset", "DatasetSpec", "generate",
    "FairnessReport", "Undefined", "evaluate_predictions", "Tensor", "NonFiniteError", "ShapeError",
    "TrainConfig", "train", "evaluate", "ViTConfig", "init_params", "forward",
]
