"""A small, self-contained CNN training harness built on numpy.

The public surface re-exports the pieces needed to assemble, train, and
inspect the classifier without reaching into submodules.
"""

from .autograd import GradCheckReport, Parameter, Tape, grad_check, zero_grad
from .data import (
    AugmentPolicy,
    DatasetManifest,
    augment,
    build_manifest,
    dataset_stats,
    decode_png,
    iter_batches,
    make_synth_corpus,
    resize_bilinear,
    rotate_bilinear,
)
from .errors import BcdnetError
from .model import (
    Model,
    ModelConfig,
    build_model,
    load_checkpoint,
    micro_config,
    model_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .nn import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
)
from .optim import Adam, StepLR, accuracy, softmax, softmax_cross_entropy
from .tensor import Tensor, deterministic, set_deterministic

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AugmentPolicy",
    "BatchNorm2d",
    "BcdnetError",
    "Conv2d",
    "DatasetManifest",
    "Dropout",
    "Flatten",
    "GradCheckReport",
    "Linear",
    "MaxPool2d",
    "Model",
    "ModelConfig",
    "Parameter",
    "ReLU",
    "StepLR",
    "Tape",
    "Tensor",
    "accuracy",
    "augment",
    "build_manifest",
    "build_model",
    "dataset_stats",
    "decode_png",
    "deterministic",
    "grad_check",
    "iter_batches",
    "load_checkpoint",
    "make_synth_corpus",
    "micro_config",
    "model_from_checkpoint",
    "read_checkpoint",
    "resize_bilinear",
    "rotate_bilinear",
    "save_checkpoint",
    "set_deterministic",
    "softmax",
    "softmax_cross_entropy",
    "zero_grad",
]
