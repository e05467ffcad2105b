"""Normalizing flows whose training direction is the exact inverse of a masked convolution."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar_bin, load_dataset, load_idx, synth_dataset
from .errors import (
    ArgumentError,
    CapacityError,
    DimensionError,
    FormatError,
    InvFlowError,
    NonFiniteError,
    SingularityError,
    StateError,
)
from .invconv import (
    DiagonalSchedule,
    SolveStats,
    conv_forward,
    conv_inverse,
    count_sequential_stages,
    grad_input,
    grad_weights,
    logdet,
)
from .model import FlowModel, ModelConfig
from .tensor import MaskedKernel, build_dense_operator, devectorize, vectorize
from .train import TrainConfig, Trainer, bits_per_dim, dequantize, train

__version__ = "0.1.0"
