"""Expert-kernel dynamic 3D convolution networks for hyperspectral patches."""
from .checkpoint import load_checkpoint, save_checkpoint
from .conv import ConvSpec, conv3d, conv3d_backward, conv3d_forward, conv3d_naive
from .densenet import ArchConfig, EKGNet, build_model, growth_rate
from .errors import (ConfigError, ConsistencyError, EKGError, EmptyInputError, FormatError, LoadError,
                     NumericDomainError, ParameterError, ShapeError, StateError, TapeError)
from .expert import ExpertConv3d, aggregate_kernels
from .hsi import (HsiCube, PatchDataset, load_cube, normalize, pad_and_extract, save_cube,
                  stratified_split, synthesize_dataset)
from .kernels import BACKEND
from .mapping import MappingNetwork, temperature_at
from .tensor import Parameter, Tensor, backward, no_grad
from .trainer import ConfusionMatrix, TrainConfig, metrics, train

__version__ = "0.1.0"
