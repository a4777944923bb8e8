"""Curvature-aware preconditioned optimizers and diagnostics for neural fields."""
from . import autodiff, diagnostics, fields, optim, precond, tasks
from .autodiff import ParamVector, grad, hvp, hvp_fd_oracle, value_and_grad
from .config import ExperimentConfig, preset
from .errors import ConfigError, DegenerateSpectrum, FormatError, NumericFailure, RefusalError
from .fields import ActivationKind, NetworkSpec, PositionalEncoding, forward, init_params
from .kernels import BACKEND
from .optim import OptimizerConfig

__version__ = "0.1.0"
