from .tensor import (
    NonFiniteError,
    OpCounter,
    ShapeError,
    Tensor,
    finite_checks,
    no_grad,
)
from .layers import (
    ConfigError,
    FeedForward,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    Parameter,
    max_pool_seq,
    softmax_rows,
)
from .optim import AdamOneCycle, one_cycle_lr
from .checkpoint import CheckpointError, load_checkpoint, restore_parameters, save_checkpoint

__all__ = [
    "AdamOneCycle",
    "CheckpointError",
    "ConfigError",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "NonFiniteError",
    "OpCounter",
    "Parameter",
    "ShapeError",
    "Tensor",
    "finite_checks",
    "load_checkpoint",
    "max_pool_seq",
    "no_grad",
    "one_cycle_lr",
    "restore_parameters",
    "save_checkpoint",
    "softmax_rows",
]
