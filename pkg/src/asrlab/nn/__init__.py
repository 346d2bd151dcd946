from .tensor import Tensor, parameter, finite_difference_check
from .layers import (
    BlstmLayer,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    TransformerBlock,
    conv1d,
    dropout,
    layer_norm,
    linear,
    lstm_cell,
    scaled_dot_attention,
)
from .losses import contrastive_loss, cross_entropy, diversity_loss, focal_loss
from .optim import LrSchedule, Nadam, apply_gradient_noise, gradient_noise, schedule_rate
from .checkpoint import dump_params, load_checkpoint, load_into, save_checkpoint
