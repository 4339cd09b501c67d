"""Differentiable rank-4 tensor graph with reverse-mode gradients."""

from .tensor import Tensor, as_array4d
from .primitives import BatchNormState, BCE_EPS
from .graph import (
    GraphNode, leaf, const, conv2d, batchnorm2d, relu, sigmoid, add, mul,
    concat, maxpool, upsample_nearest, resize_bilinear, global_mean_pool,
    mean, tensor_sum, amax, fully_connected, stack_batch, slice_batch,
    bce_loss, dice_loss_node, evaluate, evaluate_multi, backward, fetch,
)
from .gradcheck import grad_check, GradCheckReport, LeafCheck
from .optim import AdamState, adam_step
from .checkpoint import save_checkpoint, load_checkpoint, Checkpoint

__all__ = [
    "Tensor", "as_array4d", "BatchNormState", "BCE_EPS", "GraphNode",
    "leaf", "const", "conv2d", "batchnorm2d", "relu", "sigmoid", "add",
    "mul", "concat", "maxpool", "upsample_nearest", "resize_bilinear",
    "global_mean_pool", "mean", "tensor_sum", "amax", "fully_connected",
    "stack_batch", "slice_batch", "bce_loss", "dice_loss_node",
    "evaluate", "evaluate_multi", "backward", "fetch",
    "grad_check", "GradCheckReport", "LeafCheck", "AdamState", "adam_step",
    "save_checkpoint", "load_checkpoint", "Checkpoint",
]
