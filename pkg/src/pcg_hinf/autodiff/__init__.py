from .checkpoint import CheckpointError, assign_arrays, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, finite_diff_check
from .ops import (BatchNormState, add, batchnorm2d, clip, conv2d_same, dense, index, log,
                  matmul, maxpool_2x2, mean, mul, one_minus, pointwise, relu, reshape, scale,
                  sigmoid, sub, tanh, transpose)
from .ops import sum as sum_
from .tensor import GraphError, Tensor, as_tensor, backward, grad_enabled, make_node, no_grad

__all__ = [
    "Tensor", "as_tensor", "backward", "make_node", "GraphError", "no_grad", "grad_enabled",
    "add", "sub", "mul", "scale", "one_minus", "sigmoid", "tanh", "relu", "log", "clip",
    "pointwise", "sum_", "mean", "reshape", "transpose", "index", "matmul", "dense",
    "conv2d_same", "batchnorm2d", "BatchNormState", "maxpool_2x2",
    "finite_diff_check", "GradCheckReport",
    "save_checkpoint", "load_checkpoint", "assign_arrays", "CheckpointError",
]
