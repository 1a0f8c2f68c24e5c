"""Tensor engine: values, reverse-mode gradients, primitives and gradient checking."""

from tranet.numcore import ops
from tranet.numcore.gradcheck import NonDeterministicError, Probe, finite_diff_check, finite_diff_probes
from tranet.numcore.kernels import BACKEND
from tranet.numcore.module import Module
from tranet.numcore.ops import (
    add,
    avg_pool2d,
    bce_with_logits,
    channel_max,
    channel_mean,
    concat_channels,
    constant,
    conv2d,
    flatten,
    fully_connected,
    global_avg_pool,
    global_max_pool,
    group_norm,
    max_pool2d,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    upsample_nearest2x,
)
from tranet.numcore.serialize import load_weights, save_weights
from tranet.numcore.tensor import (
    ComputeGraph,
    GraphError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    get_dtype,
    get_precision,
    grad_enabled,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "BACKEND",
    "ComputeGraph",
    "GraphError",
    "Module",
    "NonDeterministicError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "add",
    "avg_pool2d",
    "backward",
    "bce_with_logits",
    "channel_max",
    "channel_mean",
    "concat_channels",
    "constant",
    "conv2d",
    "finite_diff_check",
    "finite_diff_probes",
    "Probe",
    "flatten",
    "fully_connected",
    "get_dtype",
    "get_precision",
    "global_avg_pool",
    "global_max_pool",
    "group_norm",
    "grad_enabled",
    "load_weights",
    "max_pool2d",
    "mean",
    "mul",
    "no_grad",
    "ops",
    "precision",
    "relu",
    "reshape",
    "save_weights",
    "set_precision",
    "sigmoid",
    "upsample_nearest2x",
]
