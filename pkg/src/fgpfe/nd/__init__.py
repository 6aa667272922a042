"""Minimal differentiable dense-numeric kernel.

Float64 tensors over numpy with a reverse-mode tape, the small set of layer
primitives the pillar encoders need, a focal loss, plain SGD, and a
finite-difference gradient checker.  Not a general autodiff system: only the
ops defined here are differentiable, and every backward is hand-written and
checked against central differences.
"""

from fgpfe.nd.tensor import (
    Tensor,
    Parameter,
    as_tensor,
    no_grad,
    is_grad_enabled,
    uniform_init,
)
from fgpfe.nd.ops import (
    add,
    binned_linear,
    clamp,
    concat,
    conv1d,
    ewmul,
    gather_rows,
    log,
    matmul,
    mean_all,
    mul,
    power,
    reduce,
    relu,
    reshape,
    scatter_rows,
    segment_max,
    segment_mean,
    segment_sum,
    sequential_segment_sum,
    sigmoid,
    slice_axis,
    sub,
    where,
)
from fgpfe.nd.layers import Module, Linear, Conv1d, Mlp
from fgpfe.nd.loss import focal_loss
from fgpfe.nd.optim import sgd_step, zero_grads
from fgpfe.nd.gradcheck import fd_check, GradCheckReport
from fgpfe.nd.checkpoint import save_checkpoint, load_checkpoint, restore_parameters

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "uniform_init",
    "add",
    "sub",
    "mul",
    "ewmul",
    "matmul",
    "relu",
    "sigmoid",
    "log",
    "power",
    "clamp",
    "reduce",
    "mean_all",
    "concat",
    "reshape",
    "slice_axis",
    "where",
    "conv1d",
    "gather_rows",
    "scatter_rows",
    "binned_linear",
    "segment_mean",
    "segment_max",
    "segment_sum",
    "sequential_segment_sum",
    "Module",
    "Linear",
    "Conv1d",
    "Mlp",
    "focal_loss",
    "sgd_step",
    "zero_grads",
    "fd_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "restore_parameters",
]
