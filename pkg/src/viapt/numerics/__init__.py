"""Numeric substrate: autodiff tensors, deterministic RNG, small-matrix SVD."""

from .rng import ALGORITHM_ID, RngState, hash_name, sample_gaussian
from .svd import jacobi_svd_batch, svd_topk
from .tensor import (
    Tensor,
    add,
    backward,
    broadcast_batch,
    concat,
    constant,
    conv2d,
    exp,
    gelu,
    layernorm,
    log,
    log_softmax,
    matmul,
    mean_,
    mul,
    narrow,
    neg,
    reshape,
    scale,
    softmax,
    sum_,
    swap_last2,
    take_label,
    tanh,
    transpose,
    zero_grads,
)

__all__ = [
    "ALGORITHM_ID",
    "RngState",
    "Tensor",
    "add",
    "backward",
    "broadcast_batch",
    "concat",
    "constant",
    "conv2d",
    "exp",
    "gelu",
    "hash_name",
    "jacobi_svd_batch",
    "layernorm",
    "log",
    "log_softmax",
    "matmul",
    "mean_",
    "mul",
    "narrow",
    "neg",
    "reshape",
    "sample_gaussian",
    "scale",
    "softmax",
    "sum_",
    "svd_topk",
    "swap_last2",
    "take_label",
    "tanh",
    "transpose",
    "zero_grads",
]
