"""Reverse-mode automatic differentiation over float64 numpy arrays."""

from tabular.autodiff.gradcheck import KinkCrossing, KinkMonitor, grad_check, kink_monitor, numeric_grad, relative_error
from tabular.autodiff.nn import BatchNorm, Embedding, Linear, Module, ParamStore, glorot_uniform
from tabular.autodiff.ops import (
    add,
    affine,
    batch_norm,
    concat,
    cross_entropy_logits,
    div,
    dropout,
    embedding_lookup,
    exp,
    getitem,
    glu,
    log,
    log_softmax,
    matmul,
    mean,
    mse,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_rows,
    sub,
    transpose,
)
from tabular.autodiff.ops import sum as tsum
from tabular.autodiff.sparse import entmax15, entmax15_rows, entmoid15, sparsemax, sparsemax_rows
from tabular.autodiff.tensor import DTensor, as_tensor, backward, topological_order

__all__ = [
    "DTensor", "as_tensor", "backward", "topological_order",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "matmul", "affine",
    "tsum", "mean", "reshape", "transpose", "getitem", "concat",
    "relu", "sigmoid", "glu", "softmax", "softmax_rows", "log_softmax",
    "sparsemax", "sparsemax_rows", "entmax15", "entmax15_rows", "entmoid15",
    "embedding_lookup", "batch_norm", "dropout", "cross_entropy_logits", "mse",
    "Module", "ParamStore", "Linear", "Embedding", "BatchNorm", "glorot_uniform",
    "KinkCrossing", "KinkMonitor", "grad_check", "kink_monitor", "numeric_grad", "relative_error",
]
