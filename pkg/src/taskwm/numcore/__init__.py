"""Differentiable-array substrate: tape autodiff, distributions, seeded RNG."""

from .core import (
    DiffArray,
    ShapeError,
    tape,
    backward,
    constant,
    parameter,
    matmul,
    add,
    sub,
    mul,
    div,
    neg,
    concat,
    slice_last,
    sum_,
    mean_,
    exp,
    log,
    sqrt,
    tanh,
    sigmoid,
    gelu,
    geglu,
    relu,
    layernorm,
    affine,
    gru_cell,
    l2_normalize,
    cosine_rows,
    cosine_sim,
    clamp,
    stop_gradient,
    repeat_rows,
    gather_rows,
    slice_rows,
    tile_rows,
    expert_adapter,
    dual_adapter_residual,
    gated_dual_geglu,
    squash_to,
    gauss_sample,
    kl_rows_fused,
)
from .dist import (
    DiagGaussian,
    LOG_STD_MIN,
    LOG_STD_MAX,
    squash_log_std,
    gaussian_head,
    kl_rows,
    kl_diag_gaussian,
)
from .rng import Rng
from .gradcheck import grad_check, grad_check_params

__all__ = [
    "DiffArray",
    "ShapeError",
    "tape",
    "backward",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "concat",
    "slice_last",
    "sum_",
    "mean_",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "gelu",
    "geglu",
    "relu",
    "layernorm",
    "affine",
    "gru_cell",
    "l2_normalize",
    "cosine_rows",
    "cosine_sim",
    "clamp",
    "stop_gradient",
    "repeat_rows",
    "gather_rows",
    "slice_rows",
    "tile_rows",
    "expert_adapter",
    "dual_adapter_residual",
    "gated_dual_geglu",
    "squash_to",
    "gauss_sample",
    "kl_rows_fused",
    "DiagGaussian",
    "LOG_STD_MIN",
    "LOG_STD_MAX",
    "squash_log_std",
    "gaussian_head",
    "kl_rows",
    "kl_diag_gaussian",
    "Rng",
    "grad_check",
    "grad_check_params",
]
