"""Structured natural-gradient descent with matrix-group local parameterizations."""

from .matgroup import (
    StructureSpec,
    GroupElement,
    LocalDirection,
    group_mul,
    group_inv,
    h_map,
    exp_map,
    kappa_project,
    c_mask,
    apply_inv_transpose,
    precision_dense,
    covariance_lowrank,
)

__all__ = [
    "StructureSpec",
    "GroupElement",
    "LocalDirection",
    "group_mul",
    "group_inv",
    "h_map",
    "exp_map",
    "kappa_project",
    "c_mask",
    "apply_inv_transpose",
    "precision_dense",
    "covariance_lowrank",
]
