"""
Stage-1 loss terms and their weighted combination.

Every loss accepts arrays or expressions. With expression inputs the result is
an expression ready for `autodiff.backward`; with plain arrays it is a float.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np

import autodiff as ad
from autodiff import Expr
from errors import NumericalError


logger = logging.getLogger(__name__)

ENTROPY_CLAMP = 1e-7

LOSS_NAMES = ("photo", "eik", "spec", "entropy")


def _result(expr: Expr, symbolic: bool):
    return expr if symbolic else float(expr.value)


def photometric_loss(rendered, target):
    """(1/N) sum_i ||rendered_i - target_i||^2; 0 for an empty batch."""
    symbolic = isinstance(rendered, Expr)
    rendered_shape = np.shape(ad.value_of(rendered))
    if rendered_shape != np.shape(target):
        raise ValueError(f"Rendered shape {rendered_shape} does not match target shape {np.shape(target)}")
    n = rendered_shape[0]
    if n == 0:
        return _result(ad.constant(0.0), symbolic)
    diff = ad.as_expr(rendered) - np.asarray(target, dtype=np.float64)
    return _result(ad.reduce_sum(diff * diff) / float(n), symbolic)


def eikonal_loss(model, sample_points: np.ndarray, alpha: Optional[float] = None) -> Expr:
    """(1/M) sum_j (||grad f(x_j)|| - 1)^2 over the sample points."""
    sample_points = np.asarray(sample_points, dtype=np.float64)
    if len(sample_points) < 1:
        raise ValueError("eikonal_loss needs at least one sample point")
    norms = ad.norm(model.sdf_gradient_expr(sample_points, alpha), axis=1)
    off = norms - 1.0
    return ad.reduce_mean(off * off)


def specular_loss(c_s):
    """(1/N) sum_i ||c_s_i||^2; 0 for an empty batch."""
    symbolic = isinstance(c_s, Expr)
    n = np.shape(ad.value_of(c_s))[0]
    if n == 0:
        return _result(ad.constant(0.0), symbolic)
    c_s = ad.as_expr(c_s)
    return _result(ad.reduce_sum(c_s * c_s) / float(n), symbolic)


def entropy_loss(weights, valid: Optional[np.ndarray] = None):
    """
    Mean binary entropy of rendering weights, w clamped to [1e-7, 1 - 1e-7].

    Parameters:
        weights: Per-sample weights, any shape.
        valid (np.ndarray, optional): Boolean mask of samples to average over.
    """
    symbolic = isinstance(weights, Expr)
    weights = ad.as_expr(weights)
    if valid is not None:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), np.shape(weights.value))
        if not np.any(valid):
            return _result(ad.constant(0.0), symbolic)
        weights = weights[valid]
    if np.size(weights.value) == 0:
        return _result(ad.constant(0.0), symbolic)
    w = ad.clip(weights, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    one_minus = 1.0 - w
    entropy = -(w * ad.log(w)) - one_minus * ad.log(one_minus)
    return _result(ad.reduce_mean(entropy), symbolic)


def weighted_sum(parts: Sequence, weights: Sequence[float], names: Sequence[str]):
    """
    sum_k weights[k] * parts[k] after checking every part is finite.

    Raises:
        NumericalError: If a part is non-finite; the message names it.
    """
    if len(parts) != len(weights) or len(parts) != len(names):
        raise ValueError(f"Expected {len(names)} loss parts and weights, got {len(parts)} and {len(weights)}")
    symbolic = any(isinstance(p, Expr) for p in parts)
    for name, part in zip(names, parts):
        value = np.asarray(ad.value_of(part), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"Loss part '{name}' is not finite ({value})")
    total = ad.constant(0.0)
    for part, weight in zip(parts, weights):
        total = total + float(weight) * ad.as_expr(part)
    return _result(total, symbolic)


def total_loss(parts: Sequence, weights: Sequence[float]):
    """lambda_photo L_photo + lambda_eik L_eik + lambda_spec L_spec + lambda_entropy L_entropy."""
    return weighted_sum(parts, weights, LOSS_NAMES)
