"""Dice-family overlap scores and losses.

``soft_dice`` uses the squared-denominator form
2*sum(p*g) / (sum(p^2) + sum(g^2)); the multi-class training loss is a
negative weighted Dice with fixed per-class weights where the weighted
denominator sums p + g linearly. Both get a small additive smoothing
term (numerator and denominator alike) so empty classes do not divide
by zero; the smoothing can be switched off when checking gradients
against the closed form.
"""

from __future__ import annotations

import numpy as np

from .errors import IndexOutOfRange, NotNormalized, ShapeMismatch

DEFAULT_CLASS_WEIGHTS = (0.1, 1.0, 1.0, 1.0)
SMOOTHING = 1e-7


def _check_same_shape(p: np.ndarray, g: np.ndarray):
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {g.shape}")


def soft_dice(p: np.ndarray, g: np.ndarray, smooth: float = SMOOTHING) -> float:
    """Soft Dice overlap of a probability map against a binary target, in [0, 1]."""
    _check_same_shape(p, g)
    num = 2.0 * float(np.sum(p * g)) + smooth
    den = float(np.sum(p * p) + np.sum(g * g)) + smooth
    return num / den


def dice_grad(p: np.ndarray, g: np.ndarray, j) -> float:
    """Analytic partial derivative of soft_dice (no smoothing) at voxel j.

    j may be a flat index or an index tuple into p.
    """
    _check_same_shape(p, g)
    if isinstance(j, tuple):
        try:
            pj = float(p[j])
            gj = float(g[j])
        except IndexError:
            raise IndexOutOfRange(f"voxel index {j} outside {p.shape}") from None
    else:
        if not 0 <= int(j) < p.size:
            raise IndexOutOfRange(f"flat index {j} outside size {p.size}")
        pj = float(p.flat[int(j)])
        gj = float(g.flat[int(j)])
    den = float(np.sum(p * p) + np.sum(g * g))
    inter = float(np.sum(p * g))
    return 2.0 * (gj * den - 2.0 * pj * inter) / (den * den)


def soft_dice_grad(p: np.ndarray, g: np.ndarray, smooth: float = 0.0) -> np.ndarray:
    """Gradient of soft_dice with respect to every element of p at once."""
    _check_same_shape(p, g)
    den = float(np.sum(p * p) + np.sum(g * g)) + smooth
    num = 2.0 * float(np.sum(p * g)) + smooth
    return (2.0 * g * den - 2.0 * p * num) / (den * den)


def _check_weights(w, channels: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (channels,):
        raise ShapeMismatch(f"need {channels} class weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ShapeMismatch("class weights must be non-negative")
    return w


def categorical_dice_loss(
    p: np.ndarray,
    g: np.ndarray,
    weights=DEFAULT_CLASS_WEIGHTS,
    smooth: float = SMOOTHING,
) -> float:
    """Negative weighted multi-class Dice in [-1, 0].

    -(2 * sum_l w_l sum_n p*g + smooth) / (sum_l w_l sum_n (p+g) + smooth)
    over the trailing class axis. p must be per-voxel normalized
    (softmax output); g one-hot.
    """
    _check_same_shape(p, g)
    w = _check_weights(weights, p.shape[-1])
    sums = p.sum(axis=-1)
    if float(np.abs(sums - 1.0).max()) > 1e-3:
        raise NotNormalized("per-voxel class probabilities must sum to 1")
    flat_p = p.reshape(-1, p.shape[-1])
    flat_g = g.reshape(-1, g.shape[-1])
    inter = float(np.dot(w, (flat_p * flat_g).sum(axis=0)))
    total = float(np.dot(w, (flat_p + flat_g).sum(axis=0)))
    return -(2.0 * inter + smooth) / (total + smooth)


def categorical_dice_grad(
    p: np.ndarray,
    g: np.ndarray,
    weights=DEFAULT_CLASS_WEIGHTS,
    smooth: float = SMOOTHING,
) -> np.ndarray:
    """Gradient of categorical_dice_loss with respect to p."""
    _check_same_shape(p, g)
    w = _check_weights(weights, p.shape[-1])
    flat_p = p.reshape(-1, p.shape[-1])
    flat_g = g.reshape(-1, g.shape[-1])
    inter = float(np.dot(w, (flat_p * flat_g).sum(axis=0)))
    total = float(np.dot(w, (flat_p + flat_g).sum(axis=0)))
    num = 2.0 * inter + smooth
    den = total + smooth
    # d(-num/den)/dp = -(2*w*g*den - num*w) / den^2, broadcast over voxels
    grad = -(2.0 * g * w * den - num * w) / (den * den)
    return grad


def generalized_dice_loss(p: np.ndarray, g: np.ndarray) -> float:
    """Generalized Dice loss with inverse-squared-volume class weights, in [0, 1].

    Classes absent from g get weight 0 instead of an infinite one.
    """
    _check_same_shape(p, g)
    flat_p = p.reshape(-1, p.shape[-1])
    flat_g = g.reshape(-1, g.shape[-1])
    volumes = flat_g.sum(axis=0)
    w = np.zeros_like(volumes)
    present = volumes > 0
    w[present] = 1.0 / (volumes[present] ** 2)
    inter = float(np.dot(w, (flat_p * flat_g).sum(axis=0)))
    total = float(np.dot(w, (flat_p + flat_g).sum(axis=0)))
    if total == 0.0:
        return 0.0
    return 1.0 - 2.0 * inter / total
