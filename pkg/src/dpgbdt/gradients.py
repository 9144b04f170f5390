"""Loss derivatives and query sensitivities for binary classification.

All boosting statistics reduce to per-record (g, h) pairs. Three update modes
share the same aggregation query:

  averaging: g = 1{y = 1}, h = 1 (class counts, random-forest style)
  gradient:  g = sigmoid(raw) - y, h = 1 (first-order boosting)
  newton:    g = sigmoid(raw) - y, h = p (1 - p) (second-order boosting)

Binary cross-entropy keeps these analytically bounded, which fixes the L2
sensitivity of the (sum g, sum h) query without clipping.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import NamedTuple

import numpy as np

__all__ = [
    "UpdateMode",
    "GradientPair",
    "sigmoid",
    "bce_gradients",
    "mode_gradients",
    "query_sensitivity",
    "clip_gradient_pair",
]


class UpdateMode(Enum):
    AVERAGING = "averaging"
    GRADIENT = "gradient"
    NEWTON = "newton"


class GradientPair(NamedTuple):
    g: float | np.ndarray
    h: float | np.ndarray


# L2 sensitivity of releasing one record's (g, h) contribution.
# newton: |g| <= 1 and h <= 1/4, so ||(g, h)||_2 <= sqrt(1 + 1/16) = sqrt(17)/4.
# averaging and gradient: |g| <= 1 and h = 1, so ||(g, h)||_2 <= sqrt(2).
SENSITIVITY_NEWTON = math.sqrt(17.0) / 4.0
SENSITIVITY_COUNTING = math.sqrt(2.0)


def sigmoid(x):
    """Numerically stable logistic function; preserves scalar/array shape."""
    arr = np.asarray(x, dtype=float)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0):
        return float(out)
    return out


def bce_gradients(label, raw_score) -> GradientPair:
    """First and second derivatives of binary cross-entropy at a raw score.

    With p = sigmoid(raw_score): g = p - label, h = p (1 - p). Accepts scalars
    or aligned arrays.
    """
    p = sigmoid(raw_score)
    label = np.asarray(label, dtype=float) if not np.isscalar(label) else float(label)
    g = p - label
    h = p * (1.0 - p)
    return GradientPair(g, h)


def mode_gradients(label, raw_score, mode: UpdateMode) -> GradientPair:
    """Per-record statistics released for the given update mode."""
    if mode is UpdateMode.AVERAGING:
        lab = np.asarray(label, dtype=float)
        g = (lab == 1.0).astype(float)
        h = np.ones_like(g)
        if np.isscalar(label):
            return GradientPair(float(g), 1.0)
        return GradientPair(g, h)
    if mode is UpdateMode.GRADIENT:
        g, _ = bce_gradients(label, raw_score)
        h = 1.0 if np.isscalar(raw_score) else np.ones_like(np.asarray(raw_score, dtype=float))
        return GradientPair(g, h)
    if mode is UpdateMode.NEWTON:
        return bce_gradients(label, raw_score)
    raise ValueError(f"unknown update mode: {mode!r}")


def query_sensitivity(mode: UpdateMode) -> float:
    """L2 sensitivity of the aggregation query under the given update mode."""
    if mode is UpdateMode.NEWTON:
        return SENSITIVITY_NEWTON
    if mode in (UpdateMode.AVERAGING, UpdateMode.GRADIENT):
        return SENSITIVITY_COUNTING
    raise ValueError(f"unknown update mode: {mode!r}")


def clip_gradient_pair(pair: GradientPair, max_norm: float) -> GradientPair:
    """Rescale a (g, h) pair into an L2 ball of radius ``max_norm``.

    Hook for losses with unbounded derivatives (e.g. squared error in
    regression). Classification losses here are bounded analytically, so the
    trainer never calls this; it is exposed for custom-loss extensions.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.hypot(float(pair.g), float(pair.h))
    if norm <= max_norm or norm == 0.0:
        return pair
    scale = max_norm / norm
    return GradientPair(pair.g * scale, pair.h * scale)
