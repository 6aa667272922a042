"""Focal loss for binary objectness targets."""

from __future__ import annotations

import numpy as np

from fgpfe.nd import ops
from fgpfe.nd.tensor import Tensor, as_tensor

PROB_EPS = 1e-6


def focal_loss(p: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of -a_t (1 - p_t)^gamma log(p_t) over all elements.

    ``p`` holds probabilities (clamped to [PROB_EPS, 1 - PROB_EPS] before the
    log), ``y`` is a binary {0, 1} array of the same shape.  p_t is p where
    y = 1 and 1 - p otherwise; a_t is alpha where y = 1 and 1 - alpha
    otherwise.  Defaults are the standard alpha = 0.25, gamma = 2.
    """
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ValueError(f"label shape {y.shape} != prediction shape {p.data.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    p = ops.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    # p_t = y * p + (1 - y) * (1 - p); a_t constant in the graph
    pt = ops.add(ops.mul(p, y), ops.mul(ops.sub(1.0, p), 1.0 - y))
    at = alpha * y + (1.0 - alpha) * (1.0 - y)
    term = ops.mul(ops.mul(power_focus(pt, gamma), ops.log(pt)), -at)
    return ops.mean_all(term)


def power_focus(pt: Tensor, gamma: float) -> Tensor:
    """(1 - p_t)^gamma, the modulating factor."""
    return ops.power(ops.sub(1.0, pt), gamma)
