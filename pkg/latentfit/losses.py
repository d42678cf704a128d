from __future__ import annotations

import numpy as np

from latentfit import tape as tp
from latentfit.tape import Tensor, TensorLike


def clamp(d: np.ndarray | float, delta: float) -> np.ndarray:
    return np.clip(d, -delta, delta)


def clamped_l1(pred: TensorLike, target: TensorLike, delta: float = 0.1) -> Tensor:
    r"""
    Truncated :math:`\ell_1` loss :math:`|\mathrm{clamp}(\tilde d, \delta) - \mathrm{clamp}(d, \delta)|`,
    elementwise.
    """
    if not delta > 0:
        raise ValueError(f"Truncation must be positive, got {delta}.")
    pred, target = tp.as_tensor(pred), tp.as_tensor(target)
    if not (np.all(np.isfinite(pred.value)) and np.all(np.isfinite(target.value))):
        raise ValueError("clamped_l1 inputs must be finite.")
    return tp.abs_(tp.clamp(pred, -delta, delta) - tp.clamp(target, -delta, delta))


def code_regularizer(code: TensorLike, sigma: float) -> Tensor:
    """Zero-mean Gaussian prior on a latent code, ``||code||^2 / sigma^2``."""
    if not sigma > 0:
        raise ValueError(f"Prior scale must be positive, got {sigma}.")
    return tp.sum_(tp.square(code)) / (sigma * sigma)


def flow_distance(pred: TensorLike, target: TensorLike) -> Tensor:
    """Per-point Euclidean distance between predicted and target flows."""
    return tp.row_norm(tp.as_tensor(pred) - target)
