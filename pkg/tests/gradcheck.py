"""
Central finite differences for checking analytic gradients in 64-bit.
"""

from typing import Callable

import numpy as np

STEP = 1e-5
# Below this magnitude an entry is compared in absolute terms; finite differences at STEP
# carry roughly 1e-10 of rounding noise.
FLOOR = 1e-5


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    '''
    Gradient of the scalar `f()` with respect to `x`, perturbing `x` in place one entry at a time.
    '''
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + step
        plus = f()
        x[idx] = original - step
        minus = f()
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    '''max over entries of |a - n| / max(|a|, |n|, floor).'''
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shapes differ: {analytic.shape} and {numeric.shape}")
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
