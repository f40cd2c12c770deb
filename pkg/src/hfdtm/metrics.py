"""Error metrics in vehicle units."""

from __future__ import annotations

import numpy as np


def _residuals(predictions, targets) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: predictions {p.shape} vs targets {t.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one value")
    return t - p


def mae(predictions, targets) -> float:
    return float(np.mean(np.abs(_residuals(predictions, targets))))


def rmse(predictions, targets) -> float:
    r = _residuals(predictions, targets)
    return float(np.sqrt(np.mean(r * r)))
