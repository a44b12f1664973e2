"""Binary cross-entropy and the misclassification-penalised variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, make_node, scale

PROB_CLAMP = 1e-7
DELTA_SOURCES = ("track_sapt", "fixed")


@dataclass
class PwlConfig:
    alpha: float = 0.87
    delta_source: str = "track_sapt"
    fixed_delta: float = 0.5

    def problems(self) -> list:
        out = []
        if not 0 < self.alpha < 1:
            out.append(f"pwl.alpha must lie in (0, 1), got {self.alpha}")
        if self.delta_source not in DELTA_SOURCES:
            out.append(f"pwl.delta_source must be one of {DELTA_SOURCES}, got {self.delta_source!r}")
        if not 0 <= self.fixed_delta <= 1:
            out.append(f"pwl.fixed_delta must lie in [0, 1], got {self.fixed_delta}")
        return out


def _labels(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} predictions")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    n = y_hat.data.size
    if n == 0:
        raise ValueError("bce_loss on an empty batch")
    y = _labels(y, n).astype(y_hat.dtype).reshape(y_hat.shape)
    p_raw = y_hat.data
    p = np.clip(p_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (p_raw >= PROB_CLAMP) & (p_raw <= 1 - PROB_CLAMP)
    value = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))

    def back(g):
        return (g * inside * (-(y / p) + (1 - y) / (1 - p)) / n,)
    return make_node(np.asarray(value, dtype=y_hat.dtype), (y_hat,), back, "bce_loss")


def fni_fpi(y_hat, y, delta: float) -> tuple:
    """Threshold-relative false-negative / false-positive counts.

    Both comparisons are inclusive, so a score exactly at ``delta`` counts
    against whichever class its label says it belongs to.
    """
    p = np.asarray(y_hat.data if isinstance(y_hat, Tensor) else y_hat, dtype=np.float64).reshape(-1)
    y = _labels(y, len(p))
    fni = int(np.sum((p <= delta) & (y == 1)))
    fpi = int(np.sum((p >= delta) & (y == 0)))
    return fni, fpi


def penalty_factor(fni: int, fpi: int, alpha: float) -> float:
    return 1.0 + alpha * fni + (1.0 - alpha) * fpi


def pwl_loss(y_hat: Tensor, y, cfg: PwlConfig, delta: float) -> Tensor:
    """BCE scaled by 1 + alpha*FNI + (1-alpha)*FPI, the factor held constant for backprop."""
    fni, fpi = fni_fpi(y_hat, y, delta)
    return scale(bce_loss(y_hat, y), penalty_factor(fni, fpi, cfg.alpha))
