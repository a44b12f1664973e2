"""Stochastic adaptive probe thresholding.

Every epoch the validation F1 of each candidate threshold is folded into a
per-candidate exponentially weighted average; every ``gamma_interval``
epochs the candidate with the highest smoothed F1 becomes the operating
threshold for the epochs that follow. Optional validation subsampling
supplies the stochastic element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import f1_at


def default_grid(start=0.05, stop=0.95, step=0.05) -> tuple:
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + k * step, 10) for k in range(n))


@dataclass
class ThresholdScheduler:
    candidate_grid: tuple = field(default_factory=default_grid)
    beta_ewma: float = 0.3
    gamma_interval: int = 10
    current_tau: float = 0.5
    subsample_fraction: float = 1.0
    seed: int = 0
    smoothed_f1: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (epoch, tau) at every commit

    def __post_init__(self):
        self.candidate_grid = tuple(sorted(float(t) for t in self.candidate_grid))
        self._rng = np.random.default_rng(self.seed)

    def problems(self) -> list:
        out = []
        if not self.candidate_grid or any(not 0 <= t <= 1 for t in self.candidate_grid):
            out.append("sapt candidate grid must be a non-empty set of values in [0, 1]")
        if not 0 < self.beta_ewma <= 1:
            out.append(f"sapt.beta_ewma must lie in (0, 1], got {self.beta_ewma}")
        if self.gamma_interval < 1:
            out.append(f"sapt.gamma_interval must be >= 1, got {self.gamma_interval}")
        if not 0 < self.subsample_fraction <= 1:
            out.append(f"sapt.subsample_fraction must lie in (0, 1], got {self.subsample_fraction}")
        return out

    def best_candidate(self) -> float:
        # ties go to the smaller threshold, which favours sensitivity
        return max(self.candidate_grid, key=lambda t: (self.smoothed_f1.get(t, -1.0), -t))


def sapt_update(scheduler: ThresholdScheduler, validation_scores, validation_labels,
                epoch: int) -> ThresholdScheduler:
    """Fold one epoch of validation scores in; commit a new tau when ``epoch % gamma == 0``."""
    scores = np.asarray(validation_scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(validation_labels).reshape(-1)
    if len(scores) == 0 or len(scores) != len(labels):
        raise ValueError("validation scores and labels must be non-empty and equally long")
    if len(np.unique(labels)) < 2:
        raise ValueError("validation set contains a single class; F1 is undefined across the grid")

    if scheduler.subsample_fraction < 1.0:
        k = max(2, int(round(scheduler.subsample_fraction * len(scores))))
        idx = np.sort(scheduler._rng.choice(len(scores), size=k, replace=False))
        if len(np.unique(labels[idx])) == 2:
            scores, labels = scores[idx], labels[idx]

    beta = scheduler.beta_ewma
    for tau in scheduler.candidate_grid:
        f1 = f1_at(scores, labels, tau)
        prev = scheduler.smoothed_f1.get(tau)
        scheduler.smoothed_f1[tau] = f1 if prev is None else beta * f1 + (1 - beta) * prev

    if epoch > 0 and epoch % scheduler.gamma_interval == 0:
        scheduler.current_tau = scheduler.best_candidate()
        scheduler.history.append((epoch, scheduler.current_tau))
    return scheduler
