"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward

# below this magnitude gradients are compared in absolute terms
REL_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    params: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def worst(self, k: int = 3) -> list:
        return sorted(self.params, key=lambda p: -p.max_rel_error)[:k]

    def summary(self) -> str:
        lines = [f"gradcheck tol={self.tolerance:g} -> {'PASS' if self.passed else 'FAIL'}"]
        for p in self.worst(len(self.params)):
            lines.append(f"  {p.name:<20s} max_rel={p.max_rel_error:.3e} at {p.worst_index} "
                         f"(analytic {p.analytic:.6g}, numeric {p.numeric:.6g})")
        return "\n".join(lines)


def relative_error(a, n, floor=REL_FLOOR):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(builder, params: dict, tolerance: float = 1e-4, h: float = 1e-5,
                      max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``builder()`` must rebuild the scalar loss from the tensors in ``params``
    (a name -> Tensor mapping) on every call. Parameters should be float64;
    ``max_entries`` subsamples large tensors.
    """
    for t in params.values():
        t.grad = None
    loss = builder()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(builder().data)
            flat[i] = orig - h
            f_minus = float(builder().data)
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2 * h)
        a = analytic[name].reshape(-1)[idx]
        err = relative_error(a, numeric)
        k = int(np.argmax(err)) if len(err) else 0
        worst = np.unravel_index(idx[k], t.shape) if len(err) else ()
        report.params.append(ParamCheck(
            name=name, max_rel_error=float(err[k]) if len(err) else 0.0,
            worst_index=tuple(int(v) for v in worst),
            analytic=float(a[k]) if len(err) else 0.0,
            numeric=float(numeric[k]) if len(err) else 0.0,
            passed=bool(len(err) == 0 or err[k] <= tolerance)))
    return report
