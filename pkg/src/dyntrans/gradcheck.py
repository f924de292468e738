"""Central finite-difference check of backward gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if not v <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries sane."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backward gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated after in-place perturbation of each parameter
    entry, so it must be deterministic. ``max_entries`` limits the number of
    checked entries per parameter (the first ones in row-major order).
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size if max_entries is None else min(flat.size, max_entries)
            numeric = np.empty(n)
            for j in range(n):
                orig = flat[j]
                flat[j] = orig + h
                fp = f().item()
                flat[j] = orig - h
                fm = f().item()
                flat[j] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
            err = rel_error(analytic[name].reshape(-1)[:n], numeric, floor)
            report.max_rel_err[name] = float(err.max()) if n else 0.0
    return report
