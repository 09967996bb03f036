"""Central-difference gradient checking for the tensor engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NumericalError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    name: str
    rel_errors: tuple[float, ...]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors) if self.rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.3e}" for e in self.rel_errors)
        return f"[{status}] {self.name}: max rel err per input [{errs}] (tol {self.tol:g})"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    name: str = "f",
    max_entries_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` against central differences.

    Inputs must be float64 (the checking precision).  When
    ``max_entries_per_input`` is set, only that many randomly chosen
    coordinates per input are perturbed — the sampled variant used for
    whole-model checks where exhaustive differencing is infeasible.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 inputs, got {t.data.dtype}")
        if not t.requires_grad:
            raise ConfigError("grad_check inputs must require grad")
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ConfigError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError(f"non-finite output of {name} during gradient check")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    rel_errors = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_input is not None and n > max_entries_per_input:
            idx = rng.choice(n, size=max_entries_per_input, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(*inputs).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite output of {name} during gradient check")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, err)
        rel_errors.append(worst)
    return GradCheckReport(name=name, rel_errors=tuple(rel_errors), tol=tol)
