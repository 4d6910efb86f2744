"""Central finite-difference verification of the backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradReport:
    """Outcome of one grad_check run."""

    max_rel_err: float
    step: float
    per_input: list[float] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               step: float = 1e-5) -> GradReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is |g_a - g_fd| / max(1e-8, |g_fd|); the
    report carries the max over coordinates per input and overall.
    """
    probes = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = f(*probes)
    if out.size != 1:
        raise ValueError(f"grad_check target must be scalar, got shape {out.shape}")
    backward(out)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in probes
    ]

    per_input: list[float] = []
    for i, probe in enumerate(probes):
        flat = probe.data.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            with no_grad():
                hi = f(*probes).item()
            flat[j] = orig - step
            with no_grad():
                lo = f(*probes).item()
            flat[j] = orig
            g_fd = (hi - lo) / (2.0 * step)
            g_an = analytic[i].reshape(-1)[j]
            err = abs(g_an - g_fd) / max(1e-8, abs(g_fd))
            if err > worst:
                worst = err
        per_input.append(worst)
    return GradReport(
        max_rel_err=max(per_input) if per_input else 0.0,
        step=step,
        per_input=per_input,
    )
