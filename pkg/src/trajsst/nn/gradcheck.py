"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.max_rel_error.items()]
        lines.append(f"worst={self.worst:.3e} tol={self.tolerance:.1e} passed={self.passed}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-4,
    names: Sequence[str] | None = None,
    max_coords: int | None = 30,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    Every tensor in ``params`` must be a float64 leaf with ``requires_grad``.
    The step for coordinate theta is 1e-5 * max(1, |theta|). At most
    ``max_coords`` coordinates per tensor are sampled (all when None).
    """
    for p in params:
        if p.dtype != np.float64:
            raise GradCheckError(f"gradient checks require float64, got {p.dtype}")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"non-finite loss {loss.data}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(ga.reshape(-1)[i]), numeric))
        report.max_rel_error[name] = worst
    return report
