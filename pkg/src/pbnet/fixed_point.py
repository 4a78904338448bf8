"""Fixed-point iteration for contraction maps, with convergence diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DivergenceError(FloatingPointError):
    """A fixed-point iterate became non-finite."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"fixed-point iterate became non-finite at iteration {iteration}")


@dataclass(frozen=True)
class FixedPointConfig:
    """``max_iters`` is the iteration budget; ``tolerance`` > 0 enables early exit
    once the update norm drops below it.  The default runs exactly ``max_iters``."""

    max_iters: int = 30
    tolerance: float = 0.0
    record_trace: bool = False

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be >= 0")


@dataclass(frozen=True)
class FixedPointResult:
    solution: np.ndarray
    iterations_used: int
    final_update_norm: float
    trace: tuple[float, ...] | None = None


def fixed_point_solve(
    fmap: Callable[[np.ndarray], np.ndarray],
    z,
    cfg: FixedPointConfig = FixedPointConfig(),
) -> FixedPointResult:
    """Iterate ``x <- fmap(x)`` starting from ``x = z``.

    Raises :class:`DivergenceError` naming the (1-based) iteration at which
    a non-finite value first appears.
    """
    x = np.array(z, dtype=np.complex128 if np.iscomplexobj(z) else np.float64, copy=True)
    trace = [] if cfg.record_trace else None
    update = 0.0
    used = 0
    for t in range(int(cfg.max_iters)):
        x_new = fmap(x)
        used = t + 1
        if not np.all(np.isfinite(x_new)):
            raise DivergenceError(used)
        update = float(np.linalg.norm(np.ravel(x_new - x)))
        x = x_new
        if trace is not None:
            trace.append(update)
        if cfg.tolerance > 0 and update < cfg.tolerance:
            break
    return FixedPointResult(x, used, update, tuple(trace) if trace is not None else None)


@dataclass(frozen=True)
class ContractionVerdict:
    accepted: bool
    bound: float
    margin: float

    def __bool__(self) -> bool:
        return self.accepted


def check_contraction(lipschitz_bound: float) -> ContractionVerdict:
    """Accept iff the Lipschitz bound is strictly below one."""
    bound = float(lipschitz_bound)
    ok = bool(np.isfinite(bound) and 0.0 <= bound < 1.0)
    return ContractionVerdict(ok, bound, 1.0 - bound)
