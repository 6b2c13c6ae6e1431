"""
Line Search Descent
Projected gradient descent with Armijo backtracking, shared by GP
hyperparameter training and policy optimization
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import DescentError, ShiftTuneError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DescentOptions:
    max_iter: int = 200
    grad_tol: float = 1e-6
    rel_tol: float = 1e-8
    armijo: float = 1e-4
    shrink: float = 0.5
    max_shrinks: int = 30


@dataclass
class DescentResult:
    x: np.ndarray
    value: float
    values: list = field(default_factory=list)
    iterations: int = 0
    stalled: bool = False
    reason: str = ""


def _safe_value(fun, x):
    """Objective value, or inf when the trial point cannot be evaluated"""
    try:
        value = float(fun(x))
    except (ShiftTuneError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.debug("Trial point rejected: %s", exc)
        return np.inf
    return value if np.isfinite(value) else np.inf


def descend(fun, grad, x0, options=None, lower=None, upper=None):
    """
    Minimize fun over the box [lower, upper]

    Args:
        fun: Objective, vector -> float
        grad: Gradient, vector -> vector
        x0: Starting point (projected onto the box first)
        options: DescentOptions
        lower, upper: Optional bound vectors (use -inf / inf for free entries)

    Returns:
        DescentResult; `values` is non-increasing by construction
    """
    options = options or DescentOptions()
    x = np.asarray(x0, dtype=float).copy()
    lower = np.full_like(x, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full_like(x, np.inf) if upper is None else np.asarray(upper, dtype=float)

    def project(v):
        return np.clip(v, lower, upper)

    x = project(x)
    value = float(fun(x))
    if not np.isfinite(value):
        raise DescentError(f"objective is not finite at the starting point ({value})")
    gradient = np.asarray(grad(x), dtype=float)
    values = [value]
    step = min(1.0, 1.0 / max(np.linalg.norm(gradient), 1e-300))

    result = DescentResult(x=x, value=value, values=values, reason="max_iter")
    for iteration in range(options.max_iter):
        projected = x - project(x - gradient)
        if np.linalg.norm(projected) < options.grad_tol:
            result.reason = "gradient"
            break

        # Backtracking (Armijo)
        t = step
        accepted = False
        for _ in range(options.max_shrinks):
            candidate = project(x - t * gradient)
            move = candidate - x
            candidate_value = _safe_value(fun, candidate)
            if candidate_value <= value + options.armijo * float(gradient @ move):
                accepted = True
                break
            t *= options.shrink
        if not accepted:
            result.stalled = True
            result.reason = "line search stalled"
            break

        new_gradient = np.asarray(grad(candidate), dtype=float)
        s = candidate - x
        y = new_gradient - gradient
        improvement = value - candidate_value
        x, value, gradient = candidate, candidate_value, new_gradient
        values.append(value)
        result.iterations = iteration + 1
        logger.debug("descent iter %d: f=%.10g step=%.3g", iteration + 1, value, t)

        if improvement <= options.rel_tol * max(abs(value), 1e-300):
            result.reason = "relative improvement"
            break

        # Barzilai-Borwein step for the next trial
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else min(1.0, 1.0 / max(np.linalg.norm(gradient), 1e-300))

    result.x = x
    result.value = value
    return result
