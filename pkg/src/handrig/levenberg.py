"""Damped least-squares (Levenberg-Marquardt) core.

Used by the skeleton fitter and by marker-pose refinement.  The Jacobian is
always central finite differences with caller-supplied per-parameter steps.
Step acceptance can be driven by a caller-supplied cost functional of the
residual vector (the skeleton fitter accepts on its reported loss rather
than the plain sum of squares); accepted iterates strictly decrease that
cost, so the recorded trace is monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERS = "max-iters"
STATUS_STALLED = "stalled"


class InvalidStateError(RuntimeError):
    """Residuals are non-finite at the starting point."""


@dataclass(frozen=True)
class LMOptions:
    max_iterations: int = 60
    initial_damping: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.3
    max_damping: float = 1e12
    cost_tolerance: float = 1e-12
    step_tolerance: float = 1e-12


@dataclass
class LMResult:
    x: np.ndarray
    residual: np.ndarray
    cost: float
    iterations: int
    status: str
    trace: list = field(default_factory=list)   # accepted cost after each iteration
    n_evals: int = 0


def fd_jacobian(residual_fn, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian of residual_fn at x."""
    n = x.size
    cols = []
    for i in range(n):
        h = steps[i]
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        cols.append((residual_fn(xp) - residual_fn(xm)) / (2.0 * h))
    return np.stack(cols, axis=1)


def lm_least_squares(
    residual_fn,
    x0: np.ndarray,
    fd_steps: np.ndarray,
    options: LMOptions = LMOptions(),
    cost_from_residual=None,
) -> LMResult:
    """Minimize cost_from_residual(residual_fn(x)) by damped Gauss-Newton steps.

    The default cost is the sum of squared residuals.  Damping scales the
    diagonal of J^T J (with a floor so zero-gradient parameters do not make
    the system singular).  Returns the best-seen point; status is
    ``stalled`` only when the damped normal equations cannot be solved even
    at maximum damping.
    """
    if cost_from_residual is None:
        cost_from_residual = lambda r: float(r @ r)

    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x), dtype=float)
    n_evals = 1
    if not np.all(np.isfinite(r)):
        raise InvalidStateError("non-finite residuals at the initial point")
    cost = cost_from_residual(r)
    lam = options.initial_damping
    trace = [cost]
    iterations = 0
    status = STATUS_MAX_ITERS

    for _ in range(options.max_iterations):
        J = fd_jacobian(residual_fn, x, fd_steps)
        n_evals += 2 * x.size
        if not np.all(np.isfinite(J)):
            status = STATUS_STALLED
            break
        JTJ = J.T @ J
        g = J.T @ r
        diag = np.diag(JTJ).copy()
        floor = 1e-12 * max(float(diag.max()), 1.0)
        np.maximum(diag, floor, out=diag)

        while True:
            A = JTJ + lam * np.diag(diag)
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                lam *= options.damping_increase
                if lam > options.max_damping:
                    status = STATUS_STALLED
                    break
                continue
            x_new = x + step
            r_new = np.asarray(residual_fn(x_new), dtype=float)
            n_evals += 1
            cost_new = cost_from_residual(r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                step_norm = float(np.linalg.norm(step))
                delta = cost - cost_new
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam * options.damping_decrease, 1e-12)
                iterations += 1
                trace.append(cost)
                if delta < options.cost_tolerance or step_norm < options.step_tolerance:
                    status = STATUS_CONVERGED
                break
            lam *= options.damping_increase
            if lam > options.max_damping:
                # No improving step exists at any damping: local minimum.
                status = STATUS_CONVERGED
                break

        # The inner loop only exits with an accepted step or a terminal status.
        if status != STATUS_MAX_ITERS:
            break

    return LMResult(
        x=x, residual=r, cost=cost, iterations=iterations,
        status=status, trace=trace, n_evals=n_evals,
    )
