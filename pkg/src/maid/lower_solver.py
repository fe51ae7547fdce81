"""Lower-level solver: FISTA for strongly convex smooth objectives.

Solves ``argmin_x h(x, theta)`` to a certified accuracy eps: the returned
point satisfies ``||grad_x h(x, theta)|| <= eps * mu(theta)``, which by
strong convexity puts it within eps of the true minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .budget import Budget
from .core import BilevelProblem, NonFiniteError


@dataclass
class LowerState:
    """An approximate lower-level minimizer with its certificate.

    ``grad_norm <= eps_certified * mu(theta)`` holds on every return: on
    success ``eps_certified`` is the requested accuracy, on a flagged
    return it is the accuracy the best iterate actually achieved.
    ``iterations_used`` counts gradient evaluations (one per iteration,
    the final criterion check included).
    """

    x_tilde: np.ndarray
    eps_certified: float
    grad_norm: float
    iterations_used: int
    flag: str | None = None  # None | "budget_exhausted" | "max_iter"


def fista_solve(
    problem: BilevelProblem,
    theta: np.ndarray,
    warm_start: np.ndarray,
    eps: float,
    budget: Budget,
    max_iter: int = 50_000,
) -> LowerState:
    """Run strongly convex FISTA until ``||grad_x h|| <= eps * mu(theta)``.

    Constant-momentum variant: step 1/L(theta), extrapolation factor
    (1 - sqrt(q)) / (1 + sqrt(q)) with q = mu(theta)/L(theta).  The
    gradient is evaluated at the extrapolated point, which serves both
    the step and the stopping check, so each iteration costs exactly one
    budget unit; the certified point returned is the one the accepted
    gradient was evaluated at.

    Flags instead of raising when resources run out: "budget_exhausted"
    or "max_iter" returns carry the best (smallest gradient norm) iterate
    seen.  No adaptive restarts, so iteration counts are deterministic.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=float)
    x_prev = np.array(warm_start, dtype=float, copy=True)
    if not np.all(np.isfinite(x_prev)):
        raise ValueError("warm_start must be finite")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")

    mu = float(problem.mu(theta))
    lip = float(problem.lip_lower(theta))
    if not (0 < mu <= lip) or not math.isfinite(lip):
        raise ValueError(f"invalid curvature constants mu={mu}, L={lip}")
    tol = eps * mu
    q = mu / lip
    momentum = (1.0 - math.sqrt(q)) / (1.0 + math.sqrt(q))
    step = 1.0 / lip

    y = x_prev.copy()
    best_x = x_prev
    best_gn = math.inf
    evals = 0
    while True:
        if budget.exhausted:
            return LowerState(best_x, best_gn / mu, best_gn, evals, "budget_exhausted")
        grad = problem.lower_grad(y, theta)
        budget.charge(1)
        evals += 1
        gn = float(np.linalg.norm(grad))
        if not math.isfinite(gn):
            raise NonFiniteError("lower_grad", f"after {evals} evaluations")
        if gn < best_gn:
            best_gn = gn
            best_x = y.copy()
        if gn <= tol:
            return LowerState(y, eps, gn, evals, None)
        if evals >= max_iter:
            return LowerState(best_x, best_gn / mu, best_gn, evals, "max_iter")
        x_next = y - step * grad
        y = x_next + momentum * (x_next - x_prev)
        x_prev = x_next
