"""Conjugate gradient on the lower-level Hessian, plus a one-step norm probe.

The implicit-differentiation route needs ``H q = grad g`` solved to a
residual tolerance, where ``H`` is the (symmetric positive definite)
lower-level Hessian available only through Hessian-vector products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .budget import Budget
from .core import BilevelProblem, NonFiniteError


@dataclass
class CgResult:
    """Linear-solve output; ``residual_norm <= delta`` on unflagged returns.

    ``residual_norm`` is the recurrence residual CG tracks, and
    ``iterations_used`` excludes the initial residual computation (which
    still costs one Hessian-vector product).
    """

    solution: np.ndarray
    residual_norm: float
    iterations_used: int
    flag: str | None = None  # None | "budget_exhausted" | "max_iter"


def cg_solve(
    problem: BilevelProblem,
    theta: np.ndarray,
    x: np.ndarray,
    rhs: np.ndarray,
    delta: float,
    budget: Budget,
    warm_start: np.ndarray | None = None,
    max_iter: int | None = None,
) -> CgResult:
    """Solve ``lower_hvp(x, theta, q) = rhs`` to ``||residual|| <= delta``.

    Plain CG (no preconditioner).  Budget cost: one Hessian-vector
    product per iteration plus one for the initial residual, charged
    uniformly even when the warm start is zero.  ``max_iter`` defaults to
    the system dimension; hitting it (or the budget) returns the best
    iterate seen, flagged.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    if max_iter is None:
        max_iter = n
    if warm_start is None:
        sol = np.zeros(n)
    else:
        sol = np.array(warm_start, dtype=float, copy=True)

    if budget.exhausted:
        return CgResult(sol, math.inf, 0, "budget_exhausted")
    residual = rhs - problem.lower_hvp(x, theta, sol)
    budget.charge(1)
    res_norm = float(np.linalg.norm(residual))
    if not math.isfinite(res_norm):
        raise NonFiniteError("lower_hvp", "initial residual")
    if res_norm <= delta:
        return CgResult(sol, res_norm, 0, None)

    best_sol = sol.copy()
    best_norm = res_norm
    direction = residual.copy()
    res_sq = float(residual @ residual)
    for iteration in range(1, max_iter + 1):
        if budget.exhausted:
            return CgResult(best_sol, best_norm, iteration - 1, "budget_exhausted")
        h_dir = problem.lower_hvp(x, theta, direction)
        budget.charge(1)
        curvature = float(direction @ h_dir)
        if not math.isfinite(curvature):
            raise NonFiniteError("lower_hvp", f"iteration {iteration}")
        if curvature <= 0:
            # Assumed SPD; a non-positive curvature direction means the
            # problem's declared convexity is wrong.
            raise NonFiniteError("lower_hvp", "non-positive curvature direction")
        step = res_sq / curvature
        sol = sol + step * direction
        residual = residual - step * h_dir
        res_norm = float(np.linalg.norm(residual))
        if not math.isfinite(res_norm):
            raise NonFiniteError("lower_hvp", f"iteration {iteration}")
        if res_norm < best_norm:
            best_norm = res_norm
            best_sol = sol.copy()
        if res_norm <= delta:
            return CgResult(sol, res_norm, iteration, None)
        res_sq_next = float(residual @ residual)
        direction = residual + (res_sq_next / res_sq) * direction
        res_sq = res_sq_next
    return CgResult(best_sol, best_norm, max_iter, "max_iter")


def power_method_step(
    problem: BilevelProblem,
    theta: np.ndarray,
    x: np.ndarray,
    rng: np.random.Generator,
    budget: Budget,
) -> float:
    """One-step power estimate of the mixed second-derivative norm.

    Draws a fresh unit-norm parameter direction w0 from ``rng``, applies
    the forward and transpose mixed products (budget cost 2), and returns
    sqrt(w0' J' J w0) -- the Rayleigh-quotient reading of one power
    iteration, which never exceeds the true operator norm.
    """
    w0 = rng.standard_normal(problem.d)
    nrm = float(np.linalg.norm(w0))
    if nrm == 0.0:  # probability zero, but keep the contract total
        w0 = np.zeros(problem.d)
        w0[0] = 1.0
    else:
        w0 = w0 / nrm
    forward = problem.mixed_jvp(x, theta, w0)
    w1 = problem.mixed_jvp_transpose(x, theta, forward)
    budget.charge(2)
    value = float(w0 @ w1)
    if not math.isfinite(value):
        raise NonFiniteError("mixed_jvp", "power method step")
    return math.sqrt(max(value, 0.0))
