"""Inexact hypergradients with a computable a posteriori error bound.

The hypergradient of ``f(theta) = g(xhat(theta))`` is approximated by
solving the lower level to accuracy eps, solving the Hessian system
``H q = grad g`` to residual delta, and setting ``z = -J' q`` where ``J``
is the mixed second derivative.  The error ``||z - grad f(theta)||`` then
admits the computable bound

    omega = c * eps + (||J|| / mu) * delta + (L_J * L_g / mu) * eps**2,
    c = L_g * ||J|| / mu + L_Hinv * ||grad g|| * ||J|| + L_J * ||grad g|| / mu,

with L_g the upper-gradient Lipschitz constant and L_Hinv, L_J the
Lipschitz constants (in x) of the inverse Hessian and of J.  ``||J||`` is
estimated by a one-step power method and L_Hinv, L_J by cheap probes whose
running maxima are kept in :class:`LipschitzEstimates`.

:func:`inexact_gradient` shrinks (eps, delta) geometrically until
``omega <= (1 - eta) * ||z||``, which certifies that ``-z`` is a descent
direction with ``z' grad f >= eta * ||z||**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .budget import Budget
from .core import BilevelProblem, NonFiniteError
from .linear_solver import cg_solve, power_method_step
from .lower_solver import LowerState, fista_solve


@dataclass
class LipschitzEstimates:
    """Running maxima of the estimated Lipschitz constants.

    ``upper_grad`` is declared by the problem; ``hess_inv`` and
    ``mixed_jac`` start at 0 and only ever increase as probes observe new
    values across a solver run.
    """

    upper_grad: float
    hess_inv: float = 0.0
    mixed_jac: float = 0.0

    def observe_hess_inv(self, value: float) -> None:
        if math.isfinite(value):
            self.hess_inv = max(self.hess_inv, value)

    def observe_mixed_jac(self, value: float) -> None:
        if math.isfinite(value):
            self.mixed_jac = max(self.mixed_jac, value)


@dataclass
class HypergradResult:
    """An inexact hypergradient, the accuracies that produced it, and its bound.

    On unflagged returns ``error_bound <= (1 - eta) * ||gradient||`` holds,
    ``gradient`` is exactly ``-mixed_jvp_transpose(x_tilde, theta, q)`` for
    the returned lower state and CG solution ``q`` (kept for warm
    starting), and ``eps_used``/``delta_used`` are the accuracies the
    accepted gradient was computed at.
    """

    gradient: np.ndarray
    eps_used: float
    delta_used: float
    error_bound: float
    lower_state: LowerState | None
    cg_solution: np.ndarray | None
    mixed_norm: float = 0.0
    flag: str | None = None  # None | "stationary_or_floor" | "budget_exhausted" | "solver_stall"
    shrinks: int = 0
    ll_cost: int = 0
    cg_cost: int = 0
    extra_cost: int = 0


def error_bound(
    problem: BilevelProblem,
    theta: np.ndarray,
    x_tilde: np.ndarray,
    eps: float,
    delta: float,
    mixed_norm: float,
    lips: LipschitzEstimates,
    grad_g: np.ndarray | None = None,
) -> float:
    """Computable bound on the hypergradient error at accuracies (eps, delta).

    ``mixed_norm`` is the estimate of the mixed second-derivative norm;
    it is used everywhere that norm appears in the bound.
    """
    mu = float(problem.mu(theta))
    if mu <= 0:
        raise ValueError(f"mu(theta) must be positive, got {mu}")
    if grad_g is None:
        grad_g = problem.upper_grad(x_tilde)
    grad_norm = float(np.linalg.norm(grad_g))
    c = (
        lips.upper_grad * mixed_norm / mu
        + lips.hess_inv * grad_norm * mixed_norm
        + lips.mixed_jac * grad_norm / mu
    )
    return c * eps + (mixed_norm / mu) * delta + (lips.mixed_jac * lips.upper_grad / mu) * eps**2


def estimate_hess_inv_lipschitz(
    problem: BilevelProblem,
    theta: np.ndarray,
    x_tilde: np.ndarray,
    q: np.ndarray,
    grad_g: np.ndarray,
    delta: float,
    rng: np.random.Generator,
    budget: Budget,
) -> float:
    """Probe the inverse-Hessian Lipschitz constant.

    Perturbs the right-hand side with standard-normal noise, reuses the
    already-computed solution ``q`` of ``H q = grad g`` as warm start for
    one extra linear solve at the same tolerance, and returns the
    difference quotient ``||q - q_u|| / ||grad_g - u||``.  The extra
    solve's Hessian-vector products are charged to the budget.
    """
    noise = rng.standard_normal(grad_g.size)
    if float(np.linalg.norm(noise)) == 0.0:
        noise = rng.standard_normal(grad_g.size)
        if float(np.linalg.norm(noise)) == 0.0:
            raise ValueError("degenerate perturbation: zero noise drawn twice")
    perturbed = grad_g + noise
    solved = cg_solve(problem, theta, x_tilde, perturbed, delta, budget, warm_start=q)
    return float(np.linalg.norm(q - solved.solution) / np.linalg.norm(noise))


def estimate_mixed_jac_lipschitz(
    problem: BilevelProblem,
    theta: np.ndarray,
    x_tilde: np.ndarray,
    q: np.ndarray,
    rng: np.random.Generator,
    budget: Budget,
    base_product: np.ndarray | None = None,
) -> float:
    """Probe the Lipschitz constant (in x) of the mixed second derivative.

    Finite-difference quotient of the transpose product along a random
    state perturbation of size ``0.01 * (1 + ||x_tilde||)``, normalized by
    ``max(||q||, 1)``.  ``base_product`` is the already-available
    ``mixed_jvp_transpose(x_tilde, theta, q)`` (i.e. ``-z``); only the
    perturbed product is charged when it is supplied.
    """
    if base_product is None:
        base_product = problem.mixed_jvp_transpose(x_tilde, theta, q)
        budget.charge(1)
    sigma = 0.01 * (1.0 + float(np.linalg.norm(x_tilde)))
    offset = sigma * rng.standard_normal(x_tilde.size)
    x_perturbed = x_tilde + offset
    other = problem.mixed_jvp_transpose(x_perturbed, theta, q)
    budget.charge(1)
    distance = float(np.linalg.norm(offset))
    if distance == 0.0:
        return 0.0
    scale = max(float(np.linalg.norm(q)), 1.0)
    return float(np.linalg.norm(base_product - other)) / (distance * scale)


def inexact_gradient(
    problem: BilevelProblem,
    theta: np.ndarray,
    eps: float,
    delta: float,
    *,
    eta: float,
    nu_down: float,
    lips: LipschitzEstimates,
    budget: Budget,
    rng_power: np.random.Generator,
    rng_hess_inv: np.random.Generator | None = None,
    rng_mixed_jac: np.random.Generator | None = None,
    warm_x: np.ndarray | None = None,
    warm_q: np.ndarray | None = None,
    eps_floor: float = 1e-12,
    certify: bool = True,
    run_estimators: bool = True,
) -> HypergradResult:
    """Compute a certified-descent inexact hypergradient at ``theta``.

    Loops: solve the lower level at eps, solve the Hessian system at
    delta, assemble z, evaluate the error bound, and accept once
    ``omega <= (1 - eta) * ||z||`` with ``||z|| > 0``; otherwise shrink
    both accuracies by ``nu_down`` and retry (warm-starting from the
    previous attempt).  The Lipschitz probes run once per call, on the
    first attempt; the power-method norm estimate runs on every attempt.

    Shrinking eps below ``eps_floor`` returns the last (z, omega) flagged
    ``"stationary_or_floor"`` -- with a nonzero true gradient the loop
    provably exits before any floor, so reaching it signals approximate
    stationarity (or an unreachable floor).  ``certify=False`` performs a
    single pass with no shrinking (fixed-accuracy baseline mode).
    """
    if not (0.0 < eta < 1.0):
        raise ValueError("eta must be in (0, 1)")
    if not (0.0 < nu_down < 1.0):
        raise ValueError("nu_down must be in (0, 1)")
    if eps <= 0 or delta <= 0:
        raise ValueError("eps and delta must be positive")
    theta = np.asarray(theta, dtype=float)
    if warm_x is None:
        warm_x = problem.initial_state()
    if rng_hess_inv is None:
        rng_hess_inv = rng_power
    if rng_mixed_jac is None:
        rng_mixed_jac = rng_power

    ll_cost = cg_cost = extra_cost = 0
    shrinks = 0

    def partial(flag: str, low=None, cg=None, z=None, omega=math.inf, mixed=0.0) -> HypergradResult:
        return HypergradResult(
            gradient=z if z is not None else np.zeros(problem.d),
            eps_used=eps,
            delta_used=delta,
            error_bound=omega,
            lower_state=low,
            cg_solution=None if cg is None else cg.solution,
            mixed_norm=mixed,
            flag=flag,
            shrinks=shrinks,
            ll_cost=ll_cost,
            cg_cost=cg_cost,
            extra_cost=extra_cost,
        )

    while True:
        mark = budget.spent
        low = fista_solve(problem, theta, warm_x, eps, budget)
        ll_cost += budget.spent - mark
        if low.flag is not None:
            flag = "budget_exhausted" if low.flag == "budget_exhausted" else "solver_stall"
            return partial(flag, low=low)
        warm_x = low.x_tilde

        grad_g = problem.upper_grad(low.x_tilde)
        mark = budget.spent
        cg = cg_solve(problem, theta, low.x_tilde, grad_g, delta, budget, warm_start=warm_q)
        cg_cost += budget.spent - mark
        if cg.flag is not None:
            flag = "budget_exhausted" if cg.flag == "budget_exhausted" else "solver_stall"
            return partial(flag, low=low, cg=cg)
        warm_q = cg.solution

        z = -problem.mixed_jvp_transpose(low.x_tilde, theta, cg.solution)
        z_norm = float(np.linalg.norm(z))
        if not math.isfinite(z_norm):
            raise NonFiniteError("mixed_jvp_transpose", "hypergradient assembly")

        mark = budget.spent
        mixed_norm = power_method_step(problem, theta, low.x_tilde, rng_power, budget)
        extra_cost += budget.spent - mark
        if run_estimators and shrinks == 0:
            mark = budget.spent
            lips.observe_hess_inv(
                estimate_hess_inv_lipschitz(
                    problem, theta, low.x_tilde, cg.solution, grad_g, delta, rng_hess_inv, budget
                )
            )
            cg_cost += budget.spent - mark
            mark = budget.spent
            lips.observe_mixed_jac(
                estimate_mixed_jac_lipschitz(
                    problem, theta, low.x_tilde, cg.solution, rng_mixed_jac, budget, base_product=-z
                )
            )
            extra_cost += budget.spent - mark

        omega = error_bound(problem, theta, low.x_tilde, eps, delta, mixed_norm, lips, grad_g=grad_g)
        accepted = z_norm > 0.0 and omega <= (1.0 - eta) * z_norm
        if accepted or not certify:
            return HypergradResult(
                gradient=z,
                eps_used=eps,
                delta_used=delta,
                error_bound=omega,
                lower_state=low,
                cg_solution=cg.solution,
                mixed_norm=mixed_norm,
                flag=None,
                shrinks=shrinks,
                ll_cost=ll_cost,
                cg_cost=cg_cost,
                extra_cost=extra_cost,
            )
        if budget.exhausted:
            return partial("budget_exhausted", low=low, cg=cg, z=z, omega=omega, mixed=mixed_norm)
        if nu_down * eps < eps_floor:
            return partial("stationary_or_floor", low=low, cg=cg, z=z, omega=omega, mixed=mixed_norm)
        eps *= nu_down
        delta *= nu_down
        shrinks += 1
