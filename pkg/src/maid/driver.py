"""Adaptive inexact descent: outer loop, loss envelopes, and line search.

The driver runs gradient descent on the upper-level loss using only
inexact quantities.  Each outer iteration obtains a certified-descent
inexact hypergradient z (see :mod:`maid.hypergrad`) and then backtracks
on the step size using computable envelopes of the true loss:

    upper_bound_U(x, eps) = g(x) + ||grad g(x)|| eps + (L_g / 2) eps**2
    lower_bound_U(x, eps) = g(x) - ||grad g(x)|| eps            (convex g)
                          = g(x) - ||grad g(x)|| eps - (L_g / 2) eps**2

which sandwich f(theta) whenever the lower-level point is eps-accurate.
A trial step alpha is accepted when

    psi(alpha) = U_upper(trial, eps) - U_lower(current, eps)
                 + armijo * alpha * ||z||**2  <= 0,

which implies the true sufficient decrease
``f(theta') - f(theta) <= -armijo * alpha * ||z||**2``.  When the whole
backtracking round fails, the accuracies shrink and the round is retried
with a larger attempt allowance, continuing from the already-shrunk step
size; after an accepted step, accuracies and step size are relaxed again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .budget import Budget
from .core import BilevelProblem
from .hypergrad import HypergradResult, LipschitzEstimates, inexact_gradient
from .lower_solver import LowerState, fista_solve
from .rng import substream


@dataclass
class MaidConfig:
    """All driver hyperparameters.

    ``rho_down``/``rho_up`` shrink and grow the step size,
    ``nu_down``/``nu_up`` shrink and grow the accuracies eps and delta.
    ``eta`` in (0, 1) is the descent-certification margin (the
    hypergradient error bound must stay below ``(1 - eta) ||z||``) and
    ``armijo`` in (0, eta) is the sufficient-decrease coefficient.
    ``max_bt`` is the starting backtracking allowance; it grows by one
    each time a whole round fails.  ``fixed_accuracy`` freezes eps and
    delta (baseline mode: certification and accuracy adaptation are both
    disabled, only the line search runs).  ``grad_tol = 0`` disables the
    gradient-norm stop, reproducing budget-only behavior.
    ``alpha0_policy = "grad_scaled"`` replaces alpha0 with
    sqrt(d) / ||z_0|| once the first hypergradient is available.
    """

    rho_down: float = 0.5
    rho_up: float = 10.0 / 9.0
    nu_down: float = 0.5
    nu_up: float = 1.25
    eta: float = 0.5
    armijo: float = 0.25
    eps0: float = 0.1
    delta0: float = 0.1
    alpha0: float = 0.1
    alpha0_policy: str = "fixed"  # "fixed" | "grad_scaled"
    max_bt: int = 30
    budget_cap: int | None = None
    max_outer: int = 1000
    fixed_accuracy: bool = False
    grad_tol: float = 0.0
    eps_floor: float = 1e-12
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.armijo < self.eta < 1.0):
            raise ValueError("need 0 < armijo < eta < 1")
        if not (0.0 < self.rho_down < 1.0 < self.rho_up):
            raise ValueError("need 0 < rho_down < 1 < rho_up")
        if not (0.0 < self.nu_down < 1.0 < self.nu_up):
            raise ValueError("need 0 < nu_down < 1 < nu_up")
        if min(self.eps0, self.delta0, self.alpha0) <= 0.0:
            raise ValueError("eps0, delta0, alpha0 must be positive")
        if self.max_bt < 1 or self.max_outer < 1:
            raise ValueError("max_bt and max_outer must be >= 1")
        if self.budget_cap is not None and self.budget_cap < 0:
            raise ValueError("budget_cap must be non-negative or None")
        if self.grad_tol < 0 or self.eps_floor <= 0:
            raise ValueError("grad_tol must be >= 0 and eps_floor > 0")
        if self.alpha0_policy not in ("fixed", "grad_scaled"):
            raise ValueError("alpha0_policy must be 'fixed' or 'grad_scaled'")


#: Trace outcomes, in the order they typically appear.
OUTCOMES = ("accepted", "bt_failed_accuracy_shrunk", "stationary_floor", "budget_exhausted")


@dataclass
class IterationRecord:
    """One outer iteration as persisted to a trace.

    ``theta`` is the iterate the step was computed at (pre-update) and
    ``f_lower``/``f_upper`` bracket the true loss there, evaluated at the
    accepted accuracy (before the end-of-iteration growth).  ``theta``,
    ``z`` and ``psi_upper_trial`` are in-memory extras; the CSV schema is
    the fixed column list in :mod:`maid.trace`.
    """

    k: int
    theta: np.ndarray
    g_inexact: float
    f_lower: float
    f_upper: float
    eps: float
    delta: float
    alpha: float
    z_norm: float
    omega: float
    ll_iters: int
    cg_iters: int
    cum_cost: int
    bt_attempts: int
    outcome: str
    z: np.ndarray | None = None
    psi_upper_trial: float | None = None


@dataclass
class LineSearchResult:
    accepted: bool
    alpha: float  # accepted step, or the post-failure value to continue from
    attempts: int
    trial_state: LowerState | None
    trial_upper_bound: float
    ll_cost: int
    flag: str | None = None


@dataclass
class MaidResult:
    theta: np.ndarray
    records: list[IterationRecord]
    stop_reason: str
    budget: Budget
    lipschitz: LipschitzEstimates

    @property
    def iterations(self) -> int:
        return len(self.records)


def upper_bound_U(problem: BilevelProblem, x: np.ndarray, eps: float) -> float:
    """Upper envelope of f at an eps-accurate lower-level point x."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    value = problem.upper_value(x)
    grad_norm = float(np.linalg.norm(problem.upper_grad(x)))
    return value + grad_norm * eps + 0.5 * problem.lip_upper_grad * eps**2


def lower_bound_U(problem: BilevelProblem, x: np.ndarray, eps: float) -> float:
    """Lower envelope of f; tighter by (L_g/2) eps**2 when g is convex."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    value = problem.upper_value(x)
    grad_norm = float(np.linalg.norm(problem.upper_grad(x)))
    bound = value - grad_norm * eps
    if not problem.upper_is_convex:
        bound -= 0.5 * problem.lip_upper_grad * eps**2
    return bound


def line_search(
    problem: BilevelProblem,
    theta: np.ndarray,
    z: np.ndarray,
    eps: float,
    current_state: LowerState,
    alpha_start: float,
    *,
    armijo: float,
    rho_down: float,
    j_max: int,
    budget: Budget,
    max_iter: int = 50_000,
) -> LineSearchResult:
    """Backtrack on psi(alpha) <= 0 starting from ``alpha_start``.

    Tries alpha = alpha_start * rho_down**i for i = 0..j_max-1.  Each
    trial solves the lower level at the trial parameters to the same
    accuracy ``eps``, warm-started from the current lower-level point; all
    trial iterations are charged to the budget.  On failure the returned
    ``alpha`` is the next value below every tried step, so a retry round
    continues the same geometric sweep.
    """
    if alpha_start <= 0:
        raise ValueError("alpha_start must be positive")
    floor = lower_bound_U(problem, current_state.x_tilde, eps)
    z_sq = float(z @ z)
    alpha = float(alpha_start)
    ll_cost = 0
    for attempt in range(1, j_max + 1):
        trial_theta = theta - alpha * z
        mark = budget.spent
        trial = fista_solve(problem, trial_theta, current_state.x_tilde, eps, budget, max_iter)
        ll_cost += budget.spent - mark
        if trial.flag is not None:
            flag = "budget_exhausted" if trial.flag == "budget_exhausted" else "solver_stall"
            return LineSearchResult(False, alpha, attempt, None, math.nan, ll_cost, flag)
        trial_upper = upper_bound_U(problem, trial.x_tilde, eps)
        psi = trial_upper - floor + armijo * alpha * z_sq
        if psi <= 0.0:
            return LineSearchResult(True, alpha, attempt, trial, trial_upper, ll_cost, None)
        alpha *= rho_down
    return LineSearchResult(False, alpha, j_max, None, math.nan, ll_cost, None)


def maid_run(
    problem: BilevelProblem,
    theta0: np.ndarray,
    config: MaidConfig,
) -> MaidResult:
    """Run the full adaptive inexact descent loop from ``theta0``.

    Per outer iteration: compute a certified inexact hypergradient
    (possibly shrinking the accuracies), back-track on the step size, and
    on line-search failure shrink the accuracies and retry with a larger
    allowance.  Accepted steps update theta and relax accuracies and step
    size.  Lower-level and linear-system solutions are warm-started
    across all solves.  Stops on the budget cap, ``max_outer``,
    ``grad_tol``, or the accuracy floor (approximate stationarity); every
    stop is a normal return carrying the trace records.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta0 must be finite")
    if theta.size != problem.d:
        raise ValueError(f"theta0 has length {theta.size}, problem expects {problem.d}")

    budget = Budget(cap=config.budget_cap)
    lips = LipschitzEstimates(upper_grad=float(problem.lip_upper_grad))
    rng_power = substream(config.seed, "power-method")
    rng_hinv = substream(config.seed, "hess-inv-probe")
    rng_jac = substream(config.seed, "mixed-jac-probe")

    eps = config.eps0
    delta = config.delta0
    alpha = config.alpha0
    warm_x = problem.initial_state()
    warm_q: np.ndarray | None = None
    records: list[IterationRecord] = []

    def final_record(k: int, hg: HypergradResult, bt_attempts: int, ll: int, cg: int, outcome: str) -> None:
        """Record a stopping iteration from whatever the result carries."""
        low = hg.lower_state
        if low is not None and low.flag is None:
            g_val = problem.upper_value(low.x_tilde)
            f_lo = lower_bound_U(problem, low.x_tilde, hg.eps_used)
            f_hi = upper_bound_U(problem, low.x_tilde, hg.eps_used)
        else:
            g_val = f_lo = f_hi = math.nan
        z_norm = float(np.linalg.norm(hg.gradient)) if hg.gradient is not None else math.nan
        records.append(
            IterationRecord(
                k=k,
                theta=theta.copy(),
                g_inexact=g_val,
                f_lower=f_lo,
                f_upper=f_hi,
                eps=hg.eps_used,
                delta=hg.delta_used,
                alpha=alpha,
                z_norm=z_norm,
                omega=hg.error_bound,
                ll_iters=ll,
                cg_iters=cg,
                cum_cost=budget.spent,
                bt_attempts=bt_attempts,
                outcome=outcome,
                z=None if hg.gradient is None else hg.gradient.copy(),
            )
        )

    for k in range(config.max_outer):
        allowance = config.max_bt
        bt_attempts = 0
        round_failures = 0
        ll_cost = 0
        cg_cost = 0
        while True:
            hg = inexact_gradient(
                problem,
                theta,
                eps,
                delta,
                eta=config.eta,
                nu_down=config.nu_down,
                lips=lips,
                budget=budget,
                rng_power=rng_power,
                rng_hess_inv=rng_hinv,
                rng_mixed_jac=rng_jac,
                warm_x=warm_x,
                warm_q=warm_q,
                eps_floor=config.eps_floor,
                certify=not config.fixed_accuracy,
            )
            ll_cost += hg.ll_cost
            cg_cost += hg.cg_cost
            eps, delta = hg.eps_used, hg.delta_used
            if hg.lower_state is not None:
                warm_x = hg.lower_state.x_tilde
            if hg.cg_solution is not None:
                warm_q = hg.cg_solution
            if hg.flag == "stationary_or_floor":
                final_record(k, hg, bt_attempts, ll_cost, cg_cost, "stationary_floor")
                return MaidResult(theta, records, "stationary_floor", budget, lips)
            if hg.flag is not None:
                final_record(k, hg, bt_attempts, ll_cost, cg_cost, "budget_exhausted")
                reason = "budget_exhausted" if hg.flag == "budget_exhausted" else "solver_stall"
                return MaidResult(theta, records, reason, budget, lips)

            z = hg.gradient
            z_norm = float(np.linalg.norm(z))
            if k == 0 and bt_attempts == 0 and config.alpha0_policy == "grad_scaled":
                alpha = math.sqrt(problem.d) / max(z_norm, 1e-300)
            if (
                config.grad_tol > 0.0
                and z_norm <= config.grad_tol
                and hg.error_bound <= (1.0 - config.eta) * z_norm
            ):
                final_record(k, hg, bt_attempts, ll_cost, cg_cost, "accepted")
                return MaidResult(theta, records, "grad_tol", budget, lips)

            search = line_search(
                problem,
                theta,
                z,
                eps,
                hg.lower_state,
                alpha,
                armijo=config.armijo,
                rho_down=config.rho_down,
                j_max=allowance,
                budget=budget,
            )
            bt_attempts += search.attempts
            ll_cost += search.ll_cost
            if search.flag is not None:
                final_record(k, hg, bt_attempts, ll_cost, cg_cost, "budget_exhausted")
                reason = "budget_exhausted" if search.flag == "budget_exhausted" else "solver_stall"
                return MaidResult(theta, records, reason, budget, lips)
            if search.accepted:
                break
            round_failures += 1
            alpha = search.alpha  # continue the sweep below the failed steps
            if not config.fixed_accuracy:
                eps *= config.nu_down
                delta *= config.nu_down
                if eps < config.eps_floor:
                    final_record(k, hg, bt_attempts, ll_cost, cg_cost, "stationary_floor")
                    return MaidResult(theta, records, "stationary_floor", budget, lips)
            allowance += 1

        accepted_alpha = search.alpha
        previous_theta = theta.copy()
        theta = theta - accepted_alpha * z
        current = hg.lower_state
        records.append(
            IterationRecord(
                k=k,
                theta=previous_theta,
                g_inexact=problem.upper_value(current.x_tilde),
                f_lower=lower_bound_U(problem, current.x_tilde, eps),
                f_upper=upper_bound_U(problem, current.x_tilde, eps),
                eps=eps,
                delta=delta,
                alpha=accepted_alpha,
                z_norm=z_norm,
                omega=hg.error_bound,
                ll_iters=ll_cost,
                cg_iters=cg_cost,
                cum_cost=budget.spent,
                bt_attempts=bt_attempts,
                outcome="accepted" if round_failures == 0 else "bt_failed_accuracy_shrunk",
                z=z.copy(),
                psi_upper_trial=search.trial_upper_bound,
            )
        )
        warm_x = search.trial_state.x_tilde
        if not config.fixed_accuracy:
            eps *= config.nu_up
            delta *= config.nu_up
        alpha = config.rho_up * accepted_alpha
        if budget.exhausted:
            return MaidResult(theta, records, "budget_exhausted", budget, lips)

    return MaidResult(theta, records, "max_outer", budget, lips)
