"""Problem interface and numerical vocabulary shared by all solvers.

A bilevel problem couples an upper-level loss ``g`` with a lower-level
objective ``h(x, theta)`` that is strongly convex in ``x``:

    min_theta  f(theta) := g(xhat(theta)),
    xhat(theta) := argmin_x h(x, theta).

Conventions used throughout the package:

* States ``x`` (length ``n``) and parameters ``theta`` (length ``d``) are
  1-D float64 numpy arrays with finite entries.
* Each problem declares curvature constants: ``mu(theta) > 0`` (strong
  convexity of ``h`` in ``x``), ``lip_lower(theta) >= mu(theta)``
  (smoothness of ``h``), and ``lip_upper_grad`` (Lipschitz constant of
  the upper-loss gradient).  Solvers trust these values; they power both
  the lower-level stopping certificate ``||grad_x h|| <= eps * mu`` and
  the computable loss envelopes used by the line search.
* Derivatives are hand-coded per problem (no autodiff dependency).
  :func:`check_derivatives` compares them against central finite
  differences, and :func:`check_curvature` probes the declared constants
  with Rayleigh quotients.

Problem objects are immutable after construction and all operations are
pure functions of their arguments, so they are safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteError(RuntimeError):
    """A numerical operation produced NaN or Inf.

    The message names the operation so failures can be traced back to the
    problem callback that misbehaved.
    """

    def __init__(self, operation: str, detail: str = ""):
        self.operation = operation
        msg = f"non-finite value in {operation}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BilevelProblem:
    """Interface every concrete bilevel problem implements.

    Attributes
    ----------
    n, d:
        State and parameter dimensions.
    upper_is_convex:
        Selects the tighter lower envelope (and hence the convex line
        search variant) when the upper loss is convex.
    lip_upper_grad:
        Lipschitz constant of the upper-loss gradient.
    """

    n: int
    d: int
    upper_is_convex: bool = False
    lip_upper_grad: float

    @property
    def dims(self) -> tuple[int, int]:
        return (self.n, self.d)

    # -- lower level -------------------------------------------------
    def lower_value(self, x: np.ndarray, theta: np.ndarray) -> float:
        raise NotImplementedError

    def lower_grad(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lower_hvp(self, x: np.ndarray, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Hessian-vector product of the lower objective at ``(x, theta)``."""
        raise NotImplementedError

    def mixed_jvp(self, x: np.ndarray, theta: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Mixed second derivative applied to a parameter direction ``w``."""
        raise NotImplementedError

    def mixed_jvp_transpose(self, x: np.ndarray, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`mixed_jvp`, mapping a state vector to parameters."""
        raise NotImplementedError

    # -- upper level -------------------------------------------------
    def upper_value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def upper_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- declared constants -------------------------------------------
    def mu(self, theta: np.ndarray) -> float:
        """Strong-convexity constant of the lower objective, > 0."""
        raise NotImplementedError

    def lip_lower(self, theta: np.ndarray) -> float:
        """Smoothness constant of the lower objective, >= mu(theta)."""
        raise NotImplementedError

    def initial_state(self) -> np.ndarray:
        """Default cold-start point for the lower-level solver."""
        return np.zeros(self.n)


class ClosedFormOracle:
    """Optional mixin for problems with closed-form reference solutions.

    Only used for validation: solvers never call these, but tests can hold
    the inexact machinery against exact values.
    """

    def exact_lower_solution(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def exact_upper_value(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def exact_hypergradient(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class DerivativeReport:
    """Max relative discrepancies from :func:`check_derivatives`."""

    lower_grad_error: float
    lower_hvp_error: float
    mixed_adjoint_error: float
    upper_grad_error: float

    def as_dict(self) -> dict[str, float]:
        return {
            "lower_grad": self.lower_grad_error,
            "lower_hvp": self.lower_hvp_error,
            "mixed_adjoint": self.mixed_adjoint_error,
            "upper_grad": self.upper_grad_error,
        }

    def max_error(self) -> float:
        return max(self.as_dict().values())

    def worst(self) -> tuple[str, float]:
        name = max(self.as_dict(), key=lambda k: self.as_dict()[k])
        return name, self.as_dict()[name]


def fd_step(point: np.ndarray) -> float:
    """Central-difference step scaled to the point, 1e-6 * (1 + ||point||_inf)."""
    scale = float(np.max(np.abs(point))) if point.size else 0.0
    return 1e-6 * (1.0 + scale)


def _unit(v: np.ndarray) -> np.ndarray:
    nrm = float(np.linalg.norm(v))
    if nrm == 0.0:
        v = v.copy()
        v[0] = 1.0
        return v
    return v / nrm

def _require_finite(value, operation: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(operation)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def check_derivatives(
    problem: BilevelProblem,
    theta: np.ndarray,
    x: np.ndarray,
    samples: int = 10,
    seed: int = 0,
) -> DerivativeReport:
    """Compare hand-coded derivatives against central finite differences.

    Probes ``samples`` random unit directions (deterministic given
    ``seed``) and reports the max relative discrepancy for: the lower
    gradient vs differences of the lower value, the Hessian-vector product
    vs differences of the lower gradient, the adjointness of the mixed
    second-derivative pair, and the upper gradient vs differences of the
    upper value.

    Raises :class:`NonFiniteError` naming the operation if any probe
    evaluates to NaN/Inf.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    _require_finite(theta, "theta")
    _require_finite(x, "x")
    rng = np.random.default_rng(seed)
    t = fd_step(x)

    grad_err = hvp_err = adj_err = upper_err = 0.0
    for _ in range(samples):
        u = _unit(rng.standard_normal(problem.n))
        v = _unit(rng.standard_normal(problem.n))
        w = _unit(rng.standard_normal(problem.d))

        # (a) lower_grad vs central differences of lower_value
        f_plus = problem.lower_value(x + t * u, theta)
        f_minus = problem.lower_value(x - t * u, theta)
        _require_finite([f_plus, f_minus], "lower_value")
        fd = (f_plus - f_minus) / (2.0 * t)
        an = float(problem.lower_grad(x, theta) @ u)
        _require_finite(an, "lower_grad")
        grad_err = max(grad_err, _rel(fd, an))

        # (b) lower_hvp vs central differences of lower_grad
        g_plus = problem.lower_grad(x + t * u, theta)
        g_minus = problem.lower_grad(x - t * u, theta)
        _require_finite(g_plus, "lower_grad")
        _require_finite(g_minus, "lower_grad")
        fd_vec = (g_plus - g_minus) / (2.0 * t)
        hv = problem.lower_hvp(x, theta, u)
        _require_finite(hv, "lower_hvp")
        denom = max(float(np.linalg.norm(hv)), float(np.linalg.norm(fd_vec)), 1e-300)
        hvp_err = max(hvp_err, float(np.linalg.norm(fd_vec - hv)) / denom)

        # (c) mixed_jvp / mixed_jvp_transpose adjointness
        a = float(v @ problem.mixed_jvp(x, theta, w))
        b = float(w @ problem.mixed_jvp_transpose(x, theta, v))
        _require_finite(a, "mixed_jvp")
        _require_finite(b, "mixed_jvp_transpose")
        adj_err = max(adj_err, _rel(a, b))

        # (d) upper_grad vs central differences of upper_value
        f_plus = problem.upper_value(x + t * u)
        f_minus = problem.upper_value(x - t * u)
        _require_finite([f_plus, f_minus], "upper_value")
        fd = (f_plus - f_minus) / (2.0 * t)
        an = float(problem.upper_grad(x) @ u)
        _require_finite(an, "upper_grad")
        upper_err = max(upper_err, _rel(fd, an))

    return DerivativeReport(grad_err, hvp_err, adj_err, upper_err)


def check_curvature(
    problem: BilevelProblem,
    theta: np.ndarray,
    x: np.ndarray,
    samples: int = 10,
    seed: int = 0,
) -> tuple[float, float]:
    """Return the (min, max) Rayleigh quotient of the lower Hessian.

    For a correctly declared problem both values lie in
    ``[mu(theta), lip_lower(theta)]``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.inf, -np.inf
    for _ in range(samples):
        v = _unit(rng.standard_normal(problem.n))
        quotient = float(v @ problem.lower_hvp(x, theta, v))
        _require_finite(quotient, "lower_hvp")
        lo = min(lo, quotient)
        hi = max(hi, quotient)
    return lo, hi
