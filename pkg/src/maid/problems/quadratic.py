"""Dense linear least-squares bilevel instance with closed-form reference values.

    lower:  h(x, theta) = ||A2 x + A3 theta - b2||**2
    upper:  g(x)        = ||A1 x - b1||**2

No 1/2 factor anywhere; every declared constant tracks this scaling
(Hessian 2 A2'A2, mixed derivative 2 A2'A3, and so on).  The inner
minimizer is affine in theta, so the exact solution, loss, and
hypergradient are available from one dense factorization, which makes
this the benchmark problem for every certificate in the package.
"""

from __future__ import annotations

import numpy as np

from ..core import BilevelProblem, ClosedFormOracle


class QuadraticBilevel(BilevelProblem, ClosedFormOracle):
    def __init__(
        self,
        A1: np.ndarray,
        A2: np.ndarray,
        A3: np.ndarray,
        b1: np.ndarray,
        b2: np.ndarray,
    ):
        A1 = np.asarray(A1, dtype=float)
        A2 = np.asarray(A2, dtype=float)
        A3 = np.asarray(A3, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        if A1.ndim != 2 or A1.shape != A2.shape or A2.shape != A3.shape:
            raise ValueError("A1, A2, A3 must share one (rows, dim) shape")
        if self.b1.shape != (A1.shape[0],) or self.b2.shape != (A2.shape[0],):
            raise ValueError("b1, b2 must have one entry per matrix row")
        self.A1, self.A2, self.A3 = A1, A2, A3
        self.n = self.d = A1.shape[1]
        self.upper_is_convex = True

        # Small dense normal matrices; everything hot runs through these.
        self._gram_upper = A1.T @ A1
        self._gram_lower = A2.T @ A2
        self._mixed = A2.T @ A3
        self._a1t_b1 = A1.T @ self.b1
        self._a2t_b2 = A2.T @ self.b2

        eigs_lower = np.linalg.eigvalsh(self._gram_lower)
        if eigs_lower[0] <= 1e-12 * max(eigs_lower[-1], 1.0):
            raise ValueError("A2'A2 is singular; the lower level is not strongly convex")
        self._mu = 2.0 * float(eigs_lower[0])
        self._lip = 2.0 * float(eigs_lower[-1])
        self.lip_upper_grad = 2.0 * float(np.linalg.eigvalsh(self._gram_upper)[-1])

    @classmethod
    def synth(cls, rows: int = 1000, dim: int = 10, seed: int = 0) -> "QuadraticBilevel":
        """Random instance: uniform [0, 1] matrices, targets with 1% Gaussian noise."""
        rng = np.random.default_rng(seed)
        A1 = rng.uniform(0.0, 1.0, (rows, dim))
        A2 = rng.uniform(0.0, 1.0, (rows, dim))
        A3 = rng.uniform(0.0, 1.0, (rows, dim))
        x1 = rng.uniform(0.0, 1.0, dim)
        x2 = rng.uniform(0.0, 1.0, dim)
        theta_bar = rng.uniform(0.0, 1.0, dim)
        y1 = rng.standard_normal(rows)
        y2 = rng.standard_normal(rows)
        b1 = A1 @ x1 + 0.01 * y1
        b2 = A2 @ x2 + A3 @ theta_bar + 0.01 * y2
        return cls(A1, A2, A3, b1, b2)

    # -- lower level ---------------------------------------------------
    def lower_value(self, x, theta):
        r = self.A2 @ x + self.A3 @ theta - self.b2
        return float(r @ r)

    def lower_grad(self, x, theta):
        return 2.0 * (self._gram_lower @ x + self._mixed @ theta - self._a2t_b2)

    def lower_hvp(self, x, theta, v):
        return 2.0 * (self._gram_lower @ v)

    def mixed_jvp(self, x, theta, w):
        return 2.0 * (self._mixed @ w)

    def mixed_jvp_transpose(self, x, theta, v):
        return 2.0 * (self._mixed.T @ v)

    # -- upper level ---------------------------------------------------
    def upper_value(self, x):
        r = self.A1 @ x - self.b1
        return float(r @ r)

    def upper_grad(self, x):
        return 2.0 * (self._gram_upper @ x - self._a1t_b1)

    def mu(self, theta):
        return self._mu

    def lip_lower(self, theta):
        return self._lip

    # -- closed forms ----------------------------------------------------
    def exact_lower_solution(self, theta):
        return np.linalg.solve(self._gram_lower, self._a2t_b2 - self._mixed @ theta)

    def exact_upper_value(self, theta):
        return self.upper_value(self.exact_lower_solution(theta))

    def exact_hypergradient(self, theta):
        xhat = self.exact_lower_solution(theta)
        return -self._mixed.T @ np.linalg.solve(self._gram_lower, self.upper_grad(xhat))

    # -- reference constants for validation ------------------------------
    def mixed_operator_norm(self) -> float:
        """Exact norm of the (constant) mixed second derivative, 2 ||A2'A3||."""
        return 2.0 * float(np.linalg.norm(self._mixed, ord=2))

    def hessian_inverse_norm(self) -> float:
        """Exact norm of the (constant) inverse Hessian, 1 / mu."""
        return 1.0 / self._mu


def quadratic_oracle(problem: QuadraticBilevel, theta: np.ndarray):
    """Exact (x_hat, f, grad f) at theta from the dense factorization."""
    xhat = problem.exact_lower_solution(theta)
    return xhat, problem.upper_value(xhat), problem.exact_hypergradient(theta)
