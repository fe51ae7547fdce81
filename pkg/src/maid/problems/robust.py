"""Bounded non-convex upper loss wrapped around any lower level.

Replaces the upper loss with g(x) = ||x - x*||^2 / (1 + ||x - x*||^2),
which lives in [0, 1) and saturates for large residuals, so single bad
fits cannot dominate the objective.  The loss is smooth but not convex;
its Hessian 2(1+s)^-2 I - 8(1+s)^-3 r r' (s = ||r||^2) has eigenvalues
2(1+s)^-2 and 2(1-3s)(1+s)^-3, both within [-1/2, 2], so the gradient is
2-Lipschitz.
"""

from __future__ import annotations

import numpy as np

from ..core import BilevelProblem


class RobustLossWrapper(BilevelProblem):
    """Delegates the lower level to ``inner``; the target defaults to
    the wrapped problem's own ``target`` attribute."""

    def __init__(self, inner: BilevelProblem, target: np.ndarray | None = None):
        self.inner = inner
        if target is None:
            target = getattr(inner, "target", None)
            if target is None:
                raise ValueError("inner problem exposes no target; pass one explicitly")
        self.target = np.asarray(target, dtype=float).ravel()
        if self.target.size != inner.n:
            raise ValueError("target length must match the state dimension")
        self.n = inner.n
        self.d = inner.d
        self.upper_is_convex = False
        self.lip_upper_grad = 2.0

    # -- lower level: straight delegation ---------------------------------
    def lower_value(self, x, theta):
        return self.inner.lower_value(x, theta)

    def lower_grad(self, x, theta):
        return self.inner.lower_grad(x, theta)

    def lower_hvp(self, x, theta, v):
        return self.inner.lower_hvp(x, theta, v)

    def mixed_jvp(self, x, theta, w):
        return self.inner.mixed_jvp(x, theta, w)

    def mixed_jvp_transpose(self, x, theta, v):
        return self.inner.mixed_jvp_transpose(x, theta, v)

    def mu(self, theta):
        return self.inner.mu(theta)

    def lip_lower(self, theta):
        return self.inner.lip_lower(theta)

    def initial_state(self):
        return self.inner.initial_state()

    # -- bounded upper loss -----------------------------------------------
    def upper_value(self, x):
        r = np.asarray(x, dtype=float).ravel() - self.target
        s = float(r @ r)
        return s / (1.0 + s)

    def upper_grad(self, x):
        r = np.asarray(x, dtype=float).ravel() - self.target
        s = float(r @ r)
        return 2.0 * r / (1.0 + s) ** 2
