"""Accounting for lower-level computational cost.

One unit is one lower-level gradient evaluation, one Hessian-vector
product, or one mixed second-derivative product.  Fixed conventions:

* the gradient evaluation that checks the lower-level stopping criterion
  is charged (it doubles as the step gradient, so FISTA costs exactly one
  unit per iteration, including the final check);
* conjugate gradient charges one unit per iteration plus one for the
  initial residual, even when warm-started from the zero vector;
* the error-bound machinery is charged: two units per power-method step,
  one per mixed-derivative Lipschitz probe, and the Hessian-vector
  products of the extra linear solve inside the inverse-Hessian probe;
* the single transpose product that assembles the hypergradient from the
  linear-system solution is *not* charged, matching the iteration-count
  reading of lower-level cost.

Callers check :attr:`Budget.exhausted` before starting a unit of work, so
``spent`` can overshoot ``cap`` by at most the cost of the call that
detects exhaustion.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class Budget:
    """Running lower-level cost with an optional cap (None = unlimited)."""

    cap: int | None = None
    spent: int = 0

    def charge(self, units: int = 1) -> None:
        if units < 0:
            raise ValueError("budget charges must be non-negative")
        self.spent += units

    @property
    def exhausted(self) -> bool:
        return self.cap is not None and self.spent >= self.cap

    def remaining(self) -> int | None:
        if self.cap is None:
            return None
        return max(self.cap - self.spent, 0)
