"""Multinomial logistic regression with per-weight exponential ridge penalties.

Lower level (weights x in R^{p x q}, stored flattened):

    h(x, theta) = sum_j CE(b_j, a_j' x) + 1/2 sum_{k,l} e^{theta_{kl}} x_{kl}^2

with CE the softmax cross-entropy.  Each of the p*q weights carries its
own penalty e^{theta_{kl}}, so theta has length p*q as well.  The upper
level is the cross-entropy summed over a validation set.

The penalty Hessian is diag(e^theta) and the cross-entropy Hessian is
positive semidefinite with softmax blocks bounded by 1/2, giving
mu(theta) = min(e^theta) and L(theta) = max(e^theta) + lam_max(A'A)/2.
The mixed second derivative is the diagonal matrix diag(e^theta * x).
"""

from __future__ import annotations

import numpy as np

from ..core import BilevelProblem


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class LogisticBilevel(BilevelProblem):
    def __init__(
        self,
        train_features: np.ndarray,
        train_labels: np.ndarray,
        val_features: np.ndarray,
        val_labels: np.ndarray,
        num_classes: int | None = None,
    ):
        self.train_x = np.asarray(train_features, dtype=float)
        self.val_x = np.asarray(val_features, dtype=float)
        train_labels = np.asarray(train_labels, dtype=int)
        val_labels = np.asarray(val_labels, dtype=int)
        if self.train_x.ndim != 2 or self.val_x.ndim != 2:
            raise ValueError("feature arrays must be 2-D (samples, features)")
        if self.train_x.shape[1] != self.val_x.shape[1]:
            raise ValueError("train and validation feature counts differ")
        self.features = self.train_x.shape[1]
        if num_classes is None:
            num_classes = int(max(train_labels.max(), val_labels.max())) + 1
        self.classes = num_classes
        for name, labels, count in (
            ("train", train_labels, self.train_x.shape[0]),
            ("validation", val_labels, self.val_x.shape[0]),
        ):
            if labels.shape != (count,):
                raise ValueError(f"{name} labels must be one integer per sample")
            if labels.min() < 0 or labels.max() >= num_classes:
                raise ValueError(f"{name} label out of range [0, {num_classes})")
        self.train_y = np.eye(num_classes)[train_labels]
        self.val_y = np.eye(num_classes)[val_labels]

        self.n = self.d = self.features * self.classes
        self.upper_is_convex = True
        # Softmax Hessian blocks are bounded by 1/2.
        self._train_gram_top = float(np.linalg.eigvalsh(self.train_x.T @ self.train_x)[-1])
        self.lip_upper_grad = 0.5 * float(np.linalg.eigvalsh(self.val_x.T @ self.val_x)[-1])

    def _weights(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(self.features, self.classes)

    def _cross_entropy(self, features, onehot, weights) -> float:
        log_p = _log_softmax(features @ weights)
        return -float(np.sum(onehot * log_p))

    # -- lower level ---------------------------------------------------
    def lower_value(self, x, theta):
        w = self._weights(x)
        penalty = 0.5 * float(np.exp(theta) @ (np.asarray(x, dtype=float) ** 2))
        return self._cross_entropy(self.train_x, self.train_y, w) + penalty

    def lower_grad(self, x, theta):
        w = self._weights(x)
        probs = np.exp(_log_softmax(self.train_x @ w))
        data = self.train_x.T @ (probs - self.train_y)
        return data.ravel() + np.exp(theta) * np.asarray(x, dtype=float)

    def lower_hvp(self, x, theta, v):
        w = self._weights(x)
        probs = np.exp(_log_softmax(self.train_x @ w))
        sv = self.train_x @ self._weights(v)
        # Per-sample softmax Hessian action: diag(p) s - p (p . s).
        hs = probs * sv - probs * (probs * sv).sum(axis=1, keepdims=True)
        data = self.train_x.T @ hs
        return data.ravel() + np.exp(theta) * np.asarray(v, dtype=float)

    def mixed_jvp(self, x, theta, w):
        return np.exp(theta) * np.asarray(x, dtype=float) * np.asarray(w, dtype=float)

    def mixed_jvp_transpose(self, x, theta, v):
        return np.exp(theta) * np.asarray(x, dtype=float) * np.asarray(v, dtype=float)

    # -- upper level ---------------------------------------------------
    def upper_value(self, x):
        return self._cross_entropy(self.val_x, self.val_y, self._weights(x))

    def upper_grad(self, x):
        probs = np.exp(_log_softmax(self.val_x @ self._weights(x)))
        return (self.val_x.T @ (probs - self.val_y)).ravel()

    def mu(self, theta):
        return float(np.exp(theta).min())

    def lip_lower(self, theta):
        return float(np.exp(theta).max()) + 0.5 * self._train_gram_top


def synth_logistic_dataset(
    train_count: int,
    val_count: int,
    features: int,
    classes: int,
    seed: int = 0,
    separation: float = 2.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian blobs, one center per class; returns (train_x, train_y, val_x, val_y)."""
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((classes, features))

    def draw(count):
        labels = rng.integers(0, classes, count)
        points = centers[labels] + rng.standard_normal((count, features))
        return points, labels

    train_x, train_y = draw(train_count)
    val_x, val_y = draw(val_count)
    return train_x, train_y, val_x, val_y
