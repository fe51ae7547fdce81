"""Smoothed total-variation denoising with learnable weight and smoothing.

Lower level, per image t (all images stacked into one state vector):

    h(x, theta) = sum_t [ 1/2 ||x_t - y_t||^2
                          + e^{theta[0]} sum_p sqrt(u_p^2 + v_p^2 + ups^2) ]

where (u, v) are forward differences of x_t in the two image directions
(replicate boundary: the last difference row/column is zero) and
ups = e^{theta[1]} is the smoothing constant that makes the objective
twice differentiable.  Upper level: mean squared error against the clean
images, g(x) = (1/m) sum_t 1/2 ||x_t - x*_t||^2.

The data term makes the Hessian >= I, so mu = 1.  The TV head's per-pixel
Hessian is bounded by 1/r <= 1/ups and the stacked difference operator by
||D||^2 <= 8, giving L(theta) = 1 + 8 e^{theta[0]} / e^{theta[1]}.
"""

from __future__ import annotations

import numpy as np

from ..core import BilevelProblem


def _diff_h(img: np.ndarray) -> np.ndarray:
    out = np.zeros_like(img)
    out[..., :, :-1] = img[..., :, 1:] - img[..., :, :-1]
    return out


def _diff_v(img: np.ndarray) -> np.ndarray:
    out = np.zeros_like(img)
    out[..., :-1, :] = img[..., 1:, :] - img[..., :-1, :]
    return out


def _diff_h_t(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    out[..., :, :-1] -= p[..., :, :-1]
    out[..., :, 1:] += p[..., :, :-1]
    return out


def _diff_v_t(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    out[..., :-1, :] -= p[..., :-1, :]
    out[..., 1:, :] += p[..., :-1, :]
    return out


class TVDenoise(BilevelProblem):
    """theta = (log regularization weight, log smoothing parameter)."""

    def __init__(self, noisy: np.ndarray, clean: np.ndarray | None = None):
        noisy = np.asarray(noisy, dtype=float)
        if noisy.ndim == 2:
            noisy = noisy[None]
        if noisy.ndim != 3:
            raise ValueError("noisy must be one image (h, w) or a stack (m, h, w)")
        self.noisy = noisy
        if clean is None:
            # Denoise-only usage: the upper loss has no meaningful target.
            clean = np.zeros_like(noisy)
        else:
            clean = np.asarray(clean, dtype=float)
            if clean.ndim == 2:
                clean = clean[None]
            if clean.shape != noisy.shape:
                raise ValueError("clean and noisy image stacks must match in shape")
        self.clean = clean
        self.count, self.height, self.width = noisy.shape
        self.n = noisy.size
        self.d = 2
        self.upper_is_convex = True
        self.lip_upper_grad = 1.0 / self.count
        self._y = noisy.ravel().copy()
        self._target = clean.ravel().copy()

    @property
    def target(self) -> np.ndarray:
        return self._target

    def initial_state(self) -> np.ndarray:
        return self._y.copy()

    def _images(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(self.count, self.height, self.width)

    def _tv_fields(self, x: np.ndarray, theta: np.ndarray):
        img = self._images(x)
        u = _diff_h(img)
        v = _diff_v(img)
        ups = np.exp(theta[1])
        r = np.sqrt(u * u + v * v + ups * ups)
        return img, u, v, ups, r

    # -- lower level ---------------------------------------------------
    def lower_value(self, x, theta):
        img, _, _, _, r = self._tv_fields(x, theta)
        data = 0.5 * float(np.sum((img - self.noisy) ** 2))
        return data + float(np.exp(theta[0])) * float(np.sum(r))

    def lower_grad(self, x, theta):
        img, u, v, _, r = self._tv_fields(x, theta)
        tv = _diff_h_t(u / r) + _diff_v_t(v / r)
        return (img - self.noisy + np.exp(theta[0]) * tv).ravel()

    def lower_hvp(self, x, theta, vec):
        _, u, v, _, r = self._tv_fields(x, theta)
        s = self._images(vec)
        a = _diff_h(s)
        b = _diff_v(s)
        # Per-pixel Hessian of sqrt(u^2 + v^2 + ups^2):
        #   (1/r) I - (1/r^3) [u v]'[u v]
        inner = (u * a + v * b) / (r * r)
        ha = (a - u * inner) / r
        hb = (b - v * inner) / r
        tv = _diff_h_t(ha) + _diff_v_t(hb)
        return (s + np.exp(theta[0]) * tv).ravel()

    def _mixed_columns(self, x, theta):
        # d(lower_grad)/d(theta[0]) is the TV gradient head itself;
        # d(lower_grad)/d(theta[1]) follows from dr/d(theta[1]) = ups^2 / r.
        _, u, v, ups, r = self._tv_fields(x, theta)
        weight = np.exp(theta[0])
        col0 = weight * (_diff_h_t(u / r) + _diff_v_t(v / r))
        r3 = r**3
        col1 = -weight * ups**2 * (_diff_h_t(u / r3) + _diff_v_t(v / r3))
        return col0.ravel(), col1.ravel()

    def mixed_jvp(self, x, theta, w):
        col0, col1 = self._mixed_columns(x, theta)
        return w[0] * col0 + w[1] * col1

    def mixed_jvp_transpose(self, x, theta, vec):
        col0, col1 = self._mixed_columns(x, theta)
        vec = np.asarray(vec, dtype=float).ravel()
        return np.array([col0 @ vec, col1 @ vec])

    # -- upper level ---------------------------------------------------
    def upper_value(self, x):
        diff = np.asarray(x, dtype=float).ravel() - self._target
        return 0.5 * float(diff @ diff) / self.count

    def upper_grad(self, x):
        return (np.asarray(x, dtype=float).ravel() - self._target) / self.count

    def mu(self, theta):
        return 1.0

    def lip_lower(self, theta):
        return 1.0 + 8.0 * float(np.exp(theta[0] - theta[1]))


def synth_tv_dataset(
    width: int,
    height: int,
    count: int,
    noise_sigma: float,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded piecewise-constant images in [0, 1] plus Gaussian noise.

    Each image is a background level with a handful of random axis-aligned
    rectangles.  The noisy copies are not clipped, so the per-pixel noise
    statistics stay exactly N(0, noise_sigma**2).
    """
    if width < 8 or height < 8:
        raise ValueError("images must be at least 8x8")
    if count < 1:
        raise ValueError("count must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    clean = np.empty((count, height, width))
    for t in range(count):
        canvas = np.full((height, width), rng.uniform(0.1, 0.4))
        for _ in range(int(rng.integers(4, 9))):
            rh = int(rng.integers(2, max(3, height // 2)))
            rw = int(rng.integers(2, max(3, width // 2)))
            r0 = int(rng.integers(0, height - rh + 1))
            c0 = int(rng.integers(0, width - rw + 1))
            canvas[r0 : r0 + rh, c0 : c0 + rw] = rng.uniform(0.0, 1.0)
        clean[t] = canvas
    noisy = clean + noise_sigma * rng.standard_normal(clean.shape)
    return clean, noisy


def psnr(image: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio, 10 log10(peak^2 / MSE); inf for equal inputs."""
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))
