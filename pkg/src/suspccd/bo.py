"""Gaussian-process Bayesian optimization with expected improvement.

Small, deterministic implementation for tuning the warm-start P-controller
gains: inputs are scaled to the unit cube, objective values standardized,
and an RBF-kernel GP proposes candidates by maximizing EI over a mixed
uniform/local candidate set. Failed (divergent) evaluations are fed back as
large penalty values rather than aborting the search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr


@dataclass
class BoResult:
    x_best: np.ndarray
    f_best: float
    xs: np.ndarray
    fs: np.ndarray
    n_evaluations: int


class GaussianProcess:
    """RBF-kernel GP regression with fixed hyperparameters."""

    def __init__(self, length_scale: float = 0.2, signal_var: float = 1.0,
                 noise_var: float = 1e-6):
        self.length_scale = length_scale
        self.signal_var = signal_var
        self.noise_var = noise_var
        self._x = None
        self._alpha = None
        self._chol = None
        self._y_mean = 0.0
        self._y_std = 1.0

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return self.signal_var * np.exp(-0.5 * d2 / self.length_scale ** 2)

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        self._y_mean = float(y.mean())
        self._y_std = float(max(y.std(), 1e-12))
        yn = (y - self._y_mean) / self._y_std
        k = self._kernel(x, x) + self.noise_var * np.eye(len(x))
        self._chol = cho_factor(k, lower=True)
        self._alpha = cho_solve(self._chol, yn)
        self._x = x

    def predict(self, xq: np.ndarray):
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        ks = self._kernel(xq, self._x)
        mean_n = ks @ self._alpha
        v = cho_solve(self._chol, ks.T)
        var_n = self.signal_var - np.sum(ks * v.T, axis=1)
        var_n = np.maximum(var_n, 1e-12)
        mean = mean_n * self._y_std + self._y_mean
        std = np.sqrt(var_n) * self._y_std
        return mean, std


def expected_improvement(mean: np.ndarray, std: np.ndarray,
                         f_best: float) -> np.ndarray:
    """EI for minimization under a Gaussian posterior."""
    gap = f_best - mean
    z = gap / std
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return gap * ndtr(z) + std * pdf


def _candidates(rng: np.random.Generator, dim: int, best_x: np.ndarray,
                n_uniform: int = 3072, n_local: int = 1024) -> np.ndarray:
    uniform = rng.random((n_uniform, dim))
    local = best_x + 0.05 * rng.standard_normal((n_local, dim))
    return np.clip(np.vstack([uniform, local]), 0.0, 1.0)


def bayesian_minimize(objective, bounds: np.ndarray, budget: int,
                      rng: np.random.Generator, n_seed: int = 10,
                      seed_points: list[np.ndarray] | None = None) -> BoResult:
    """Minimize `objective` over a box with exactly `budget` evaluations.

    `seed_points` (raw units) are evaluated first and count toward both the
    seed phase and the budget.
    """
    bounds = np.asarray(bounds, dtype=float)
    dim = bounds.shape[0]
    lo, hi = bounds[:, 0], bounds[:, 1]
    span = hi - lo

    def to_unit(x):
        return (np.asarray(x, dtype=float) - lo) / span

    def from_unit(u):
        return lo + u * span

    xs_unit: list[np.ndarray] = []
    fs: list[float] = []

    for point in (seed_points or []):
        xs_unit.append(to_unit(point))
        fs.append(float(objective(np.asarray(point, dtype=float))))
    while len(xs_unit) < min(n_seed, budget):
        u = rng.random(dim)
        xs_unit.append(u)
        fs.append(float(objective(from_unit(u))))

    gp = GaussianProcess()
    while len(xs_unit) < budget:
        x_arr = np.array(xs_unit)
        f_arr = np.array(fs)
        best_idx = int(np.argmin(f_arr))
        gp.fit(x_arr, f_arr)
        cand = _candidates(rng, dim, x_arr[best_idx])
        mean, std = gp.predict(cand)
        ei = expected_improvement(mean, std, float(f_arr[best_idx]))
        u = cand[int(np.argmax(ei))]
        xs_unit.append(u)
        fs.append(float(objective(from_unit(u))))

    f_arr = np.array(fs)
    best_idx = int(np.argmin(f_arr))
    return BoResult(x_best=from_unit(np.array(xs_unit[best_idx])),
                    f_best=float(f_arr[best_idx]),
                    xs=np.array([from_unit(u) for u in xs_unit]),
                    fs=f_arr,
                    n_evaluations=len(fs))
