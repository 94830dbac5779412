"""Dense tensor helpers: matrix norms and seeded Gaussian noise.

Tensors are plain ``numpy.ndarray`` objects (float64, C order). Random state is
a ``numpy.random.Generator``; one generator is owned by one training run.
"""

from __future__ import annotations

import math
import warnings
from typing import NamedTuple

import numpy as np

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 200

_EPS = np.finfo(np.float64).eps


class ConvergenceWarning(RuntimeWarning):
    """Power iteration stopped at ``max_iter`` before meeting its tolerance."""


class PowerIterationResult(NamedTuple):
    value: float
    converged: bool
    iterations: int
    restarted: bool


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _start_vector(n: int) -> np.ndarray:
    return np.full(n, 1.0 / math.sqrt(n))


def _perturbed_start_vector(n: int) -> np.ndarray:
    # fixed, non-symmetric pattern; used only when the all-ones start is degenerate
    v = 1.0 + 0.5 * np.sin(np.arange(1, n + 1) * 1.618033988749895)
    return v / np.linalg.norm(v)


def _iterate(a: np.ndarray, v: np.ndarray, tol: float, max_iter: int):
    """Run power iteration on a^T a from unit vector v.

    Stops when an Aitken-style extrapolation of the remaining error in the
    singular value drops below ``0.1 * tol`` relative, or when successive
    estimates agree to rounding level.
    """
    prev = None
    prev_step = None
    prev_rate = None
    sigma = 0.0
    for it in range(1, max_iter + 1):
        w = a.T @ (a @ v)
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        sigma = math.sqrt(max(lam, 0.0))
        if nw == 0.0:
            return sigma, True, it, v
        v = w / nw
        if prev is not None:
            step = abs(sigma - prev)
            if step <= 16 * _EPS * sigma:
                return sigma, True, it, v
            if prev_step:
                rate = step / prev_step
                if (
                    prev_rate is not None
                    and rate < 1.0
                    and abs(rate - prev_rate) <= 0.1 * (1.0 - rate)
                    and step * rate / (1.0 - rate) <= 0.1 * tol * sigma
                ):
                    return sigma, True, it, v
                prev_rate = rate
            prev_step = step
        prev = sigma
    return sigma, False, max_iter, v


def power_iteration(
    matrix: np.ndarray, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> PowerIterationResult:
    """Largest singular value of a rank-2 array by power iteration on ``A^T A``.

    The start vector is the normalized all-ones vector. If that vector is
    annihilated by ``A`` or is already an eigenvector of ``A^T A`` (so the
    iteration cannot leave it), the iteration is repeated once from a fixed
    perturbed vector and the larger estimate is kept.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty rank-2 array, got shape {a.shape}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not np.any(a):
        return PowerIterationResult(0.0, True, 0, False)

    n = a.shape[1]
    v0 = _start_vector(n)
    w0 = a.T @ (a @ v0)
    lam0 = float(v0 @ w0)
    degenerate = lam0 == 0.0 or np.linalg.norm(w0 - lam0 * v0) <= 1e-12 * np.linalg.norm(w0)

    sigma, converged, iters, _ = _iterate(a, v0, tol, max_iter)
    restarted = False
    if degenerate and n > 1:
        s2, c2, i2, _ = _iterate(a, _perturbed_start_vector(n), tol, max_iter)
        restarted = True
        iters += i2
        if s2 > sigma:
            sigma, converged = s2, c2
    return PowerIterationResult(sigma, converged, iters, restarted)


def spectral_norm(
    matrix: np.ndarray, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> float:
    """Spectral norm of ``matrix``; warns with ``ConvergenceWarning`` if not converged."""
    res = power_iteration(matrix, tol, max_iter)
    if not res.converged:
        warnings.warn(
            f"power iteration did not converge in {max_iter} iterations; "
            f"returning last estimate {res.value!r}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return res.value


def frobenius_norm(t: np.ndarray) -> float:
    flat = np.asarray(t, dtype=np.float64).ravel()
    return math.sqrt(float(flat @ flat))


def gaussian_noise(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.zeros(shape)
    return std * rng.standard_normal(shape)
