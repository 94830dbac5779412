"""Bias of per-sample gradient clipping on a two-parameter linear regression.

Data: ``x ~ U[0, 1]``, ``y = a x + b + e`` with ``e`` drawn from a finite
distribution; model ``theta_1 x + theta_2`` under squared loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dp_optim import TrainConfig, train
from .layers import Dense, ModelSpec, SquaredError


@dataclass(frozen=True)
class BiasScenario:
    a: float
    b: float
    errors: tuple[tuple[float, float], ...]  # (value, probability)
    clip_C: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "errors", tuple((float(e), float(p)) for e, p in self.errors))
        probs = [p for _, p in self.errors]
        if any(p < 0 for p in probs):
            raise ValueError("error probabilities must be non-negative")
        if not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise ValueError(f"error probabilities sum to {sum(probs)}, not 1")
        if not self.clip_C > 0:
            raise ValueError("clip_C must be positive (math.inf disables clipping)")

    @classmethod
    def asymmetric(cls, a: float = 0.0, b: float = 0.0, clip_C: float = 1.0) -> "BiasScenario":
        """Rare large positive errors, frequent small negative ones, mean zero."""
        return cls(a, b, ((9.0, 0.1), (-1.0, 0.9)), clip_C)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = rng.uniform(0.0, 1.0, size=n)
        values = np.array([e for e, _ in self.errors])
        probs = np.array([p for _, p in self.errors])
        e = values[rng.choice(len(values), size=n, p=probs)]
        return x[:, None], self.a * x + self.b + e


def adaptive_simpson(f, lo: float, hi: float, tol: float, max_depth: int = 50) -> np.ndarray:
    """Adaptive Simpson quadrature of a vector-valued ``f`` (absolute tolerance)."""

    def simpson(fa, fm, fb, width):
        return width / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, eps, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        diff = left + right - whole
        if depth <= 0 or np.max(np.abs(diff)) <= 15.0 * eps:
            return left + right + diff / 15.0
        return recurse(a, m, fa, flm, fm, left, eps / 2, depth - 1) + recurse(
            m, b, fm, frm, fb, right, eps / 2, depth - 1
        )

    fa, fm, fb = f(lo), f(0.5 * (lo + hi)), f(hi)
    return recurse(lo, hi, fa, fm, fb, simpson(fa, fm, fb, hi - lo), tol, max_depth)


def per_sample_gradient(theta: Sequence[float], x: float, y: float, C: float = math.inf) -> np.ndarray:
    r = theta[0] * x + theta[1] - y
    g = np.array([2.0 * r * x, 2.0 * r])
    norm = math.hypot(g[0], g[1])
    if norm > C:
        g *= C / norm
    return g


def expected_gradient(
    scenario: BiasScenario, theta: Sequence[float], clipped: bool = True, tol: float = 1e-9
) -> np.ndarray:
    """Population mean of the (clipped) squared-loss gradient at ``theta``."""
    C = scenario.clip_C if clipped else math.inf
    total = np.zeros(2)
    for e, p in scenario.errors:
        if p == 0:
            continue

        def f(x, e=e):
            return per_sample_gradient(theta, x, scenario.a * x + scenario.b + e, C)

        total += p * adaptive_simpson(f, 0.0, 1.0, tol)
    return total


@dataclass(frozen=True)
class FixedPointResult:
    theta: tuple[float, float]
    residual: float
    converged: bool
    iterations: int


def clipped_loss(theta: Sequence[float], x: float, y: float, C: float = math.inf) -> float:
    """Huber-type loss whose gradient is the clipped squared-loss gradient.

    With ``k = C / (2 sqrt(1 + x^2))`` it is ``r^2`` for ``|r| <= k`` and
    ``2 k |r| - k^2`` beyond, so it is convex in ``theta``.
    """
    r = theta[0] * x + theta[1] - y
    k = C / (2.0 * math.sqrt(1.0 + x * x))
    return r * r if abs(r) <= k else 2.0 * k * abs(r) - k * k


def expected_loss(scenario: BiasScenario, theta: Sequence[float], tol: float = 1e-11) -> float:
    total = 0.0
    for e, p in scenario.errors:
        if p == 0:
            continue

        def f(x, e=e):
            return np.array([clipped_loss(theta, x, scenario.a * x + scenario.b + e, scenario.clip_C)])

        total += p * float(adaptive_simpson(f, 0.0, 1.0, tol)[0])
    return total


def find_clipped_fixed_point(
    scenario: BiasScenario, tol: float = 1e-10, max_iter: int = 200
) -> FixedPointResult:
    """Zero of the expected clipped gradient by damped Newton from ``(a, b)``.

    The clipped field is the gradient of the convex :func:`expected_loss`, which
    serves as the merit function for backtracking. The Jacobian is taken by
    central differences of the quadrature; where it vanishes (every sample
    clipped) the step falls back to the gradient direction. On non-convergence
    the last iterate is returned with ``converged=False``.
    """
    theta = np.array([scenario.a, scenario.b], dtype=np.float64)
    g = expected_gradient(scenario, theta)
    res = float(np.linalg.norm(g))
    F = expected_loss(scenario, theta)
    h = 1e-6
    it = 0
    for it in range(1, max_iter + 1):
        if res <= tol:
            return FixedPointResult((float(theta[0]), float(theta[1])), res, True, it - 1)
        J = np.empty((2, 2))
        for j in range(2):
            d = np.zeros(2)
            d[j] = h
            J[:, j] = (expected_gradient(scenario, theta + d) - expected_gradient(scenario, theta - d)) / (2 * h)
        J = 0.5 * (J + J.T)
        eig = np.linalg.eigvalsh(J)
        if eig[0] > 1e-8 * max(1.0, eig[1]):
            step = np.linalg.solve(J, g)
        else:
            step = g.copy()
        norm = float(np.linalg.norm(step))
        if norm > 1.0:
            step /= norm
        t = 1.0
        while t > 1e-12:
            cand = theta - t * step
            Fc = expected_loss(scenario, cand)
            gc = expected_gradient(scenario, cand)
            rc = float(np.linalg.norm(gc))
            # sufficient decrease of the merit, or of the residual once the
            # merit is flat to quadrature precision
            if Fc <= F - 1e-4 * t * float(g @ step) or (Fc <= F + 1e-12 and rc < res):
                break
            t *= 0.5
        else:
            break
        theta, g, res, F = cand, gc, rc, Fc
    return FixedPointResult((float(theta[0]), float(theta[1])), res, res <= tol, it)


def gradient_field(
    scenario: BiasScenario, theta1: Iterable[float], theta2: Iterable[float]
) -> list[dict]:
    """Clipped and unclipped expected gradients over a grid, one row per point."""
    rows = []
    for t1 in theta1:
        for t2 in theta2:
            gc = expected_gradient(scenario, (t1, t2), clipped=True)
            gu = expected_gradient(scenario, (t1, t2), clipped=False)
            rows.append(
                {
                    "theta1": float(t1),
                    "theta2": float(t2),
                    "clipped_g1": float(gc[0]),
                    "clipped_g2": float(gc[1]),
                    "unclipped_g1": float(gu[0]),
                    "unclipped_g2": float(gu[1]),
                }
            )
    return rows


def regression_model(scenario: BiasScenario) -> ModelSpec:
    """``theta_1 x + theta_2`` as a biased dense layer under squared loss."""
    target = abs(scenario.a) + abs(scenario.b) + max(abs(e) for e, _ in scenario.errors)
    return ModelSpec((Dense(1, 1, with_bias=True),), SquaredError(target_bound=target))


def clip_error_trajectory(
    model: ModelSpec,
    dataset: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
    params=None,
) -> list[tuple[float, float]]:
    """``(||g_true - g_clipped||, ||g_clipped||)`` per iteration of a clipped-gradient run.

    Both means are over the same sampled batch and exclude noise.
    """
    result = train(model, dataset, cfg, "classic", rng, params=params)
    seen = {}
    for row in result.diagnostics:
        seen.setdefault(row["iteration"], (row["clip_error"], row["clipped_grad_norm"]))
    return [seen[i] for i in sorted(seen)]
