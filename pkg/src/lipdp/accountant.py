"""Privacy accounting for the Poisson-subsampled Gaussian mechanism.

Per-step Renyi DP at order ``alpha`` is ``log(A_alpha) / (alpha - 1)`` with

    A_alpha = E_{z ~ N(0, sigma^2)} [((1 - q) + q * exp((2z - 1) / (2 sigma^2)))^alpha]

For integer orders ``A_alpha`` is the finite binomial sum
``sum_j C(alpha, j) (1-q)^(alpha-j) q^j exp(j (j-1) / (2 sigma^2))``; fractional
orders integrate the expectation numerically. Composition over steps is
additive and the total converts to (epsilon, delta) by
``min_alpha [eps(alpha) + log(1/delta) / (alpha - 1)]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5) + tuple(float(a) for a in range(2, 65))


def gaussian_sigma_for(epsilon: float, delta: float, sensitivity: float) -> float:
    """Noise standard deviation for an (epsilon, delta) Gaussian mechanism."""
    if not epsilon > 0 or not 0 < delta < 1 or sensitivity < 0:
        raise ValueError("need epsilon > 0, 0 < delta < 1, sensitivity >= 0")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    j = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(j + 1) - special.gammaln(alpha - j + 1)
    if q < 1:
        log_mix = (alpha - j) * math.log1p(-q) + j * math.log(q)
    else:
        log_mix = np.where(j == alpha, 0.0, -np.inf)
    log_terms = log_binom + log_mix + j * (j - 1) / (2.0 * sigma**2)
    return float(special.logsumexp(log_terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    s2 = sigma**2

    def log_integrand(z):
        mix = np.logaddexp(math.log1p(-q), math.log(q) + (2.0 * z - 1.0) / (2.0 * s2))
        return -0.5 * z * z / s2 - 0.5 * math.log(2.0 * math.pi * s2) + alpha * mix

    # the integrand is a tilted Gaussian whose mode lies in [0, alpha]
    lo, hi = -40.0 * sigma - 1.0, alpha + 40.0 * sigma + 1.0
    grid = np.linspace(lo, hi, 401)
    shift = float(np.max(log_integrand(grid)))
    val, _ = integrate.quad(
        lambda z: math.exp(log_integrand(z) - shift),
        lo,
        hi,
        points=[0.0, 0.5, alpha],
        limit=500,
        epsabs=0.0,
        epsrel=1e-13,
    )
    return shift + math.log(val)


def rdp_step(q: float, sigma: float, alpha: float) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism; ``inf`` if ``sigma == 0``."""
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1:
        return alpha / (2.0 * sigma**2)
    if sigma > 1e50:
        # subsampling never exceeds the full-batch value, which is negligible here
        return alpha / 2.0 / sigma / sigma
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a, 0.0) / (alpha - 1.0)


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    order: float | None = None


@dataclass
class RdpLedger:
    """Accumulated RDP of ``steps`` identical subsampled Gaussian steps."""

    q: float
    sigma: float
    steps: int = 0
    orders: tuple[float, ...] = DEFAULT_ORDERS
    _per_step: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if any(not a > 1 for a in self.orders):
            raise ValueError("all orders must exceed 1")
        self.orders = tuple(float(a) for a in self.orders)
        self._per_step = np.array([rdp_step(self.q, self.sigma, a) for a in self.orders])

    def step(self, n: int = 1) -> "RdpLedger":
        if n < 0:
            raise ValueError("cannot remove steps")
        self.steps += n
        return self

    @property
    def per_step(self) -> np.ndarray:
        return self._per_step.copy()

    @property
    def eps_at_order(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros(len(self.orders))
        if self.q == 1 and self.sigma > 0:
            # closed form T * alpha / (2 sigma^2), evaluated left to right
            return self.steps * np.asarray(self.orders) / (2.0 * self.sigma**2)
        return self.steps * self._per_step

    def to_record(self, delta: float | None = None) -> dict:
        rec = {
            "q": self.q,
            "sigma": self.sigma,
            "steps": self.steps,
            "orders": list(self.orders),
            "eps_at_order": [float(e) for e in self.eps_at_order],
        }
        if delta is not None:
            spend = to_epsilon_delta(self, delta)
            rec.update(epsilon=spend.epsilon, delta=delta, argmin_order=spend.order)
        return rec

    def to_json(self, delta: float | None = None) -> str:
        return json.dumps(self.to_record(delta), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "RdpLedger":
        return cls(q=rec["q"], sigma=rec["sigma"], steps=rec["steps"], orders=tuple(rec["orders"]))


def to_epsilon_delta(ledger: RdpLedger, delta: float) -> PrivacySpend:
    """Convert the ledger to (epsilon, delta), minimizing over the order grid."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if ledger.steps == 0:
        return PrivacySpend(0.0, delta, None)
    orders = np.asarray(ledger.orders)
    with np.errstate(invalid="ignore"):
        eps = ledger.eps_at_order + math.log(1.0 / delta) / (orders - 1.0)
    if not np.isfinite(eps).any():
        return PrivacySpend(math.inf, delta, None)
    i = int(np.nanargmin(eps))
    return PrivacySpend(float(eps[i]), delta, float(orders[i]))


def epsilon_for(q: float, sigma: float, steps: int, delta: float,
                orders: tuple[float, ...] = DEFAULT_ORDERS) -> float:
    return to_epsilon_delta(RdpLedger(q, sigma, steps, orders), delta).epsilon


def noise_multiplier_for(target_epsilon: float, q: float, steps: int, delta: float,
                         orders: tuple[float, ...] = DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier (to ~1e-6 relative) reaching ``target_epsilon``."""
    if steps == 0:
        return 0.0

    def gap(log_sigma):
        return epsilon_for(q, math.exp(log_sigma), steps, delta, orders) - target_epsilon

    lo, hi = math.log(0.05), math.log(2.0)
    while gap(hi) > 0:
        hi += math.log(2.0)
        if hi > math.log(1e6):
            raise ValueError("target epsilon unreachable")
    while gap(lo) < 0:
        lo -= math.log(2.0)
        if lo < math.log(1e-4):
            return math.exp(lo)
    root = optimize.brentq(gap, lo, hi, xtol=1e-7)
    sigma = math.exp(root)
    # bracket side guaranteeing epsilon <= target
    while gap(math.log(sigma)) > 0:
        sigma *= 1 + 1e-7
    return sigma
