import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipdp.accountant import (
    DEFAULT_ORDERS,
    RdpLedger,
    epsilon_for,
    gaussian_sigma_for,
    noise_multiplier_for,
    rdp_step,
    to_epsilon_delta,
)

mpmath.mp.dps = 40


def oracle_rdp(q, sigma, alpha):
    """Arbitrary-precision quadrature of the mixture moment."""
    q, s, a = mpmath.mpf(q), mpmath.mpf(sigma), mpmath.mpf(alpha)

    def f(z):
        mix = (1 - q) + q * mpmath.exp((2 * z - 1) / (2 * s**2))
        return mpmath.npdf(z, 0, s) * mix**a

    val = mpmath.quad(f, [-mpmath.inf, 0, mpmath.mpf("0.5"), a, mpmath.inf])
    return float(mpmath.log(val) / (a - 1))


def oracle_binomial(q, sigma, alpha):
    q, s = mpmath.mpf(q), mpmath.mpf(sigma)
    total = mpmath.fsum(
        mpmath.binomial(alpha, j) * (1 - q) ** (alpha - j) * q**j * mpmath.exp(j * (j - 1) / (2 * s**2))
        for j in range(alpha + 1)
    )
    return float(mpmath.log(total) / (alpha - 1))


SMALL_CASES = [
    (0.01, 1.0, 8),
    (0.01, 1.0, 2.5),
    (0.05, 2.0, 16),
    (0.05, 2.0, 1.25),
    (0.2, 0.8, 4),
    (0.2, 0.8, 3.5),
    (0.5, 3.0, 32),
    (0.001, 0.6, 1.5),
]


@pytest.mark.parametrize("q,sigma,alpha", SMALL_CASES)
def test_matches_quadrature_oracle(q, sigma, alpha):
    assert rdp_step(q, sigma, alpha) == pytest.approx(oracle_rdp(q, sigma, alpha), rel=1e-6)


@pytest.mark.parametrize("q,sigma,alpha", [c for c in SMALL_CASES if float(c[2]).is_integer()])
def test_integer_orders_match_binomial_oracle(q, sigma, alpha):
    assert rdp_step(q, sigma, alpha) == pytest.approx(oracle_binomial(q, sigma, alpha), rel=1e-10)


def test_frozen_value():
    # mpmath quadrature at 40 digits
    assert rdp_step(0.01, 1.0, 8) == pytest.approx(0.0008936439076060394, rel=1e-10)


def test_full_batch_is_exact():
    for sigma in (0.5, 1.0, 3.7):
        ledger = RdpLedger(1.0, sigma, steps=17)
        for a, e in zip(ledger.orders, ledger.eps_at_order):
            if float(a).is_integer():
                assert e == 17 * a / (2 * sigma**2)


def test_edge_values():
    assert rdp_step(0.0, 1.0, 4) == 0.0
    assert rdp_step(0.3, 0.0, 4) == math.inf
    assert epsilon_for(0.3, 0.0, 10, 1e-5) == math.inf
    assert to_epsilon_delta(RdpLedger(0.1, 1.0, 0), 1e-5).epsilon == 0.0
    with pytest.raises(ValueError):
        rdp_step(1.5, 1.0, 2)
    with pytest.raises(ValueError):
        rdp_step(0.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        to_epsilon_delta(RdpLedger(0.1, 1.0, 1), 0.0)


def test_steps_compose_additively():
    a = RdpLedger(0.02, 1.3, steps=40)
    b = RdpLedger(0.02, 1.3)
    for _ in range(40):
        b.step()
    assert np.array_equal(a.eps_at_order, b.eps_at_order)
    c = RdpLedger(0.02, 1.3, steps=15).step(25)
    assert np.array_equal(a.eps_at_order, c.eps_at_order)


def test_record_round_trip():
    ledger = RdpLedger(0.04, 1.7, steps=300)
    rec = json.loads(ledger.to_json(1e-5))
    back = RdpLedger.from_record(rec)
    assert back.steps == 300 and back.q == 0.04 and back.sigma == 1.7
    assert to_epsilon_delta(back, 1e-5).epsilon == rec["epsilon"]
    assert rec["argmin_order"] in DEFAULT_ORDERS


def test_conversion_is_minimum_over_orders():
    ledger = RdpLedger(0.05, 1.1, steps=200)
    spend = to_epsilon_delta(ledger, 1e-5)
    direct = min(e + math.log(1e5) / (a - 1) for a, e in zip(ledger.orders, ledger.eps_at_order))
    assert spend.epsilon == pytest.approx(direct, rel=1e-15)


def test_monotone_sweep():
    qs = [0.005, 0.02, 0.1, 0.4]
    sigmas = [0.7, 1.0, 2.0, 4.0]
    steps = [1, 10, 100, 1000]
    deltas = [1e-7, 1e-5, 1e-3]
    eps = np.array([[[[epsilon_for(q, s, t, d) for d in deltas] for t in steps] for s in sigmas] for q in qs])
    assert np.all(np.diff(eps, axis=0) >= 0)  # q up
    assert np.all(np.diff(eps, axis=1) <= 0)  # sigma up
    assert np.all(np.diff(eps, axis=2) >= 0)  # T up
    assert np.all(np.diff(eps, axis=3) <= 0)  # delta up


@settings(max_examples=60, deadline=None)
@given(st.floats(0.001, 0.5), st.floats(0.5, 5.0), st.sampled_from([1.5, 2.0, 3.0, 8.0, 20.0]))
def test_step_monotone_in_q_and_sigma(q, sigma, alpha):
    base = rdp_step(q, sigma, alpha)
    assert rdp_step(min(1.0, q * 1.5), sigma, alpha) >= base * (1 - 1e-9)
    assert rdp_step(q, sigma * 1.5, alpha) <= base * (1 + 1e-9)


@pytest.mark.parametrize("target", [0.5, 1.0, 3.0])
def test_noise_calibration(target):
    q, steps, delta = 64 / 1600, 125, 1 / 1600
    sigma = noise_multiplier_for(target, q, steps, delta)
    assert epsilon_for(q, sigma, steps, delta) <= target
    assert epsilon_for(q, sigma * (1 - 1e-4), steps, delta) > target


def test_gaussian_mechanism_sigma():
    assert gaussian_sigma_for(1.0, 1e-5, 2.0) == pytest.approx(2 * math.sqrt(2 * math.log(1.25e5)))
