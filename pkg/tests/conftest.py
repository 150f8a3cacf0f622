"""Shared fixtures and independent oracles for the test suite."""

import math

import numpy as np
import pytest

from hedgegame.model import FinanceSpec, make_finance_model, make_payoff


def norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def bs_call(spot: float, strike: float, vol: float, tau: float, rate: float = 0.0) -> float:
    """Black-Scholes call value, the closed-form pricing oracle."""
    if tau <= 0.0:
        return max(spot - strike, 0.0)
    sq = vol * math.sqrt(tau)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * tau) / sq
    d2 = d1 - sq
    return spot * norm_cdf(d1) - strike * math.exp(-rate * tau) * norm_cdf(d2)


def bs_call_spread(spot, k1, k2, vol, tau, rate=0.0):
    return bs_call(spot, k1, vol, tau, rate) - bs_call(spot, k2, vol, tau, rate)


def bs_call_delta_logspace(spot, strike, vol, tau, rate=0.0):
    """d(value)/d(log S) = S * N(d1) for a call."""
    sq = vol * math.sqrt(tau)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * tau) / sq
    return spot * norm_cdf(d1)


def constant_rate(value: float):
    return lambda t, x, a: np.full(np.asarray(x).shape[:-1], float(value))


def constant_mu(dim: int, value: float = 0.0):
    return lambda t, x, a: np.full(np.asarray(x).shape[:-1] + (dim,), float(value))


def sigma_from_a(dim: int):
    """Volatility matrix a[0] * I, the uncertain-volatility family."""

    def sigma(t, x, a):
        s = float(np.asarray(a).reshape(-1)[0])
        return np.broadcast_to(s * np.eye(dim), np.asarray(x).shape[:-1] + (dim, dim))

    return sigma


def finance_spec(dim=1, mu=0.0, r_lend=0.0, r_borrow=0.0):
    return FinanceSpec(
        mu=constant_mu(dim, mu),
        sigma=sigma_from_a(dim),
        r_lend=constant_rate(r_lend),
        r_borrow=constant_rate(r_borrow),
    )


def bs_singleton_model(vol=0.2, strike=1.0, cap=1.4, T=1.0, payoff_kind="call_spread"):
    """Single-volatility zero-rate market with a spread (or other) payoff."""
    if payoff_kind == "call_spread":
        payoff = make_payoff("call_spread", strike=strike, cap=cap)
    else:
        payoff = make_payoff(payoff_kind, strike=strike)
    return make_finance_model(
        finance_spec(), payoff, dim=1, A_points=[np.array([vol])],
        horizon_T=T, lipschitz_K=vol,
    )


def uncertain_vol_model(vols=(0.1, 0.3), payoff_kind="call", strike=1.0, T=1.0,
                        r_lend=0.0, r_borrow=0.0, dim=1):
    payoff = make_payoff(payoff_kind, strike=strike)
    return make_finance_model(
        finance_spec(dim=dim, r_lend=r_lend, r_borrow=r_borrow),
        payoff, dim=dim,
        A_points=[np.array([v]) for v in vols],
        horizon_T=T, lipschitz_K=max(vols),
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)
