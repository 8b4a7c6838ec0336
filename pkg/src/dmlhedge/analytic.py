"""Closed-form Black-Scholes quotes used as ground truth and as the hedging benchmark.

All functions accept scalars or numpy arrays and broadcast. The normal CDF is
``scipy.special.ndtr`` (erfc-based, absolute error far below 1e-12).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DomainError

__all__ = ["BsQuote", "norm_cdf", "norm_pdf", "bs_call", "bs_digital", "lognormal_pdf"]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def norm_cdf(x):
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class BsQuote:
    """Price, delta and standardized moneyness terms of a Black-Scholes quote.

    Fields are floats for scalar inputs and arrays otherwise. ``d1``/``d2`` are
    ``+inf``/``-inf`` in the zero-volatility limit.
    """

    price: float | np.ndarray
    delta: float | np.ndarray
    d1: float | np.ndarray
    d2: float | np.ndarray


def _unwrap(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _check_inputs(s, k, sigma, tau):
    if np.any(s <= 0):
        raise DomainError("spot must be positive")
    if np.any(k <= 0):
        raise DomainError("strike must be positive")
    if np.any(tau <= 0):
        raise DomainError("time to maturity must be positive")
    if np.any(sigma < 0):
        raise DomainError("volatility must be non-negative")


def _moneyness(s, k, sigma, tau, r):
    """Return (d1, d2, forward); d-terms are +-inf where sigma == 0."""
    forward = s * np.exp(r * tau)
    vol = sigma * np.sqrt(tau)
    log_fk = np.log(forward / k)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.where(vol > 0, (log_fk + 0.5 * vol * vol) / np.where(vol > 0, vol, 1.0), 0.0)
    # zero vol: sign of log-moneyness decides; at-the-forward maps to -inf (strict inequality)
    degenerate = np.where(log_fk > 0, np.inf, -np.inf)
    d1 = np.where(vol > 0, d1, degenerate)
    d2 = np.where(vol > 0, d1 - vol, degenerate)
    return d1, d2, forward


def bs_call(s, k, sigma, tau, r=0.0) -> BsQuote:
    """European call under Black-Scholes.

    ``sigma == 0`` degenerates to the discounted intrinsic value of the
    forward with delta in {0, 1}.
    """
    s, k, sigma, tau, r = (np.asarray(v, dtype=float) for v in (s, k, sigma, tau, r))
    _check_inputs(s, k, sigma, tau)
    d1, d2, _ = _moneyness(s, k, sigma, tau, r)
    disc = np.exp(-r * tau)
    price = s * ndtr(d1) - k * disc * ndtr(d2)
    delta = ndtr(d1)
    return BsQuote(_unwrap(np.maximum(price, 0.0)), _unwrap(delta), _unwrap(d1), _unwrap(d2))


def bs_digital(s, k, sigma, tau, r=0.0) -> BsQuote:
    """Cash-or-nothing digital call paying 1 if the spot ends strictly above ``k``."""
    s, k, sigma, tau, r = (np.asarray(v, dtype=float) for v in (s, k, sigma, tau, r))
    _check_inputs(s, k, sigma, tau)
    d1, d2, forward = _moneyness(s, k, sigma, tau, r)
    vol = sigma * np.sqrt(tau)
    if np.any((vol == 0) & np.isclose(forward, k, rtol=1e-15, atol=0.0)):
        raise DomainError("digital delta undefined at the strike with zero volatility")
    disc = np.exp(-r * tau)
    price = disc * ndtr(d2)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(vol > 0, disc * norm_pdf(np.where(vol > 0, d2, 0.0)) / (s * np.where(vol > 0, vol, 1.0)), 0.0)
    return BsQuote(_unwrap(price), _unwrap(delta), _unwrap(d1), _unwrap(d2))


def lognormal_pdf(z, s0, sigma, tau, r=0.0):
    """Density of the GBM spot at horizon ``tau`` started from ``s0``; zero for ``z <= 0``."""
    z = np.asarray(z, dtype=float)
    if sigma <= 0 or tau <= 0 or s0 <= 0:
        raise DomainError("lognormal density needs positive s0, sigma and tau")
    vol = sigma * np.sqrt(tau)
    mu = np.log(s0) + (r - 0.5 * sigma * sigma) * tau
    positive = z > 0
    zs = np.where(positive, z, 1.0)
    dens = np.exp(-0.5 * ((np.log(zs) - mu) / vol) ** 2) / (zs * vol * np.sqrt(2.0 * np.pi))
    return _unwrap(np.where(positive, dens, 0.0))
