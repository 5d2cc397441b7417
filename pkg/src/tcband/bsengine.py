"""Black-Scholes analytics up to fourth-order cash derivatives.

The mollified call/put payoffs used throughout are option prices with a
maturity extension ``delta_T``, so their claim value at an earlier time is
the same closed form with a longer time argument (maturity-shift identity).
Custom payoffs are valued by Gauss-Hermite quadrature of the risk-neutral
lognormal expectation, which is exact in the Gaussian variable.

Normal CDF goes through the complementary error function (``scipy.special``),
accurate to ~1e-15; fourth derivatives amplify CDF error, so no rational
approximations are used anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ndtr  # CDF via erfc, |abs err| <= 1e-15

from .errors import QuadratureError
from .market import ClaimSpec, MarketParams

__all__ = [
    "BsGreeks",
    "CallQuote",
    "bs_call",
    "bs_put",
    "mollified_call_claim",
    "mollified_put_claim",
    "claim_value",
    "cash_gamma_margin",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _npdf(x):
    return np.exp(-0.5 * np.asarray(x, dtype=float) ** 2) / _SQRT_2PI


def _d_pm(S, K, tau, r, sigma):
    S = np.asarray(S, dtype=float)
    vol = sigma * np.sqrt(tau)
    d_plus = (np.log(S / K) + (r + 0.5 * sigma**2) * tau) / vol
    return d_plus, d_plus - vol


@dataclass(frozen=True)
class CallQuote:
    price: float
    d_plus: float
    d_minus: float


def bs_call(S, K, tau, r, sigma):
    """European call price with its log-moneyness arguments.

    Requires ``tau > 0``; callers wanting the intrinsic value at expiry must
    say so explicitly rather than passing ``tau = 0``.
    """
    if np.any(np.asarray(tau) <= 0.0):
        raise ValueError("tau must be positive")
    if K <= 0.0 or sigma <= 0.0 or np.any(np.asarray(S) <= 0.0):
        raise ValueError("S, K, sigma must be positive")
    d_plus, d_minus = _d_pm(S, K, tau, r, sigma)
    price = np.asarray(S) * ndtr(d_plus) - K * math.exp(-r * tau) * ndtr(d_minus)
    if np.isscalar(price) or price.ndim == 0:
        return CallQuote(float(price), float(d_plus), float(d_minus))
    return CallQuote(price, d_plus, d_minus)


def bs_put(S, K, tau, r, sigma):
    quote = bs_call(S, K, tau, r, sigma)
    price = quote.price - np.asarray(S) + K * math.exp(-r * tau)
    if np.isscalar(price) or np.ndim(price) == 0:
        price = float(price)
    return CallQuote(price, quote.d_plus, quote.d_minus)


def _call_space_derivs(S, K, tau, r, sigma):
    """(value, dS, dSS, dSSS, dSSSS, dtau) of the call at time-to-expiry tau.

    All derivative chains go through the normal density analytically; the
    band-width source term squares the target slope, so differencing here
    would be too noisy near the strike.
    """
    S = np.asarray(S, dtype=float)
    d_plus, d_minus = _d_pm(S, K, tau, r, sigma)
    b = 1.0 / (sigma * np.sqrt(tau))
    phi = _npdf(d_plus)
    value = S * ndtr(d_plus) - K * np.exp(-r * tau) * ndtr(d_minus)
    dS = ndtr(d_plus)
    dSS = phi * b / S
    dSSS = -phi * b / S**2 * (d_plus * b + 1.0)
    dSSSS = phi * b / S**3 * ((d_plus * b) * (d_plus * b + 1.0) - b * b
                              + 2.0 * (d_plus * b + 1.0))
    dtau = 0.5 * S * phi * sigma / np.sqrt(tau) + r * K * np.exp(-r * tau) * ndtr(d_minus)
    return value, dS, dSS, dSSS, dSSSS, dtau


def _put_space_derivs(S, K, tau, r, sigma):
    v, dS, dSS, dSSS, dSSSS, dtau = _call_space_derivs(S, K, tau, r, sigma)
    S = np.asarray(S, dtype=float)
    disc = K * np.exp(-r * tau)
    # parity P = C - S + K e^{-r tau}; second and higher S-derivatives match
    return v - S + disc, dS - 1.0, dSS, dSSS, dSSSS, dtau - r * disc


def mollified_call_claim(K: float, delta_T: float, p: MarketParams) -> ClaimSpec:
    """Smooth call surrogate: the call price with extra maturity ``delta_T``."""
    r, sigma = p.r, p.sigma

    def g(S):
        return _call_space_derivs(S, K, delta_T, r, sigma)[0]

    def g1(S):
        return _call_space_derivs(S, K, delta_T, r, sigma)[1]

    def g2(S):
        return _call_space_derivs(S, K, delta_T, r, sigma)[2]

    def g3(S):
        return _call_space_derivs(S, K, delta_T, r, sigma)[3]

    def g4(S):
        return _call_space_derivs(S, K, delta_T, r, sigma)[4]

    return ClaimSpec(kind="mollified_call", K=K, delta_T=delta_T,
                     g=g, g1=g1, g2=g2, g3=g3, g4=g4,
                     mollify_r=r, mollify_sigma=sigma)


def mollified_put_claim(K: float, delta_T: float, p: MarketParams) -> ClaimSpec:
    r, sigma = p.r, p.sigma

    def g(S):
        return _put_space_derivs(S, K, delta_T, r, sigma)[0]

    def g1(S):
        return _put_space_derivs(S, K, delta_T, r, sigma)[1]

    def g2(S):
        return _put_space_derivs(S, K, delta_T, r, sigma)[2]

    def g3(S):
        return _put_space_derivs(S, K, delta_T, r, sigma)[3]

    def g4(S):
        return _put_space_derivs(S, K, delta_T, r, sigma)[4]

    return ClaimSpec(kind="mollified_put", K=K, delta_T=delta_T,
                     g=g, g1=g1, g2=g2, g3=g3, g4=g4,
                     mollify_r=r, mollify_sigma=sigma)


@dataclass(frozen=True)
class BsGreeks:
    """Claim value and cash-scaled spot derivatives at one point (S, t)."""

    V0: float
    cash_delta: float   # S dV/dS
    cash_gamma: float   # S^2 d2V/dS2
    cash_speed: float   # S^3 d3V/dS3
    cash_fourth: float  # S^4 d4V/dS4
    theta: float        # dV/dt


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh_rule(n: int):
    if n not in _GH_CACHE:
        x, w = np.polynomial.hermite.hermgauss(n)
        _GH_CACHE[n] = (x, w / math.sqrt(math.pi))
    return _GH_CACHE[n]


def _lognormal_expect(fn, S, tau, r, sigma, n):
    """E[fn(S_T)] under the r-drift lognormal over horizon tau (broadcast)."""
    x, w = _gh_rule(n)
    z = math.sqrt(2.0) * x
    S_b, tau_b = np.broadcast_arrays(np.asarray(S, dtype=float),
                                     np.asarray(tau, dtype=float))
    S_T = S_b[..., None] * np.exp((r - 0.5 * sigma**2) * tau_b[..., None]
                                  + sigma * np.sqrt(tau_b)[..., None] * z)
    return np.asarray(fn(S_T)) @ w


def _custom_greeks(claim: ClaimSpec, p: MarketParams, S, t, n_nodes, rtol):
    tau = p.T - np.asarray(t, dtype=float)
    disc = np.exp(-p.r * tau)
    evaluators = (claim.g,
                  lambda v: v * claim.g1(v),
                  lambda v: v**2 * claim.g2(v),
                  lambda v: v**3 * claim.g3(v),
                  lambda v: v**4 * claim.g4(v))
    out = []
    for fn in evaluators:
        est = disc * _lognormal_expect(fn, S, tau, p.r, p.sigma, n_nodes)
        ref = disc * _lognormal_expect(fn, S, tau, p.r, p.sigma, 2 * n_nodes)
        scale = np.maximum(np.abs(ref), 1.0)
        err = np.max(np.abs(ref - est) / scale)
        if err > rtol:
            raise QuadratureError(
                f"claim quadrature not converged (rel change {err:.3g})",
                estimate=ref, error_bound=err)
        out.append(ref)
    return (*out, None)


def claim_value(claim: ClaimSpec, p: MarketParams, S, t,
                n_nodes: int = 64, rtol: float = 1e-9) -> BsGreeks:
    """Frictionless claim value and cash derivatives at (S, t).

    Mollified kinds use the maturity-shifted closed form; linear claims are
    exact; custom payoffs go through 64-node Gauss-Hermite quadrature with a
    node-doubling convergence check. ``S`` and ``t`` broadcast together.
    """
    if np.any(np.asarray(S) <= 0.0):
        raise ValueError("spot must be positive")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > p.T):
        raise ValueError(f"time outside [0, {p.T}]")
    S_arr = np.asarray(S, dtype=float)
    scalar = S_arr.ndim == 0 and t_arr.ndim == 0

    if claim.kind == "none":
        z = np.zeros(np.broadcast(S_arr, t_arr).shape)
        vals = (z, z, z, z, z, z)
    elif claim.kind == "linear":
        v = claim.coeff * S_arr + np.zeros(np.broadcast(S_arr, t_arr).shape)
        z = np.zeros_like(v)
        vals = (v, v.copy(), z, z, z, z)
    elif claim.kind in ("mollified_call", "mollified_put"):
        tau_g = claim.delta_T + (p.T - t_arr)
        derivs = (_call_space_derivs if claim.kind == "mollified_call"
                  else _put_space_derivs)
        v, dS, dSS, dSSS, dSSSS, dtau = derivs(S_arr, claim.K, tau_g, p.r, p.sigma)
        vals = (v, S_arr * dS, S_arr**2 * dSS, S_arr**3 * dSSS,
                S_arr**4 * dSSSS, -dtau)
    elif claim.kind == "custom":
        v, cd, cg, cs, cf, _ = _custom_greeks(claim, p, S_arr, t_arr,
                                              n_nodes, rtol)
        theta = p.r * v - p.r * cd - 0.5 * p.sigma**2 * cg
        vals = (v, cd, cg, cs, cf, theta)
    else:  # pragma: no cover - guarded by ClaimSpec
        raise ValueError(claim.kind)

    if scalar:
        return BsGreeks(*(float(x) for x in vals))
    return BsGreeks(*vals)


def _sup_cash_gamma(claim: ClaimSpec, p: MarketParams) -> float:
    """sup over S of S^2 |g''(S)|, refined by golden-section in log-spot."""
    if claim.kind in ("none", "linear"):
        return 0.0
    anchor = claim.anchor

    def neg(logS):
        S = math.exp(logS)
        return -abs(S * S * float(claim.g2(S)))

    span = (math.log(anchor) - 4.0 * math.log(10.0),
            math.log(anchor) + 4.0 * math.log(10.0))
    grid = np.linspace(span[0], span[1], 512)
    vals = np.array([-neg(x) for x in grid])
    i = int(np.argmax(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    return max(float(-res.fun), float(vals[i]))


def cash_gamma_margin(claim: ClaimSpec, p: MarketParams) -> float:
    """Frictionless cash target minus the claim's worst cash gamma.

    Positive means the hedging turnover stays controlled everywhere; a
    negative value is a legitimate (failing) answer, not an error.
    """
    cap = math.exp(-p.r * p.T) * (p.mu - p.r) / (p.gamma * p.sigma**2)
    return cap - _sup_cash_gamma(claim, p)
