"""Market primitives: model parameters, claim payoffs, utility and wealth.

Everything here is pure and deterministic. Parameter containers are frozen
dataclasses so they can be hashed and used as cache keys by the heavier
numerical layers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "MarketParams",
    "ClaimSpec",
    "Side",
    "PortfolioPoint",
    "ValidationReport",
    "no_claim",
    "linear_claim",
    "custom_claim",
    "discount_factor",
    "utility",
    "cash_value",
    "terminal_wealth",
    "validate_params",
]


@dataclass(frozen=True)
class MarketParams:
    """Market and preference constants.

    Parameters
    ----------
    mu : float
        Stock drift per year. Must exceed ``r``.
    sigma : float
        Volatility per sqrt-year, positive.
    r : float
        Money-market rate per year. ``r = 0`` is accepted (validation
        downgrades it to a warning); negative rates are rejected.
    T : float
        Horizon in years, positive.
    gamma : float
        Absolute risk aversion, positive.
    epsilon : float
        Proportional cost fraction in ``[0, 1)``. Zero is allowed so the
        frictionless limit can be evaluated directly; the lattice solver and
        the simulator require ``epsilon > 0``.
    """

    mu: float
    sigma: float
    r: float
    T: float
    gamma: float
    epsilon: float

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError("epsilon out of (0,1)")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        if self.T <= 0.0:
            raise ValueError("T must be positive")
        if self.r < 0.0:
            raise ValueError("negative interest rate not supported")
        if self.mu <= self.r:
            raise ValueError("mu must exceed r")

    @property
    def merton_cash(self) -> float:
        """Frictionless target cash position (mu - r) / (gamma sigma^2)."""
        return (self.mu - self.r) / (self.gamma * self.sigma**2)


class Side(enum.Enum):
    """Which optimization problem: plain investment or short one claim."""

    NO_CLAIM = "1"
    WITH_CLAIM = "w"

    def __str__(self):  # keeps CSV/CLI output compact
        return self.value


def _zero(S):
    return np.zeros_like(np.asarray(S, dtype=float))


@dataclass(frozen=True, eq=False)
class ClaimSpec:
    """European payoff with its first four derivatives.

    ``g`` through ``g4`` must be vectorized callables of the spot. For the
    built-in kinds they are attached by the factory helpers here and in
    :mod:`tcband.bsengine`; custom claims must supply all four derivative
    evaluators themselves, the library never differentiates user payoffs
    numerically.
    """

    kind: str  # none | mollified_call | mollified_put | linear | custom
    K: float = float("nan")
    delta_T: float = float("nan")
    coeff: float = float("nan")
    g: Callable = field(default=_zero, repr=False)
    g1: Callable = field(default=_zero, repr=False)
    g2: Callable = field(default=_zero, repr=False)
    g3: Callable = field(default=_zero, repr=False)
    g4: Callable = field(default=_zero, repr=False)
    # rate/vol the mollified closed forms were built with (cache key part)
    mollify_r: float = float("nan")
    mollify_sigma: float = float("nan")

    def __post_init__(self):
        kinds = {"none", "mollified_call", "mollified_put", "linear", "custom"}
        if self.kind not in kinds:
            raise ValueError(f"unknown claim kind {self.kind!r}")
        if self.kind in ("mollified_call", "mollified_put"):
            if not (self.K > 0.0):
                raise ValueError("strike must be positive")
            if not (self.delta_T > 0.0):
                raise ValueError("delta_T must be positive")

    @property
    def fingerprint(self) -> tuple:
        if self.kind == "custom":
            return ("custom", id(self.g), id(self.g1), id(self.g2))
        return (self.kind, self.K, self.delta_T, self.coeff,
                self.mollify_r, self.mollify_sigma)

    @property
    def anchor(self) -> float:
        """Reference spot scale for search grids (strike if there is one)."""
        return self.K if math.isfinite(self.K) else 1.0

    def __eq__(self, other):
        return isinstance(other, ClaimSpec) and self.fingerprint == other.fingerprint

    def __hash__(self):
        return hash(self.fingerprint)


def no_claim() -> ClaimSpec:
    return ClaimSpec(kind="none")


def linear_claim(coeff: float) -> ClaimSpec:
    """Payoff ``g(S) = coeff * S`` (replicable by holding ``coeff`` shares)."""
    if coeff < 0.0:
        raise ValueError("linear claim coefficient must be nonnegative")

    def g(S):
        return coeff * np.asarray(S, dtype=float)

    def g1(S):
        return np.full_like(np.asarray(S, dtype=float), coeff)

    return ClaimSpec(kind="linear", coeff=coeff, g=g, g1=g1)


def custom_claim(g, g1, g2, g3, g4, K: float = float("nan")) -> ClaimSpec:
    for name, fn in (("g", g), ("g1", g1), ("g2", g2), ("g3", g3), ("g4", g4)):
        if not callable(fn):
            raise ValueError(f"custom claim evaluator {name} must be callable")
    return ClaimSpec(kind="custom", K=K, g=g, g1=g1, g2=g2, g3=g3, g4=g4)


@dataclass(frozen=True)
class PortfolioPoint:
    """State (t, B, y, S): time, money market balance, shares, spot."""

    t: float
    B: float
    y: float
    S: float

    def __post_init__(self):
        if self.S <= 0.0:
            raise ValueError("spot price must be positive")
        if self.t < 0.0:
            raise ValueError("time must be nonnegative")


def discount_factor(p: MarketParams, s: float) -> float:
    """exp(-r (T - s)) for s in [0, T]."""
    if not (0.0 <= s <= p.T):
        raise ValueError(f"time {s} outside [0, {p.T}]")
    return math.exp(-p.r * (p.T - s))


def utility(x, gamma: float):
    """Exponential utility -exp(-gamma x); strictly increasing and concave."""
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    return -np.exp(-gamma * np.asarray(x, dtype=float))


def cash_value(y, S, epsilon: float):
    """Liquidation value (1 - epsilon sign(y)) y S of a share position."""
    y = np.asarray(y, dtype=float)
    S = np.asarray(S, dtype=float)
    return (1.0 - epsilon * np.sign(y)) * y * S


def terminal_wealth(p: MarketParams, pt: PortfolioPoint, claim: ClaimSpec,
                    side: Side) -> float:
    """Wealth at the horizon after liquidation and settlement.

    Without the claim this is ``B + c(y, S)``. With it, ``g'(S)`` shares are
    delivered physically and the cash residual ``g(S) - g'(S) S`` is paid, so
    only ``y - g'(S)`` shares go through the costly market.
    """
    if side is Side.WITH_CLAIM and claim.kind == "none":
        raise ValueError("side 'w' requires a claim")
    if not math.isclose(pt.t, p.T, rel_tol=0.0, abs_tol=1e-12):
        raise ValueError("terminal wealth is defined at t = T only")
    if side is Side.NO_CLAIM:
        return pt.B + float(cash_value(pt.y, pt.S, p.epsilon))
    gp = float(claim.g1(pt.S))
    residual = float(claim.g(pt.S)) - gp * pt.S
    return pt.B + float(cash_value(pt.y - gp, pt.S, p.epsilon)) - residual


# ---------------------------------------------------------------------------
# admissibility validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    """Outcome of the payoff-regularity and hedging-capacity checks."""

    bounds: dict
    a2_margin: float
    passed: bool
    warnings: list
    failures: list

    def summary(self) -> str:
        lines = []
        for name, val in self.bounds.items():
            lines.append(f"{name} = {val:.6g}")
        lines.append(f"capacity margin = {self.a2_margin:.6g}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        for f in self.failures:
            lines.append(f"FAIL: {f}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


# sups are attained near the strike for smooth payoffs; a log grid spanning
# four decades each side with 5% inflation is the estimation contract
_SUP_GRID_POINTS = 10_000
_SUP_DECADES = 4.0
_SUP_INFLATION = 1.05


def _sup_estimates(claim: ClaimSpec) -> tuple[dict, list]:
    """Numeric sup of the four payoff-regularity quantities."""
    failures: list[str] = []
    if claim.kind in ("none", "linear"):
        # g - g' S and all higher scaled derivatives vanish identically
        return (
            {
                "sup|g - g' S|": 0.0,
                "sup S^2 |g''|": 0.0,
                "sup |S^3 g'''|": 0.0,
                "sup S^4 |g''''|": 0.0,
            },
            failures,
        )

    anchor = claim.anchor
    S = np.logspace(math.log10(anchor) - _SUP_DECADES,
                    math.log10(anchor) + _SUP_DECADES, _SUP_GRID_POINTS)
    quantities = {
        "sup|g - g' S|": np.abs(claim.g(S) - claim.g1(S) * S),
        "sup S^2 |g''|": S**2 * np.abs(claim.g2(S)),
        "sup |S^3 g'''|": np.abs(S**3 * claim.g3(S)),
        "sup S^4 |g''''|": S**4 * np.abs(claim.g4(S)),
    }
    bounds = {}
    for name, vals in quantities.items():
        bad = ~np.isfinite(vals)
        if np.any(bad):
            failures.append(
                f"{name}: non-finite evaluator output at S = {S[bad][0]:.6g}")
            bounds[name] = float("inf")
        else:
            bounds[name] = float(vals.max()) * _SUP_INFLATION
    return bounds, failures


def validate_params(p: MarketParams, claim: ClaimSpec) -> ValidationReport:
    """Check payoff regularity and the hedging-capacity margin.

    The margin is ``exp(-r T)(mu - r)/(gamma sigma^2) - sup S^2 |g''|``;
    the expansion machinery needs it positive globally, although individual
    evaluations only require a nondegenerate band at the query point.
    """
    warnings: list[str] = []
    bounds, failures = _sup_estimates(claim)

    if p.r == 0.0:
        warnings.append("r = 0: accepted, outside the strictly-positive-rate model")
    if p.epsilon == 0.0:
        warnings.append("epsilon = 0: frictionless limit, band machinery degenerate")

    if claim.kind != "none":
        g_vals = claim.g(np.logspace(-2, 2, 101) * claim.anchor)
        if np.any(np.asarray(g_vals) < -1e-12):
            failures.append("payoff takes negative values")

    cap = math.exp(-p.r * p.T) * (p.mu - p.r) / (p.gamma * p.sigma**2)
    margin = cap - bounds["sup S^2 |g''|"]
    all_finite = all(math.isfinite(v) for v in bounds.values())
    passed = (not failures) and all_finite and margin > 0.0
    if all_finite and margin <= 0.0:
        failures.append(
            f"capacity margin nonpositive ({margin:.6g}): claim cash gamma "
            f"exceeds the frictionless target {cap:.6g}")
    return ValidationReport(bounds=bounds, a2_margin=margin, passed=passed,
                            warnings=warnings, failures=failures)
