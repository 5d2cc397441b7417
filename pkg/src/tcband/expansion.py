"""Small-cost expansion: band geometry, envelopes and indifference prices.

The value function of either problem side factors into exp(-gamma B / delta)
times a reduced function of (S, y, t). Around the frictionless share target
this reduced function is approximated by lower/upper envelopes

    log Q_pm = -gamma S y / delta + base + eps^(2/3) corr
               + eps buffer_pm + eps^(4/3) curve(S, W, t),

valid inside the no-trade band |y - target| <= eps^(1/3) * width, and
extended outside by the exact buy/sell gradient equalities. ``W`` denotes
the band-scaled offset (y - target) / eps^(1/3). Fractional powers of the
(possibly negative) target slope are taken through real cube roots, which is
the unique reading that makes the curve term's edge identities exact.

All evaluators broadcast over numpy arrays in (S, y, t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsengine import claim_value
from .costfield import correction_field
from .errors import DegenerateBandError
from .market import ClaimSpec, MarketParams, Side, no_claim

__all__ = [
    "NoTradeBand",
    "BandProfile",
    "ExpansionBundle",
    "PriceResult",
    "ValueResult",
    "Expansion",
    "get_expansion",
    "merton_target",
    "no_trade_band",
    "cost_correction",
    "cost_correction_cash_slope",
    "time_buffer",
    "band_profile",
    "envelope_value",
    "expansion_value",
    "indifference_price",
]


@dataclass(frozen=True)
class NoTradeBand:
    """Band geometry at one (S, t): target, width scale and edges."""

    y_star: float
    Y: float          # half-width before the eps^(1/3) scaling
    y_minus: float
    y_plus: float


@dataclass(frozen=True)
class BandProfile:
    """In-band curvature term and its partial derivatives at (S, W, t)."""

    value: float
    dW: float
    dWW: float
    dS: float
    dWS: float
    dSS: float
    dt: float


@dataclass(frozen=True)
class ExpansionBundle:
    """Everything needed to evaluate the envelopes at one point."""

    base: float          # order-1 log-value term
    corr: float          # eps^(2/3) coefficient
    corr_cash_slope: float
    buffer_plus: float   # eps coefficient, lower envelope
    buffer_minus: float
    buffer_slope: float  # its linear-in-time slope constant
    buffer_base: float   # its terminal constant
    profile: BandProfile


@dataclass(frozen=True)
class PriceResult:
    price: float
    V0: float
    correction: float
    error_order: str = "O(epsilon)"


@dataclass(frozen=True)
class ValueResult:
    value: float
    certainty_equivalent: float
    error_order: str = "O(epsilon)"


def _pow23(x):
    """x^(2/3) through the real cube root (nonnegative for all real x)."""
    return np.cbrt(x) ** 2


class Expansion:
    """Envelope machinery for one (market, claim, side) triple.

    Heavy things (the correction field, the buffer slope constant) are
    computed lazily and cached on the instance; instances themselves are
    cached by :func:`get_expansion`. All evaluations are pure.
    """

    def __init__(self, p: MarketParams, claim: ClaimSpec, side: Side,
                 corr_backend: str = "auto",
                 m_grid: tuple = (64, 32, 17), **corr_kwargs):
        if side is Side.WITH_CLAIM and claim.kind == "none":
            raise ValueError("side 'w' requires a claim")
        self.p = p
        self.claim = claim
        self.side = side
        self._corr_backend = corr_backend
        self._corr_kwargs = corr_kwargs
        self._m_grid = m_grid
        self._corr = None
        self._m_const = None

    # -- plumbing -----------------------------------------------------------
    @property
    def corr(self):
        if self._corr is None:
            self._corr = correction_field(self.p, self.claim, self.side,
                                          backend=self._corr_backend,
                                          **self._corr_kwargs)
        return self._corr

    def delta(self, t):
        return np.exp(-self.p.r * (self.p.T - np.asarray(t, dtype=float)))

    def _greeks(self, S, t):
        c = self.claim if self.side is Side.WITH_CLAIM else no_claim()
        return claim_value(c, self.p, S, t)

    def _field(self, S, t, with_corr_derivs: bool = False) -> dict:
        """All per-(S, t) scalars the envelopes are assembled from."""
        p = self.p
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        d = self.delta(t)
        a0 = p.merton_cash
        g = self._greeks(S, t)
        v0_s = g.cash_delta / S
        v0_ss = g.cash_gamma / S**2
        v0_sss = g.cash_speed / S**3
        v0_ssss = g.cash_fourth / S**4
        v0_st = (-0.5 * p.sigma**2 * g.cash_speed
                 - (p.r + p.sigma**2) * g.cash_gamma) / S
        v0_sst = (-0.5 * p.sigma**2 * g.cash_fourth
                  - (p.r + 2.0 * p.sigma**2) * g.cash_speed
                  - (p.r + p.sigma**2) * g.cash_gamma) / S**2
        f = {
            "d": d,
            "y_star": d * a0 / S + v0_s,
            "u": -d * a0 / S**2 + v0_ss,
            "u_S": 2.0 * d * a0 / S**3 + v0_sss,
            "u_SS": -6.0 * d * a0 / S**4 + v0_ssss,
            "y_star_t": p.r * d * a0 / S + v0_st,
            "u_t": -p.r * d * a0 / S**2 + v0_sst,
        }
        k0 = (p.mu - p.r) ** 2 / (2.0 * p.sigma**2)
        zero = np.zeros(np.broadcast(S, t).shape)
        f["base"] = -k0 * (p.T - t) + p.gamma / d * g.V0
        f["base_S"] = p.gamma / d * v0_s
        f["base_SS"] = p.gamma / d * v0_ss
        f["base_t"] = k0 + p.gamma / d * (g.theta - p.r * g.V0) + zero
        f["corr"] = np.asarray(self.corr.value(S, t))
        if with_corr_derivs:
            f["corr_S"] = np.asarray(self.corr.slope(S, t))
            f["corr_SS"] = np.asarray(self.corr.curvature(S, t))
            f["corr_t"] = np.asarray(self.corr.t_deriv(S, t))
        return f

    # -- target and band geometry ---------------------------------------------
    def target(self, S, t):
        f = self._field(S, t)
        return f["y_star"]

    def target_parts(self, S, t):
        """(y*, u=dy*/dS, du/dS, d2u/dS2, dy*/dt, du/dt)."""
        f = self._field(S, t)
        return (f["y_star"], f["u"], f["u_S"], f["u_SS"], f["y_star_t"],
                f["u_t"])

    def width_scale(self, S, t, u=None):
        if u is None:
            u = self._field(S, t)["u"]
        S = np.asarray(S, dtype=float)
        if np.any(u == 0.0):
            raise DegenerateBandError(
                "target slope vanishes: no-trade band has zero width")
        return np.cbrt(1.5 * S * self.delta(t) * u * u / self.p.gamma)

    def band(self, S, t) -> NoTradeBand:
        f = self._field(S, t)
        y_star, u = f["y_star"], f["u"]
        Y = self.width_scale(S, t, u=u)
        if not np.all(np.asarray(S) * Y > 0.0):
            raise DegenerateBandError("band cash width is not positive")
        half = self.p.epsilon ** (1.0 / 3.0) * Y
        if np.ndim(S) == 0 and np.ndim(t) == 0:
            return NoTradeBand(float(y_star), float(Y),
                               float(y_star - half), float(y_star + half))
        return NoTradeBand(y_star, Y, y_star - half, y_star + half)

    def base(self, S, t):
        return self._field(S, t)["base"]

    # -- buffer constants -------------------------------------------------------
    @property
    def buffer_base(self) -> float:
        p = self.p
        return 4.0 * math.exp(p.r * p.T) * (p.mu - p.r) / p.sigma**2 + 2.0

    @property
    def buffer_slope(self) -> float:
        """Padded grid sup of the order-eps drift terms the buffer must beat."""
        if self._m_const is None:
            self._m_const = self._compute_buffer_slope()
        return self._m_const

    def _compute_buffer_slope(self) -> float:
        p = self.p
        n_s, n_t, n_w = self._m_grid
        anchor = self.claim.anchor if self.side is Side.WITH_CLAIM else 1.0
        S = anchor * np.logspace(-2, 2, n_s)
        fr = np.linspace(-1.0, 1.0, n_w)
        worst = 0.0
        for t in np.linspace(0.0, p.T, n_t):
            d = float(self.delta(t))
            f = self._field(S, t)
            u, u_S = f["u"], f["u_S"]
            ok = np.abs(S * S * u) > 1e-10
            if not np.any(ok):
                continue
            Sk, uk, u_Sk = S[ok], u[ok], u_S[ok]
            Y = np.cbrt(1.5 * Sk * d * uk * uk / p.gamma)
            A = _pow23(1.5 * p.gamma**2 * Sk / (d * d * uk))
            corr_slope = np.asarray(self.corr.slope(Sk, t))
            W = fr[None, :] * Y[:, None]
            dW = W * A[:, None] - p.gamma**2 * W**3 / (3.0 * d * d * uk[:, None] ** 2)
            dWS = (2.0 * W * A[:, None] / 3.0) \
                * (1.0 / Sk[:, None] - u_Sk[:, None] / uk[:, None]) \
                + 2.0 * p.gamma**2 * W**3 * u_Sk[:, None] \
                / (3.0 * d * d * uk[:, None] ** 3)
            expr = (p.sigma**2 * Sk[:, None] ** 2 * p.gamma * W
                    * corr_slope[:, None] / d
                    - p.sigma**2 * Sk[:, None] * uk[:, None] * dW
                    + p.sigma**2 * Sk[:, None] ** 2 * uk[:, None] * dWS)
            worst = max(worst, float(np.max(np.abs(expr))))
        return 1.1 * (worst + 1.0)

    def buffer(self, t, sign: int):
        """Order-eps log-value buffer; sign +1 is the lower envelope."""
        return -sign * (self.buffer_slope * (self.p.T - t) + self.buffer_base)

    # -- in-band curvature term ---------------------------------------------
    def profile_arrays(self, S, W, t, f: dict | None = None):
        """Curvature term and partials; W may exceed the band (caller guards)."""
        p = self.p
        S = np.asarray(S, dtype=float)
        W = np.asarray(W, dtype=float)
        if f is None:
            f = self._field(S, t)
        d, u, u_S, u_SS, u_t = f["d"], f["u"], f["u_S"], f["u_SS"], f["u_t"]
        if np.any(u == 0.0):
            raise DegenerateBandError(
                "target slope vanishes: curvature term undefined")
        A = _pow23(1.5 * p.gamma**2 * S / (d * d * u))
        g2 = p.gamma**2
        rat = u_S / u
        value = 0.5 * W**2 * A - g2 * W**4 / (12.0 * d * d * u * u)
        dW = W * A - g2 * W**3 / (3.0 * d * d * u * u)
        dWW = A - g2 * W**2 / (d * d * u * u)
        dS = (W**2 * A / 3.0) * (1.0 / S - rat) + g2 * W**4 * u_S / (6.0 * d * d * u**3)
        dWS = (2.0 * W * A / 3.0) * (1.0 / S - rat) \
            + 2.0 * g2 * W**3 * u_S / (3.0 * d * d * u**3)
        dSS = (-W**2 * A / (9.0 * S**2)
               - 4.0 * W**2 * A * rat / (9.0 * S)
               + (W**2 * A / 3.0) * ((5.0 / 3.0) * rat**2 - u_SS / u)
               + g2 * W**4 / (6.0 * d * d * u**3) * (u_SS - 3.0 * u_S**2 / u))
        dt = (-0.5 * W**2 * A * ((4.0 / 3.0) * p.r + (2.0 / 3.0) * u_t / u)
              + g2 * W**4 / (12.0 * d * d * u * u) * (2.0 * p.r + 2.0 * u_t / u))
        return value, dW, dWW, dS, dWS, dSS, dt

    def profile(self, S, W, t) -> BandProfile:
        Y = self.width_scale(S, t)
        if abs(W) > Y * (1.0 + 1e-12):
            raise ValueError(
                f"band offset {W} outside the closed band of half-width {Y}")
        vals = self.profile_arrays(S, W, t)
        return BandProfile(*(float(v) for v in vals))

    def bundle(self, S, W, t) -> ExpansionBundle:
        f = self._field(S, t)
        return ExpansionBundle(
            base=float(f["base"]),
            corr=float(f["corr"]),
            corr_cash_slope=float(self.corr.s_slope(S, t)),
            buffer_plus=float(self.buffer(t, +1)),
            buffer_minus=float(self.buffer(t, -1)),
            buffer_slope=self.buffer_slope,
            buffer_base=self.buffer_base,
            profile=self.profile(S, W, t),
        )

    # -- envelopes ------------------------------------------------------------
    def _log_envelope_from(self, f: dict, S, y, t, sign: int):
        p = self.p
        S = np.asarray(S, dtype=float)
        y = np.asarray(y, dtype=float)
        d, y_star, u = f["d"], f["y_star"], f["u"]
        eps13 = p.epsilon ** (1.0 / 3.0)
        if p.epsilon > 0.0:
            Y = self.width_scale(S, t, u=u)
            y_lo, y_hi = y_star - eps13 * Y, y_star + eps13 * Y
        else:
            y_lo = y_hi = y_star
        y_cl = np.clip(y, y_lo, y_hi)
        excess = y - y_cl
        rate = np.where(excess < 0.0, 1.0 + p.epsilon, 1.0 - p.epsilon) \
            * p.gamma * S / d
        if p.epsilon > 0.0:
            W = (y_cl - y_star) / eps13
            curve = self.profile_arrays(S, W, t, f=f)[0]
        else:
            curve = 0.0
        core = (-p.gamma * S * y_cl / d
                + f["base"]
                + p.epsilon ** (2.0 / 3.0) * f["corr"]
                + p.epsilon * self.buffer(t, sign)
                + p.epsilon ** (4.0 / 3.0) * curve)
        return core - rate * excess

    def log_envelope(self, S, y, t, sign: int):
        """log of the envelope at (S, y, t), any region, broadcastable."""
        return self._log_envelope_from(self._field(S, t), S, y, t, sign)

    def envelope(self, S, y, t, sign: int):
        out = np.exp(self.log_envelope(S, y, t, sign))
        if np.ndim(out) == 0:
            return float(out)
        return out

    def region(self, S, y, t) -> str:
        b = self.band(S, t)
        if y < b.y_minus:
            return "buy"
        if y > b.y_plus:
            return "sell"
        return "nt"

    # -- generator residual inside the band -----------------------------------
    def _brackets_from(self, f: dict, S, W, t, sign: int):
        """(T_t, T_S, T_SS2) of log Q_pm inside the band."""
        p = self.p
        S = np.asarray(S, dtype=float)
        W = np.asarray(W, dtype=float)
        eps = p.epsilon
        d = f["d"]
        _, dW, dWW, dS, dWS, dSS, dt_ = self.profile_arrays(S, W, t, f=f)
        y_here = f["y_star"] + eps ** (1.0 / 3.0) * W
        T_t = (p.r * p.gamma * S * y_here / d + f["base_t"]
               + eps ** (2.0 / 3.0) * f["corr_t"]
               + eps * sign * self.buffer_slope
               + eps ** (4.0 / 3.0) * dt_
               - eps * f["y_star_t"] * dW)
        T_S = (-p.gamma * y_here / d + f["base_S"]
               + eps ** (2.0 / 3.0) * f["corr_S"]
               + eps ** (4.0 / 3.0) * dS
               - eps * f["u"] * dW)
        T_SS2 = (f["base_SS"]
                 + eps ** (2.0 / 3.0) * f["corr_SS"]
                 - eps * f["u_S"] * dW
                 + eps ** (4.0 / 3.0) * dSS
                 - 2.0 * eps * f["u"] * dWS
                 + eps ** (2.0 / 3.0) * f["u"] ** 2 * dWW)
        return T_t, T_S, T_SS2

    def gen_residual(self, S, W, t, sign: int):
        """(Q_t + mu S Q_S + sigma^2 S^2 Q_SS / 2) / Q inside the band."""
        p = self.p
        S = np.asarray(S, dtype=float)
        f = self._field(S, t, with_corr_derivs=True)
        T_t, T_S, T_SS2 = self._brackets_from(f, S, W, t, sign)
        return T_t + p.mu * S * T_S + 0.5 * p.sigma**2 * S**2 * (T_S**2 + T_SS2)

    # -- full partial sets (region aware, broadcastable) -----------------------
    def _edge_motion(self, f: dict, S, t, which: int):
        """(y_edge, dy/dS, d2y/dS2, dy/dt) of a band edge (-1 low, +1 high)."""
        p = self.p
        S = np.asarray(S, dtype=float)
        u, u_S, u_SS, u_t = f["u"], f["u_S"], f["u_SS"], f["u_t"]
        Y = self.width_scale(S, t, u=u)
        phi_S = (1.0 / S + 2.0 * u_S / u) / 3.0
        phi_SS = (-1.0 / S**2 + 2.0 * (u_SS * u - u_S**2) / (u * u)) / 3.0
        phi_t = (p.r + 2.0 * u_t / u) / 3.0
        eps13 = p.epsilon ** (1.0 / 3.0)
        return (f["y_star"] + which * eps13 * Y,
                u + which * eps13 * Y * phi_S,
                u_S + which * eps13 * Y * (phi_S**2 + phi_SS),
                f["y_star_t"] + which * eps13 * Y * phi_t)

    def partials_region(self, S, y, t, sign: int, region: str) -> dict:
        """Envelope value and partials, taking the given region's formulas.

        At a band edge this yields the one-sided limit from that region.
        Arrays broadcast; scalars come back as floats.
        """
        p = self.p
        S = np.asarray(S, dtype=float)
        y = np.asarray(y, dtype=float)
        f = self._field(S, t, with_corr_derivs=True)
        d = f["d"]
        scalar = np.broadcast(S, y, np.asarray(t)).shape == ()

        if region == "nt":
            eps13 = p.epsilon ** (1.0 / 3.0)
            W = (y - f["y_star"]) / eps13 if p.epsilon > 0.0 \
                else np.zeros(np.broadcast(S, y).shape)
            q = np.exp(self._log_envelope_from(f, S, y, t, sign))
            T_t, T_S, T_SS2 = self._brackets_from(f, S, W, t, sign)
            _, dW, dWW, _, dWS, _, _ = self.profile_arrays(S, W, t, f=f)
            ky = -p.gamma * S / d + p.epsilon * dW
            out = {
                "q": q,
                "q_y": ky * q,
                "q_S": T_S * q,
                "q_t": T_t * q,
                "q_yy": (p.epsilon ** (2.0 / 3.0) * dWW + ky * ky) * q,
                "q_yS": (-p.gamma / d + p.epsilon * dWS
                         - p.epsilon ** (2.0 / 3.0) * dWW * f["u"]) * q
                        + ky * T_S * q,
                "q_SS": (T_S * T_S + T_SS2) * q,
            }
        elif region in ("buy", "sell"):
            which = -1 if region == "buy" else +1
            # gamma (1+eps) S / delta buying, gamma (1-eps) S / delta selling
            k = p.gamma * (1.0 - which * p.epsilon) * S / d
            y_e, y_e_S, y_e_SS, y_e_t = self._edge_motion(f, S, t, which)
            a = self.partials_region(S, y_e, t, sign, "nt")
            growth = np.exp(-k * (y - y_e))
            q = growth * a["q"]
            kS = k / S
            g_S = -kS * (y - y_e) + k * y_e_S
            g_t = p.r * k * (y - y_e) + k * y_e_t
            dq_a_S = a["q_S"] + a["q_y"] * y_e_S
            out = {
                "q": q,
                "q_y": -k * q,
                "q_yy": k * k * q,
                "q_S": g_S * q + growth * dq_a_S,
                "q_t": g_t * q + growth * (a["q_t"] + a["q_y"] * y_e_t),
            }
            out["q_yS"] = -kS * q - k * out["q_S"]
            out["q_SS"] = ((2.0 * kS * y_e_S + k * y_e_SS) * q
                           + 2.0 * growth * dq_a_S * g_S
                           + g_S * g_S * q
                           + growth * (a["q_SS"] + 2.0 * a["q_yS"] * y_e_S
                                       + a["q_yy"] * y_e_S**2
                                       + a["q_y"] * y_e_SS))
        else:
            raise ValueError(f"unknown region {region!r}")
        out["region"] = region
        if scalar:
            out = {k2: (float(v) if k2 != "region" else v)
                   for k2, v in out.items()}
        return out

    def partials(self, S, y, t, sign: int, region: str | None = None) -> dict:
        """Scalar convenience wrapper with automatic region dispatch."""
        if region is None:
            region = self.region(S, y, t)
        return self.partials_region(S, y, t, sign, region)


_EXPANSIONS: dict = {}


def get_expansion(p: MarketParams, claim: ClaimSpec, side: Side,
                  corr_backend: str = "auto", **kwargs) -> Expansion:
    """Cached Expansion instances keyed by the full problem fingerprint."""
    key = (p, claim.fingerprint, side, corr_backend, tuple(sorted(kwargs.items())))
    inst = _EXPANSIONS.get(key)
    if inst is None:
        inst = Expansion(p, claim, side, corr_backend=corr_backend, **kwargs)
        _EXPANSIONS[key] = inst
    return inst


# -- thin operation wrappers -------------------------------------------------

def merton_target(p, claim, side, S, t):
    """Frictionless optimal share count at (S, t)."""
    out = get_expansion(p, claim, side).target(S, t)
    return float(out) if np.ndim(S) == 0 and np.ndim(t) == 0 else out


def no_trade_band(p, claim, side, S, t) -> NoTradeBand:
    return get_expansion(p, claim, side).band(S, t)


def cost_correction(p, claim, side, S, t, backend: str = "auto"):
    """The eps^(2/3) log-value correction at (S, t)."""
    out = get_expansion(p, claim, side, corr_backend=backend).corr.value(S, t)
    return float(out) if np.ndim(S) == 0 and np.ndim(t) == 0 else out


def cost_correction_cash_slope(p, claim, side, S, t, backend: str = "auto"):
    """S times the spot-slope of the correction (bounded on compacts)."""
    out = get_expansion(p, claim, side, corr_backend=backend).corr.s_slope(S, t)
    return float(out) if np.ndim(S) == 0 and np.ndim(t) == 0 else out


def time_buffer(p, claim, side, t, sign: int):
    """(buffer value, slope constant, terminal constant) at time t."""
    exp = get_expansion(p, claim, side)
    return exp.buffer(t, sign), exp.buffer_slope, exp.buffer_base


def band_profile(p, claim, side, S, W, t) -> BandProfile:
    return get_expansion(p, claim, side).profile(S, W, t)


def envelope_value(p, claim, side, S, y, t, sign: int):
    """Lower (sign=+1) or upper (sign=-1) envelope of the reduced value."""
    return get_expansion(p, claim, side).envelope(S, y, t, sign)


def expansion_value(p, claim, side, t, B, y, S) -> ValueResult:
    """Expanded utility value and its certainty equivalent.

    The order-eps remainder is not included; ``error_order`` records that.
    """
    exp = get_expansion(p, claim, side)
    d = float(exp.delta(t))
    logq = (-p.gamma * S * y / d + float(exp.base(S, t))
            + p.epsilon ** (2.0 / 3.0) * float(exp.corr.value(S, t)))
    value = -math.exp(-p.gamma * B / d + logq)
    ce = B + S * y - (d / p.gamma) * (logq + p.gamma * S * y / d)
    return ValueResult(value=value, certainty_equivalent=ce)


def indifference_price(p, claim, S, t, backend: str = "auto") -> PriceResult:
    """Claim price to leading orders: frictionless value plus correction."""
    v0 = float(claim_value(claim, p, S, t).V0)
    if p.epsilon == 0.0:
        return PriceResult(price=v0, V0=v0, correction=0.0)
    d = math.exp(-p.r * (p.T - t))
    corr_w = cost_correction(p, claim, Side.WITH_CLAIM, S, t, backend=backend)
    corr_1 = cost_correction(p, claim, Side.NO_CLAIM, S, t, backend=backend)
    correction = (d / p.gamma) * p.epsilon ** (2.0 / 3.0) * (corr_w - corr_1)
    return PriceResult(price=v0 + correction, V0=v0, correction=correction)
