"""Monte Carlo engine for the band strategy and baseline policies.

Paths follow exact geometric-Brownian spot steps; the money market accrues
between trades; every trade settles at the ask (1+eps)S or bid (1-eps)S.
The band policy projects the share count onto the closed no-trade band at
the start of every step, which discretizes the continuous reflection at the
band edges (projection error is one step of diffusion, order sqrt(dt)).

Randomness comes from counter-based Philox streams keyed on (seed, block):
paths are processed in fixed-size blocks, so results are bit-identical for a
given seed regardless of scheduling or path count batching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsengine import claim_value
from .expansion import get_expansion
from .market import ClaimSpec, MarketParams, PortfolioPoint, Side

__all__ = ["Policy", "SimResult", "simulate", "certainty_equivalent"]

_BLOCK = 8192


@dataclass(frozen=True)
class Policy:
    """Trading rule: band (nearly optimal), frictionless_target, no_rebalance."""

    kind: str = "band"

    def __post_init__(self):
        if self.kind not in ("band", "frictionless_target", "no_rebalance"):
            raise ValueError(f"unknown policy {self.kind!r}")


@dataclass
class SimResult:
    n_paths: int
    mean_utility: float
    std_error: float
    ce: float
    ce_std_error: float
    mean_cost: float
    mean_trades: float
    band_exit_fraction: float
    seed: int
    convention: str = "ce = -(discount(T,t0)/gamma) * log(-mean_utility)"
    traces: list = field(default_factory=list)


def _targets(p: MarketParams, claim: ClaimSpec, side: Side, S, t):
    """(y_star, width_scale) vectorized over spot for the hot loop.

    Only frictionless-greek quantities appear here, so the per-step work is
    closed-form for the built-in claim kinds and never touches quadrature
    for them.
    """
    a0 = p.merton_cash
    d = math.exp(-p.r * (p.T - t))
    y_star = d * a0 / S
    u = -d * a0 / S**2
    if side is Side.WITH_CLAIM:
        g = claim_value(claim, p, S, t)
        y_star = y_star + g.cash_delta / S
        u = u + g.cash_gamma / S**2
    width = np.cbrt(1.5 * S * d * u * u / p.gamma)
    return y_star, width


def simulate(p: MarketParams, claim: ClaimSpec, side: Side, policy: Policy,
             n_paths: int, n_steps: int, seed: int, start: PortfolioPoint,
             antithetic: bool = False, trace_paths: int = 0) -> SimResult:
    """Simulate the strategy and estimate expected utility at the horizon.

    Parameters
    ----------
    policy : Policy
        ``band`` trades the minimal amount back to the closed band each
        step; ``frictionless_target`` trades all the way to the target;
        ``no_rebalance`` never trades after the initial state.
    trace_paths : int
        Emit step-by-step traces for this many leading paths (CSV-ready
        rows: t, S, y, B, action, traded shares, cost paid).
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    if side is Side.WITH_CLAIM and claim.kind == "none":
        raise ValueError("side 'w' requires a claim")
    if p.epsilon <= 0.0 and policy.kind == "band":
        raise ValueError("band policy needs epsilon > 0")
    t0 = start.t
    if not (0.0 <= t0 < p.T):
        raise ValueError("start time must lie in [0, T)")
    dt = (p.T - t0) / n_steps
    eps13 = p.epsilon ** (1.0 / 3.0)
    growth = math.exp(p.r * dt)

    sum_u = 0.0
    sum_u2 = 0.0
    sum_cost = 0.0
    sum_trades = 0.0
    sum_exits = 0.0
    comp_u = 0.0  # compensated summation keeps aggregation order-free
    traces: list = []

    n_blocks = (n_paths + _BLOCK - 1) // _BLOCK
    for block in range(n_blocks):
        m = min(_BLOCK, n_paths - block * _BLOCK)
        rng = np.random.Generator(np.random.Philox(key=[seed, block]))
        S = np.full(m, start.S)
        B = np.full(m, start.B)
        y = np.full(m, start.y)
        cost = np.zeros(m)
        trades = np.zeros(m)
        exits = np.zeros(m)
        do_trace = trace_paths > 0 and block == 0
        n_tr = min(trace_paths, m) if do_trace else 0
        rows = [[] for _ in range(n_tr)]

        for i in range(n_steps):
            t_now = t0 + i * dt
            if policy.kind != "no_rebalance":
                y_star, width = _targets(p, claim, side, S, t_now)
                if policy.kind == "band":
                    lo = y_star - eps13 * width
                    hi = y_star + eps13 * width
                else:
                    lo = hi = y_star
                target = np.clip(y, lo, hi)
                d_shares = target - y
                buy = d_shares > 0.0
                paid = np.where(buy, (1.0 + p.epsilon) * S * d_shares,
                                (1.0 - p.epsilon) * S * d_shares)
                B = B - paid
                cost += p.epsilon * S * np.abs(d_shares)
                traded = d_shares != 0.0
                trades += traded
                exits += traded
                y = target
                if n_tr:
                    for k in range(n_tr):
                        act = "buy" if d_shares[k] > 0 else (
                            "sell" if d_shares[k] < 0 else "hold")
                        rows[k].append((t_now, S[k], y[k], B[k], act,
                                        abs(d_shares[k]),
                                        p.epsilon * S[k] * abs(d_shares[k])))
            z = rng.standard_normal(m)
            if antithetic:
                half = (m + 1) // 2
                z[half:] = -z[:m - half]
            S = S * np.exp((p.mu - 0.5 * p.sigma**2) * dt
                           + p.sigma * math.sqrt(dt) * z)
            B = B * growth

        if side is Side.WITH_CLAIM:
            gp = np.asarray(claim.g1(S))
            resid = np.asarray(claim.g(S)) - gp * S
            held = y - gp
            wealth = B + (1.0 - p.epsilon * np.sign(held)) * held * S - resid
        else:
            wealth = B + (1.0 - p.epsilon * np.sign(y)) * y * S
        util = -np.exp(-p.gamma * wealth)

        # Kahan-style block accumulation
        blk = float(util.sum())
        t_acc = sum_u + blk
        comp_u += (blk - (t_acc - sum_u))
        sum_u = t_acc
        sum_u2 += float((util * util).sum())
        sum_cost += float(cost.sum())
        sum_trades += float(trades.sum())
        sum_exits += float(exits.sum())
        if n_tr:
            traces = [list(r) for r in rows]

    mean_u = (sum_u + comp_u) / n_paths
    var_u = max(sum_u2 / n_paths - mean_u**2, 0.0)
    se = math.sqrt(var_u / n_paths)
    d0 = math.exp(-p.r * (p.T - t0))
    ce = -(d0 / p.gamma) * math.log(-mean_u)
    ce_se = (d0 / p.gamma) * se / abs(mean_u)
    return SimResult(
        n_paths=n_paths, mean_utility=mean_u, std_error=se,
        ce=ce, ce_std_error=ce_se,
        mean_cost=sum_cost / n_paths,
        mean_trades=sum_trades / n_paths,
        band_exit_fraction=sum_exits / (n_paths * n_steps),
        seed=seed, traces=traces)


def certainty_equivalent(res: SimResult, p: MarketParams, t: float) -> tuple:
    """(certainty equivalent, delta-method standard error) at time t."""
    if not (res.mean_utility < 0.0):
        raise ValueError("mean utility must be negative")
    d = math.exp(-p.r * (p.T - t))
    ce = -(d / p.gamma) * math.log(-res.mean_utility)
    se = (d / p.gamma) * res.std_error / abs(res.mean_utility)
    return ce, se
