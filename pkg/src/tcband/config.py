"""Flat key-value scenario configuration.

The on-disk format is one ``section.key = value`` pair per line, ``#``
comments, no nesting. It parses into a validated scenario or fails with a
line/key diagnostic. Unknown keys are rejected so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

from .bsengine import mollified_call_claim, mollified_put_claim
from .errors import ConfigError
from .market import ClaimSpec, MarketParams, Side, linear_claim, no_claim

__all__ = ["ScenarioConfig", "parse_config", "build_scenario", "config_hash"]

_KNOWN_KEYS = {
    "market.mu", "market.sigma", "market.r", "market.T", "market.gamma",
    "market.epsilon",
    "claim.kind", "claim.K", "claim.delta_T", "claim.coeff",
    "side",
    "price.S", "price.t",
    "band.s_lo", "band.s_hi", "band.n_s", "band.t_lo", "band.t_hi", "band.n_t",
    "sim.policy", "sim.n_paths", "sim.n_steps", "sim.B", "sim.y", "sim.S",
    "sim.t", "sim.seed", "sim.antithetic", "sim.trace_paths",
    "oracle.s_lo", "oracle.s_hi", "oracle.n_s", "oracle.n_y", "oracle.n_t",
    "oracle.pad_decades", "oracle.times", "oracle.mode", "oracle.S",
    "oracle.export_lattice",
    "verify.window_lo", "verify.window_hi", "verify.pde_grid",
    "validation.strict",
}

_DEFAULTS = {
    "market.mu": "0.1", "market.sigma": str(math.sqrt(2.0)), "market.r": "0.0",
    "market.T": "1.0", "market.gamma": "1.0", "market.epsilon": "0.01",
    "claim.kind": "none", "claim.K": "1.0", "claim.delta_T": "1.0",
    "claim.coeff": "0.5",
    "side": "1",
    "price.S": "1.0", "price.t": "0.0",
    "band.s_lo": "0.5", "band.s_hi": "2.0", "band.n_s": "21",
    "band.t_lo": "0.0", "band.t_hi": "0.0", "band.n_t": "1",
    "sim.policy": "band", "sim.n_paths": "20000", "sim.n_steps": "500",
    "sim.B": "0.0", "sim.y": "target", "sim.S": "1.0", "sim.t": "0.0",
    "sim.seed": "0", "sim.antithetic": "false", "sim.trace_paths": "0",
    "oracle.s_lo": "0.7", "oracle.s_hi": "1.4", "oracle.n_s": "96",
    "oracle.n_y": "72", "oracle.n_t": "256", "oracle.pad_decades": "1.5",
    "oracle.times": "0.0", "oracle.mode": "projection", "oracle.S": "1.0",
    "oracle.export_lattice": "false",
    "verify.window_lo": "", "verify.window_hi": "", "verify.pde_grid": "32x32x9",
    "validation.strict": "false",
}


def parse_config(text: str) -> dict:
    """Parse flat key=value lines; raise ConfigError with line diagnostics."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _get_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError as e:
        raise ConfigError(f"key {key}: not a number ({cfg[key]!r})") from e


def _get_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError as e:
        raise ConfigError(f"key {key}: not an integer ({cfg[key]!r})") from e


def _get_bool(cfg, key):
    v = cfg[key].lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"key {key}: not a boolean ({cfg[key]!r})")


def _get_floats(cfg, key):
    try:
        return tuple(float(s) for s in cfg[key].split(",") if s.strip())
    except ValueError as e:
        raise ConfigError(f"key {key}: not a number list ({cfg[key]!r})") from e


@dataclass
class ScenarioConfig:
    params: MarketParams
    claim: ClaimSpec
    side: Side
    raw: dict = field(default_factory=dict)

    def f(self, key):
        return _get_float(self.raw, key)

    def i(self, key):
        return _get_int(self.raw, key)

    def b(self, key):
        return _get_bool(self.raw, key)

    def floats(self, key):
        return _get_floats(self.raw, key)

    def s(self, key):
        return self.raw[key]


def build_scenario(overrides: dict) -> ScenarioConfig:
    cfg = dict(_DEFAULTS)
    cfg.update(overrides)
    params = MarketParams(
        mu=_get_float(cfg, "market.mu"), sigma=_get_float(cfg, "market.sigma"),
        r=_get_float(cfg, "market.r"), T=_get_float(cfg, "market.T"),
        gamma=_get_float(cfg, "market.gamma"),
        epsilon=_get_float(cfg, "market.epsilon"))
    kind = cfg["claim.kind"]
    if kind == "none":
        claim = no_claim()
    elif kind == "linear":
        claim = linear_claim(_get_float(cfg, "claim.coeff"))
    elif kind == "mollified_call":
        claim = mollified_call_claim(_get_float(cfg, "claim.K"),
                                     _get_float(cfg, "claim.delta_T"), params)
    elif kind == "mollified_put":
        claim = mollified_put_claim(_get_float(cfg, "claim.K"),
                                    _get_float(cfg, "claim.delta_T"), params)
    else:
        raise ConfigError(f"claim.kind {kind!r} not configurable from file "
                          "(custom claims need the library API)")
    side_txt = cfg["side"]
    if side_txt not in ("1", "w"):
        raise ConfigError(f"side must be '1' or 'w', got {side_txt!r}")
    side = Side.NO_CLAIM if side_txt == "1" else Side.WITH_CLAIM
    if side is Side.WITH_CLAIM and claim.kind == "none":
        raise ConfigError("side 'w' requires claim.kind != none")
    return ScenarioConfig(params=params, claim=claim, side=side, raw=cfg)


def config_hash(overrides: dict, seed: int) -> str:
    cfg = dict(_DEFAULTS)
    cfg.update(overrides)
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg)) + f"\nseed={seed}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]
