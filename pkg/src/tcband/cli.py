"""Batch command-line front end.

Subcommands: price, band, simulate, oracle, verify, figure1. Every command
reads one flat key-value config (--config), writes CSV artifacts into --out,
and prints a short human summary. Identical config and seed give
byte-identical CSVs when --deterministic suppresses the timestamp comment.

Exit codes: 0 success, 2 config error, 3 assumption-validation failure,
4 numeric failure, 5 verification-check failure.
"""

from __future__ import annotations

import argparse
import datetime
import math
import sys
from pathlib import Path

import numpy as np

from . import checks as checks_mod
from .bsengine import mollified_call_claim
from .config import ScenarioConfig, build_scenario, config_hash, parse_config
from .costfield import HeatKernelField
from .errors import CheckFailure, ConfigError, NumericError, TcbandError
from .expansion import get_expansion, indifference_price
from .market import MarketParams, PortfolioPoint, Side, validate_params
from .mc import Policy, simulate
from .oracle import GridSpec, oracle_price, sandwich_report, solve_qvi

_FIG1_DELTA_TS = (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


class Emitter:
    def __init__(self, out_dir: Path, cfg_hash: str, seed: int,
                 deterministic: bool):
        self.out = out_dir
        self.hash = cfg_hash
        self.seed = seed
        self.deterministic = deterministic
        out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, columns: list[str], rows) -> Path:
        path = self.out / name
        lines = [f"# config={self.hash} seed={self.seed}"]
        if not self.deterministic:
            stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
            lines.append(f"# generated={stamp}")
        lines.append(",".join(columns))
        for row in rows:
            lines.append(",".join(_fmt(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
        return path


def _validate_or_die(sc: ScenarioConfig) -> None:
    rep = validate_params(sc.params, sc.claim)
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    structural = [f for f in rep.failures if "margin" not in f]
    if structural:
        raise CheckFailureValidation("; ".join(structural))
    if not rep.passed:
        msg = "; ".join(rep.failures) or "validation failed"
        if sc.b("validation.strict"):
            raise CheckFailureValidation(msg)
        print(f"warning: {msg} (continuing; set validation.strict=true to stop)",
              file=sys.stderr)


class CheckFailureValidation(TcbandError):
    pass


def cmd_price(sc: ScenarioConfig, em: Emitter, args) -> int:
    _validate_or_die(sc)
    t = sc.f("price.t")
    rows = []
    for S in sc.floats("price.S"):
        res = indifference_price(sc.params, sc.claim, S, t)
        rows.append((S, t, res.V0, res.correction, res.price, res.error_order))
    path = em.write("price.csv",
                    ["S", "t", "V0", "correction", "price", "error_order"], rows)
    for r in rows:
        print(f"S={r[0]:g} t={r[1]:g}: price {r[4]:.10g} "
              f"(V0 {r[2]:.10g}, correction {r[3]:.4g})")
    print(f"wrote {path}")
    return 0


def cmd_band(sc: ScenarioConfig, em: Emitter, args) -> int:
    _validate_or_die(sc)
    exp = get_expansion(sc.params, sc.claim, sc.side)
    S = np.logspace(math.log10(sc.f("band.s_lo")), math.log10(sc.f("band.s_hi")),
                    sc.i("band.n_s"))
    ts = np.linspace(sc.f("band.t_lo"), sc.f("band.t_hi"),
                     max(sc.i("band.n_t"), 1))
    rows = []
    for t in ts:
        b = exp.band(S, float(t))
        for k in range(S.size):
            rows.append((S[k], t, b.y_minus[k], b.y_star[k], b.y_plus[k],
                         b.Y[k]))
    path = em.write("band.csv",
                    ["S", "t", "y_minus", "y_star", "y_plus", "width_scale"],
                    rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_simulate(sc: ScenarioConfig, em: Emitter, args) -> int:
    _validate_or_die(sc)
    p = sc.params
    t0 = sc.f("sim.t")
    S0 = sc.f("sim.S")
    y_raw = sc.s("sim.y")
    if y_raw == "target":
        y0 = float(get_expansion(p, sc.claim, sc.side).target(S0, t0))
    else:
        y0 = float(y_raw)
    start = PortfolioPoint(t=t0, B=sc.f("sim.B"), y=y0, S=S0)
    res = simulate(p, sc.claim, sc.side, Policy(sc.s("sim.policy")),
                   n_paths=sc.i("sim.n_paths"), n_steps=sc.i("sim.n_steps"),
                   seed=em.seed, start=start, antithetic=sc.b("sim.antithetic"),
                   trace_paths=sc.i("sim.trace_paths"))
    cols = ["n_paths", "n_steps", "policy", "mean_utility", "std_error", "ce",
            "ce_std_error", "mean_cost", "mean_trades", "band_exit_fraction",
            "seed"]
    row = (res.n_paths, sc.i("sim.n_steps"), sc.s("sim.policy"),
           res.mean_utility, res.std_error, res.ce, res.ce_std_error,
           res.mean_cost, res.mean_trades, res.band_exit_fraction, res.seed)
    path = em.write("simulate.csv", cols, [row])
    if res.traces:
        trows = []
        for k, trace in enumerate(res.traces):
            for (t, S, y, B, act, dsh, cost) in trace:
                trows.append((k, t, S, y, B, act, dsh, cost))
        em.write("trace.csv",
                 ["path", "t", "S", "y", "B", "action", "traded_shares", "cost"],
                 trows)
    print(f"CE = {res.ce:.8f} (se {res.ce_std_error:.3g}), "
          f"mean cost {res.mean_cost:.6g}")
    print(f"wrote {path}")
    return 0


def cmd_oracle(sc: ScenarioConfig, em: Emitter, args) -> int:
    _validate_or_die(sc)
    p = sc.params
    times = sc.floats("oracle.times")
    spec = GridSpec(s_lo=sc.f("oracle.s_lo"), s_hi=sc.f("oracle.s_hi"),
                    n_s=sc.i("oracle.n_s"), n_y=sc.i("oracle.n_y"),
                    n_t=sc.i("oracle.n_t"),
                    pad_decades=sc.f("oracle.pad_decades"),
                    retained_times=times, mode=sc.s("oracle.mode"))
    grid_1 = solve_qvi(spec, p, sc.claim, Side.NO_CLAIM)
    rows_p = []
    if sc.claim.kind != "none":
        grid_w = solve_qvi(spec, p, sc.claim, Side.WITH_CLAIM)
        for t in times:
            for S in sc.floats("oracle.S"):
                pr = oracle_price(grid_w, grid_1, p, S, t)
                ref = indifference_price(p, sc.claim, S, t)
                rows_p.append((S, t, pr, ref.V0, ref.price))
        em.write("oracle_price.csv",
                 ["S", "t", "oracle_price", "V0", "expansion_price"], rows_p)
        for r in rows_p:
            print(f"S={r[0]:g} t={r[1]:g}: oracle {r[2]:.8f} vs "
                  f"expansion {r[4]:.8f} (V0 {r[3]:.8f})")
    grids = [("1", grid_1)]
    if sc.claim.kind != "none":
        grids.append(("w", grid_w))
    rows_s = []
    for label, grid in grids:
        side = Side.NO_CLAIM if label == "1" else Side.WITH_CLAIM
        rep = sandwich_report(grid, p, sc.claim, side)
        rows_s.append((label, rep.frac_within, rep.worst_ratio,
                       rep.quantiles[0.9], rep.quantiles[0.99],
                       rep.n_nodes, rep.edge_consistency))
        print(f"sandwich side {label}: within-tolerance fraction "
              f"{rep.frac_within:.4f}, worst ratio {rep.worst_ratio:.3g}")
        if sc.b("oracle.export_lattice"):
            lrows = []
            names = {0: "none", 1: "buy", 2: "sell"}
            for t in grid.times:
                Q = grid.slice_at(t)
                act = grid.activity[t]
                for i in range(grid.S.size):
                    for k in range(grid.y.size):
                        lrows.append((grid.S[i], grid.y[k], t, Q[i, k],
                                      names[int(act[i, k])]))
            em.write(f"lattice_{label}.csv",
                     ["S", "y", "t", "Q", "constraint_active"], lrows)
    path = em.write("sandwich.csv",
                    ["side", "frac_within", "worst_ratio", "q90", "q99",
                     "n_nodes", "edge_consistency"], rows_s)
    print(f"wrote {path}")
    return 0


def cmd_verify(sc: ScenarioConfig, em: Emitter, args) -> int:
    _validate_or_die(sc)
    window = None
    if sc.s("verify.window_lo") and sc.s("verify.window_hi"):
        window = (sc.f("verify.window_lo"), sc.f("verify.window_hi"))
    try:
        g = tuple(int(v) for v in sc.s("verify.pde_grid").split("x"))
        assert len(g) == 3
    except Exception as e:
        raise ConfigError(f"verify.pde_grid must look like 32x32x9") from e
    reports = checks_mod.run_all_checks(sc.params, sc.claim, sc.side,
                                        window=window, pde_grid=g)
    rows = [list(r.csv_row().values()) for r in reports]
    path = em.write("checks.csv", list(reports[0].csv_row().keys()), rows)
    ok = True
    for r in reports:
        print(r.summary())
        ok = ok and r.passed
    print(f"wrote {path}")
    if not ok:
        raise CheckFailure("one or more verification checks failed")
    return 0


def cmd_figure1(sc: ScenarioConfig, em: Emitter, args) -> int:
    # fixed parameter set: S=1, K=1, T=1, r=0, mu=0.1, sigma=sqrt(2), gamma=1
    p = MarketParams(mu=0.1, sigma=math.sqrt(2.0), r=0.0, T=1.0, gamma=1.0,
                     epsilon=0.01)
    tau = 0.5 * p.sigma**2 * p.T
    rows = []
    for dT in _FIG1_DELTA_TS:
        claim = mollified_call_claim(1.0, dT, p)
        field = HeatKernelField(p, claim, Side.WITH_CLAIM)
        rows.append((dT, field.heat_value(tau, 0.0)))
    path = em.write("figure1.csv", ["delta_T", "heat_correction"], rows)
    for dT, v in rows:
        print(f"delta_T={dT:g}: {v:.8f}")
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "price": cmd_price,
    "band": cmd_band,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "verify": cmd_verify,
    "figure1": cmd_figure1,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tcband",
        description="Indifference pricing and no-trade bands under "
                    "proportional transaction costs")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value scenario file")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory for CSV artifacts")
    parser.add_argument("--seed", type=int, default=None,
                        help="RNG seed (overrides sim.seed from the config)")
    parser.add_argument("--deterministic", action="store_true",
                        help="suppress the timestamp comment in CSV output")
    args = parser.parse_args(argv)

    try:
        overrides = {}
        if args.config is not None:
            try:
                text = args.config.read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from e
            overrides = parse_config(text)
        if args.seed is not None:
            overrides["sim.seed"] = str(args.seed)
        try:
            sc = build_scenario(overrides)
        except ValueError as e:
            # parameter-range rejections are validation failures, not typos
            raise CheckFailureValidation(str(e)) from e
        seed = sc.i("sim.seed")
        em = Emitter(args.out, config_hash(overrides, seed), seed,
                     args.deterministic)
        return _COMMANDS[args.command](sc, em, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckFailureValidation as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except CheckFailure as e:
        print(f"check failure: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
