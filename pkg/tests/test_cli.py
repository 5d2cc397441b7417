import math

import numpy as np
import pytest

from tcband.cli import main
from tcband.config import build_scenario, config_hash, parse_config
from tcband.errors import ConfigError


def run(args):
    return main([str(a) for a in args])


def test_parse_config_diagnostics():
    cfg = parse_config("# comment\nmarket.mu = 0.2\n\nside = w\n")
    assert cfg["market.mu"] == "0.2"
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("market.mu = 0.1\nmarket.bogus = 3\n")
    with pytest.raises(ConfigError, match="expected key"):
        parse_config("just words\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("side = 1\nside = w\n")


def test_build_scenario_validation():
    sc = build_scenario({"claim.kind": "mollified_call", "side": "w"})
    assert sc.claim.kind == "mollified_call"
    with pytest.raises(ConfigError):
        build_scenario({"side": "w"})  # no claim
    with pytest.raises(ConfigError):
        build_scenario({"market.mu": "plenty"})


def test_config_hash_stable():
    a = config_hash({"market.mu": "0.1"}, 3)
    b = config_hash({"market.mu": "0.1"}, 3)
    c = config_hash({"market.mu": "0.2"}, 3)
    assert a == b != c


def test_unknown_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("market.moo = 1\n")
    assert run(["price", "--config", cfg, "--out", tmp_path]) == 2


def test_bad_epsilon_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("market.epsilon = 1.2\n")
    assert run(["price", "--config", cfg, "--out", tmp_path]) == 3


def test_strict_validation_exit_code(tmp_path):
    cfg = tmp_path / "call.cfg"
    cfg.write_text("claim.kind = mollified_call\nside = w\n"
                   "validation.strict = true\n")
    # the reference call claim violates the capacity margin
    assert run(["price", "--config", cfg, "--out", tmp_path]) == 3


def test_price_epsilon_zero_matches_v0(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("claim.kind = mollified_call\nside = w\n"
                   "market.epsilon = 0.0\nprice.S = 0.9,1.0,1.1\n")
    out = tmp_path / "out"
    assert run(["price", "--config", cfg, "--out", out,
                "--deterministic"]) == 0
    rows = [line.split(",") for line in
            (out / "price.csv").read_text().splitlines()
            if not line.startswith("#")][1:]
    for row in rows:
        assert row[2] == row[4]  # V0 column equals price column


def test_band_command_reference_row(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("market.epsilon = 0.001\nband.s_lo = 1.0\n"
                   "band.s_hi = 1.0\nband.n_s = 1\n")
    out = tmp_path / "out"
    assert run(["band", "--config", cfg, "--out", out, "--deterministic"]) == 0
    data = [l for l in (out / "band.csv").read_text().splitlines()
            if not l.startswith("#")]
    vals = [float(v) for v in data[1].split(",")]
    assert vals[2] == pytest.approx(0.0344638, abs=2e-7)
    assert vals[3] == pytest.approx(0.05, rel=1e-12)
    assert vals[4] == pytest.approx(0.0655362, abs=2e-7)


def test_simulate_deterministic_bytes(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("sim.n_paths = 4000\nsim.n_steps = 50\nsim.y = target\n"
                   "sim.trace_paths = 2\n")
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert run(["simulate", "--config", cfg, "--out", out1, "--seed", 5,
                "--deterministic"]) == 0
    assert run(["simulate", "--config", cfg, "--out", out2, "--seed", 5,
                "--deterministic"]) == 0
    for name in ("simulate.csv", "trace.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    out3 = tmp_path / "o3"
    assert run(["simulate", "--config", cfg, "--out", out3, "--seed", 6,
                "--deterministic"]) == 0
    assert (out1 / "simulate.csv").read_bytes() \
        != (out3 / "simulate.csv").read_bytes()


def test_verify_command_passes_for_claim_free(tmp_path):
    cfg = tmp_path / "v.cfg"
    cfg.write_text("market.epsilon = 0.001\nverify.pde_grid = 8x6x5\n")
    out = tmp_path / "out"
    assert run(["verify", "--config", cfg, "--out", out,
                "--deterministic"]) == 0
    text = (out / "checks.csv").read_text()
    assert text.count("\n") >= 10  # header + 9 checks


def test_verify_exit_code_on_check_failure(tmp_path, monkeypatch):
    import tcband.cli as cli_mod
    from tcband.checks import CheckReport

    def fake_run(*args, **kwargs):
        return [CheckReport(name="forced", grid="-", worst=1.0,
                            worst_at=(0, 0, 0), tol=0.0, passed=False)]

    monkeypatch.setattr(cli_mod.checks_mod, "run_all_checks", fake_run)
    cfg = tmp_path / "v.cfg"
    cfg.write_text("market.epsilon = 0.001\n")
    assert run(["verify", "--config", cfg, "--out", tmp_path / "o"]) == 5


def test_figure1_strictly_decreasing(tmp_path):
    out = tmp_path / "out"
    assert run(["figure1", "--out", out, "--deterministic"]) == 0
    rows = [l.split(",") for l in (out / "figure1.csv").read_text().splitlines()
            if not l.startswith("#")][1:]
    assert len(rows) == 7
    vals = [float(r[1]) for r in rows]
    assert all(np.isfinite(vals)) and all(v > 0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_oracle_command_small(tmp_path):
    cfg = tmp_path / "o.cfg"
    cfg.write_text(
        "claim.kind = linear\nside = w\nmarket.epsilon = 0.004\n"
        "oracle.n_s = 48\noracle.n_y = 48\noracle.n_t = 64\n"
        "oracle.s_lo = 0.7\noracle.s_hi = 1.4\noracle.export_lattice = true\n")
    out = tmp_path / "out"
    assert run(["oracle", "--config", cfg, "--out", out,
                "--deterministic"]) == 0
    assert (out / "oracle_price.csv").exists()
    assert (out / "sandwich.csv").exists()
    lattice = (out / "lattice_w.csv").read_text().splitlines()
    header = lattice[1].split(",")
    assert header == ["S", "y", "t", "Q", "constraint_active"]
    acts = {row.split(",")[-1] for row in lattice[2:]}
    assert acts <= {"buy", "sell", "none"}
