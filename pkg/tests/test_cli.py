import csv
import json
import subprocess
import sys

import pytest

from harqmdp import cli
from harqmdp.errors import SolverError
from harqmdp.lattice import ModeSet, State, allowed_actions, build_ami_grid, build_p_grid, enumerate_states


@pytest.fixture(autouse=True)
def sequential(monkeypatch):
    monkeypatch.setenv("HARQMDP_THREADS", "1")


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_table_and_echo(tmp_path):
    out = tmp_path / "solve.csv"
    code = cli.main(["solve", "--k-max", "4", "--t-p", "32", "--modes", "SC", "--snr-db", "4,16", "--out", str(out)])
    assert code == cli.EXIT_OK
    rows = read_csv(out)
    assert list(rows[0]) == list(cli.SOLVE_COLUMNS)
    assert [float(r["snr_db"]) for r in rows] == [4.0, 16.0]
    for r in rows:
        assert float(r["eta"]) <= float(r["ergodic"])
    mid = rows[1]
    assert float(mid["eta"]) > float(mid["conventional"])
    echo = json.loads(out.with_suffix(".json").read_text())
    assert echo["command"] == "solve" and echo["config"]["k_max"] == 4 and echo["config"]["modes"] == "SC_SET"


def test_one_p_rows_have_no_joint_modes(tmp_path):
    out = tmp_path / "conv.csv"
    assert cli.main(["solve", "--modes", "1P", "--snr-db", "0:20:10", "--out", str(out)]) == cli.EXIT_OK
    for r in read_csv(out):
        assert float(r["P_SC"]) == float(r["P_TS"]) == float(r["P_Drop"]) == 0.0
        assert float(r["eta"]) == pytest.approx(float(r["conventional"]), abs=1e-12)


@pytest.mark.parametrize("feedback", ["one_bit_full", "one_bit_unique"])
def test_one_bit_solve(tmp_path, feedback):
    out = tmp_path / "ob.csv"
    args = ["solve", "--feedback", feedback, "--modes", "TS", "--t-p", "8", "--snr-db", "14", "--out", str(out)]
    assert cli.main(args) == cli.EXIT_OK
    (row,) = read_csv(out)
    assert float(row["conventional"]) - 1e-9 <= float(row["eta"]) <= float(row["ergodic"])


def test_baseline(tmp_path):
    out = tmp_path / "base.csv"
    assert cli.main(["baseline", "--k-max", "3", "--snr-db", "10", "--out", str(out)]) == cli.EXIT_OK
    (row,) = read_csv(out)
    assert float(row["conventional"]) == pytest.approx(float(row["conventional_renewal"]), abs=5e-3)


def test_dump_policy_contents(tmp_path):
    out = tmp_path / "policy.json"
    args = ["dump-policy", "--modes", "SC", "--t-p", "16", "--snr-db", "16", "--out", str(out)]
    assert cli.main(args) == cli.EXIT_OK
    art = json.loads(out.read_text())
    grid = build_ami_grid(4.0, 32)
    space = enumerate_states(2, grid)
    p_grid = build_p_grid(16)
    for r in art["records"]:
        s = State(r["k_hol"], r["k_next"], r["c_hol"], r["c_next"])
        a = cli._action_from_json(r)
        assert a in allowed_actions(space, s, ModeSet.SC_SET, p_grid)
        if space.pending_is_fresh(s):
            assert r["mode"] == "1P"
    ps = [r["p"] for r in art["slice_1_0"] if r["mode"] == "SC"]
    rises = [b - a for a, b in zip(ps, ps[1:]) if b > a + 1e-12]
    assert len(rises) <= 1


def test_dump_simulate_round_trip_is_reproducible(tmp_path):
    pol = tmp_path / "policy.json"
    assert cli.main(["dump-policy", "--t-p", "8", "--snr-db", "16", "--out", str(pol)]) == cli.EXIT_OK
    outs = []
    for k in range(2):
        out = tmp_path / f"sim{k}.csv"
        args = ["simulate", "--policy", str(pol), "--snr-db", "16", "--blocks", "30000", "--seed", "3", "--out", str(out)]
        assert cli.main(args) == cli.EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    (row,) = read_csv(tmp_path / "sim0.csv")
    assert list(row) == list(cli.SIM_COLUMNS)
    assert float(row["eta_emp"]) == pytest.approx(float(row["eta_analytic"]), rel=0.05)
    art = json.loads(pol.read_text())
    _, source = cli.policy_source_from_artifact(art, None)
    for r in art["records"]:
        assert source(State(r["k_hol"], r["k_next"], r["c_hol"], r["c_next"])) == cli._action_from_json(r)


def test_one_bit_full_round_trip(tmp_path):
    pol = tmp_path / "ob.json"
    args = ["dump-policy", "--feedback", "one_bit_full", "--modes", "SC", "--t-p", "8", "--snr-db", "18",
            "--out", str(pol)]
    assert cli.main(args) == cli.EXIT_OK
    out = tmp_path / "sim.csv"
    args = ["simulate", "--policy", str(pol), "--snr-db", "18", "--blocks", "20000", "--out", str(out)]
    assert cli.main(args) == cli.EXIT_OK
    assert float(read_csv(out)[0]["eta_emp"]) > 0


def test_config_file_merge(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"k_max": 3, "modes": "TS", "snr_db": [5, 6]}))
    args = cli.build_parser().parse_args(["solve", "--config", str(conf), "--modes", "SC"])
    cfg = cli.build_config(args)
    assert cfg.k_max == 3 and cfg.mode_set == ModeSet.SC_SET and cfg.snr_db == [5.0, 6.0]
    assert cfg.rate == 4.0 and cfg.t_i == 32


def test_snr_list_parsing():
    assert cli.parse_snr_list("0:2:0.5") == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert cli.parse_snr_list("10, 16,22") == [10.0, 16.0, 22.0]
    assert cli.parse_snr_list([1, 2]) == [1.0, 2.0]


@pytest.mark.parametrize("argv", [
    ["solve", "--modes", "XY"],
    ["solve", "--feedback", "one_bit_full", "--k-max", "3"],
    ["solve", "--snr-db", "5:1:1"],
    ["solve", "--feedback", "two_bit"],
    ["solve", "--config", "/nonexistent.json"],
    ["simulate", "--policy", "/nonexistent.json"],
])
def test_configuration_errors(argv, capsys):
    assert cli.main(argv) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    def boom(cfg, snr_db):
        if snr_db > 5:
            raise SolverError("forced failure", 1.0)
        return {"snr_db": snr_db}

    monkeypatch.setattr(cli, "solve_point", boom)
    out = tmp_path / "x.csv"
    assert cli.main(["solve", "--snr-db", "0,10", "--out", str(out)]) == cli.EXIT_NUMERIC
    assert len(read_csv(out)) == 1


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "harqmdp.cli", "solve", "--modes", "nope"],
                         capture_output=True, text=True)
    assert res.returncode == cli.EXIT_CONFIG
