import csv
import json
import subprocess
import sys

import pytest
from scenarios import random_scenario

from snc_mfg import cli
from snc_mfg.errors import BreakdownError, NumericalError
from snc_mfg.model import example51_scenario


def write_scenario(path, cfg):
    path.write_text(cfg.to_json())
    return str(path)


def read_meta(path):
    if path.suffix == ".json":
        return json.loads(path.read_text())["meta"]
    meta = {}
    for line in path.read_text().splitlines():
        if not line.startswith("# "):
            break
        key, _, val = line[2:].partition("=")
        meta[key] = val
    return meta


@pytest.fixture(scope="module")
def small_example(tmp_path_factory):
    d = tmp_path_factory.mktemp("scen")
    return write_scenario(d / "ex.json", example51_scenario(grid_steps=40, mc_paths=30))


@pytest.fixture(scope="module")
def example_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("ex51")
    code = cli.main(["example51", "--grid_steps", "1000", "--out", str(out)])
    return code, out


class TestExampleReport:
    def test_exit_and_report_lines(self, example_report):
        code, out = example_report
        assert code == 0
        text = (out / "example51_report.txt").read_text(encoding="utf-8")
        assert "controls ≡ 0: PASS" in text
        line = next(s for s in text.splitlines() if s.startswith("max|P_num - P_closed|"))
        assert line.endswith("PASS")
        assert "printed closed form: CONFLICT" in text

    def test_json_report(self, example_report):
        _, out = example_report
        doc = json.loads((out / "example51.json").read_text())
        assert doc["max_abs_P_error"] <= 1e-8 and doc["max_abs_Pi_error"] <= 1e-8
        assert doc["sup_control"] == 0.0
        assert doc["meta"]["seed"] == 42
        assert (out / "example51.png").stat().st_size > 0


class TestErrors:
    def test_validation_failure(self, tmp_path, capsys):
        cfg = example51_scenario()
        bad = cfg.replace(params=cfg.params.replace(lambda_=2.0))
        code = cli.main(["validate", "--scenario", write_scenario(tmp_path / "bad.json", bad),
                         "--out", str(tmp_path)])
        assert code == 3
        doc = json.loads((tmp_path / "validation.json").read_text())
        assert doc["valid"] is False
        assert doc["violations"] == [{"field": "lambda", "message": "lambda outside [0,1]"}]
        captured = capsys.readouterr()
        assert json.loads(captured.out)[0]["field"] == "lambda"
        assert captured.err.count("\n") == 1

    def test_valid_scenario(self, tmp_path, small_example):
        assert cli.main(["validate", "--scenario", small_example, "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "validation.json").read_text())["valid"] is True

    def test_missing_file(self, tmp_path):
        assert cli.main(["riccati", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_unparseable_file(self, tmp_path):
        (tmp_path / "b.json").write_text("{")
        assert cli.main(["riccati", "--scenario", str(tmp_path / "b.json"), "--out", str(tmp_path)]) == 2

    def test_scenario_required(self, tmp_path):
        assert cli.main(["riccati", "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize("flag,value", [("--grid-steps", "x"), ("--seed", "-1"), ("--populations", "10x")])
    def test_bad_flags(self, tmp_path, small_example, flag, value):
        assert cli.main(["riccati", "--scenario", small_example, flag, value, "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize("exc,code", [(BreakdownError("I - P F", 0.25), 4), (NumericalError("blow-up"), 5)])
    def test_solver_failures_map_to_exit_codes(self, tmp_path, small_example, monkeypatch, capsys, exc, code):
        def boom(*args):
            raise exc

        monkeypatch.setitem(cli.HANDLERS, "riccati", boom)
        assert cli.main(["riccati", "--scenario", small_example, "--out", str(tmp_path)]) == code
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and str(exc) in err

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "snc_mfg", "riccati", "--scenario", str(tmp_path / "x.json")],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert proc.stderr.strip().startswith("snc-mfg riccati:")


class TestCommands:
    def test_riccati_outputs(self, tmp_path, small_example):
        assert cli.main(["riccati", "--scenario", small_example, "--out", str(tmp_path)]) == 0
        for name in ("P.csv", "Pi.csv", "riccati_report.json", "riccati.png"):
            assert (tmp_path / name).exists()
        rows = [r for r in csv.reader(l for l in (tmp_path / "P.csv").read_text().splitlines()
                                      if not l.startswith("#"))]
        assert rows[0][0] == "t" and len(rows[0]) == 17 and len(rows) == 42

    def test_meanfield_and_simulate(self, tmp_path, small_example):
        assert cli.main(["meanfield", "--scenario", small_example, "--out", str(tmp_path)]) == 0
        assert cli.main(["simulate", "--scenario", small_example, "--populations", "10,20",
                         "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "population_20x20.json").read_text())
        assert summary["N_l"] == 20 and "sup_mX_err" in summary["gaps"]
        assert (tmp_path / "meanfield.csv").exists() and (tmp_path / "simulate_summary.json").exists()

    def test_scaling_on_example(self, tmp_path, small_example):
        code = cli.main(["scaling", "--scenario", small_example, "--seed", "42",
                         "--populations", "10x10,100x100,1000x1000", "--out", str(tmp_path)])
        assert code == 0
        rows = list(csv.DictReader(l for l in (tmp_path / "scaling.csv").read_text().splitlines()
                                   if not l.startswith("#")))
        for m in ("sup_mX_err", "sup_mx_err", "cost_gap_J0", "cost_gap_Jl", "cost_gap_Jf"):
            assert sum(r["metric"] == m for r in rows) == 3
        slopes = json.loads((tmp_path / "slopes.json").read_text())["slopes"]
        assert -1.3 <= slopes["sup_mX_err"]["slope"] <= -0.7
        assert (tmp_path / "scaling.png").exists()

    def test_every_output_carries_hash_and_seed(self, tmp_path, small_example):
        cfg_hash = example51_scenario(grid_steps=40, mc_paths=30).scenario_hash()
        for cmd in ("riccati", "meanfield", "validate"):
            assert cli.main([cmd, "--scenario", small_example, "--seed", "9", "--out", str(tmp_path)]) == 0
        for path in tmp_path.iterdir():
            if path.suffix in (".csv", ".json"):
                meta = read_meta(path)
                assert meta["scenario_hash"] == cfg_hash, path.name
                assert str(meta["seed"]) == "9", path.name

    def test_rerun_is_bit_identical(self, tmp_path, small_example):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert cli.main(["simulate", "--scenario", small_example, "--populations", "5x7",
                             "--out", str(out)]) == 0
            assert cli.main(["riccati", "--scenario", small_example, "--out", str(out)]) == 0
        names = sorted(p.name for p in outs[0].iterdir())
        assert names == sorted(p.name for p in outs[1].iterdir())
        for name in names:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


class TestOverrides:
    def test_environment_sets_flags(self, tmp_path, small_example, monkeypatch):
        monkeypatch.setenv("SNC_MFG_SCENARIO", small_example)
        monkeypatch.setenv("SNC_MFG_SEED", "5")
        monkeypatch.setenv("SNC_MFG_OUT", str(tmp_path / "env"))
        assert cli.main(["validate"]) == 0
        assert json.loads((tmp_path / "env" / "validation.json").read_text())["meta"]["seed"] == 5

    def test_flag_beats_environment(self, tmp_path, small_example, monkeypatch):
        monkeypatch.setenv("SNC_MFG_SEED", "5")
        assert cli.main(["validate", "--scenario", small_example, "--seed", "6", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "validation.json").read_text())["meta"]["seed"] == 6

    def test_grid_override_changes_hash(self, tmp_path, small_example):
        cli.main(["validate", "--scenario", small_example, "--grid-steps", "7", "--out", str(tmp_path)])
        meta = json.loads((tmp_path / "validation.json").read_text())["meta"]
        assert meta["grid_steps"] == 7
        assert meta["scenario_hash"] == example51_scenario(grid_steps=7, mc_paths=30).scenario_hash()

    @pytest.mark.parametrize("text,want", [
        ("10x10,100x100", ((10, 10), (100, 100))),
        ("10,100", ((10, 10), (100, 100))),
        ("[[1, 2], [3, 4]]", ((1, 2), (3, 4))),
    ])
    def test_population_syntax(self, text, want):
        assert cli.parse_populations(text) == want


def test_random_scenario_runs_end_to_end(tmp_path):
    path = write_scenario(tmp_path / "r.json", random_scenario(4, grid_steps=30, mc_paths=30,
                                                                 populations=((10, 10), (40, 40), (320, 320))))
    assert cli.main(["scaling", "--scenario", path, "--threads", "2", "--out", str(tmp_path)]) == 0
