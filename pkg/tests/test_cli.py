import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from cellrate import __version__
from cellrate.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, fmt, main, thread_count
from cellrate.config import parse_config
from cellrate.errors import ConfigError

from conftest import CONFIGS

LINEAR4 = {"layout": {"type": "linear", "n_groups": 4, "cell_radius_km": 1.0, "gamma": 4},
           "clusters": {"cooperation": "full"}, "power": {"per_bs_db": 140}}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def two_cell_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    out = {}
    for name in ("two_cell_full_pfs", "two_cell_none_pfs"):
        code = main(["run", str(CONFIGS / f"{name}.json"), "--out", str(base / name)])
        assert code == EXIT_OK
        out[name] = base / name
    return out


class TestRun:
    def test_full_pfs_outputs(self, two_cell_runs):
        d = two_cell_runs["two_cell_full_pfs"]
        rows = read_rows(d / "rates.csv")
        assert list(rows[0]) == ["cluster", "group", "rate"] and len(rows) == 8
        summary = json.loads((d / "summary.json").read_text())
        assert summary["converged"] and summary["version"] == __version__
        assert summary["units"] == "bits"
        assert math.isfinite(summary["utility_value"])
        assert summary["clusters"][0]["lambda"] == [1.0, 1.0]
        assert summary["config"]["task"] == "solve_fairness"
        assert read_rows(d / "convergence.csv")[0].keys() == {"n", "utility", "gap", "step"}

    def test_none_two_clusters(self, two_cell_runs):
        rows = read_rows(two_cell_runs["two_cell_none_pfs"] / "rates.csv")
        assert sorted({r["cluster"] for r in rows}) == ["0", "1"] and len(rows) == 8

    def test_bits_are_nats_over_ln2(self, tmp_path):
        cfg = {"scenario": LINEAR4, "task": "sum_rate", "weights": [1, 2, 3, 4]}
        main(["run", write_cfg(tmp_path / "b.json", {**cfg, "log_base": "bits"}), "--out", str(tmp_path / "b")])
        main(["run", write_cfg(tmp_path / "n.json", {**cfg, "log_base": "nats"}), "--out", str(tmp_path / "n")])
        b = [float(r["rate"]) for r in read_rows(tmp_path / "b" / "rates.csv")]
        n = [float(r["rate"]) for r in read_rows(tmp_path / "n" / "rates.csv")]
        np.testing.assert_allclose(b, np.array(n) / math.log(2.0), rtol=1e-11)

    def test_round_trip(self, tmp_path, two_cell_runs):
        d = two_cell_runs["two_cell_full_pfs"]
        echo = json.loads((d / "summary.json").read_text())["config"]
        echo.pop("output_dir", None)
        code = main(["run", write_cfg(tmp_path / "echo.json", echo), "--out", str(tmp_path / "again")])
        assert code == EXIT_OK
        assert (tmp_path / "again" / "rates.csv").read_bytes() == (d / "rates.csv").read_bytes()

    def test_validate_mc_threads_identical(self, tmp_path):
        cfg = json.loads((CONFIGS / "validate_mc.json").read_text())
        cfg["trials"] = 40
        path = write_cfg(tmp_path / "mc.json", cfg)
        assert main(["run", path, "--out", str(tmp_path / "t1"), "--threads", "1"]) == EXIT_OK
        assert main(["run", path, "--out", str(tmp_path / "t3"), "--threads", "3"]) == EXIT_OK
        for name in ("rates.csv", "mc_vs_asymptotic.csv", "trials.csv"):
            assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t3" / name).read_bytes()
        rows = read_rows(tmp_path / "t1" / "mc_vs_asymptotic.csv")
        assert len(rows) == 3 and "rel_error" in rows[0]

    def test_sweep(self, tmp_path):
        cfg = {"scenario": LINEAR4, "task": "sweep", "weights": [1, 1, 1, 1],
               "sweep": {"parameter": "scenario.power.per_bs_db", "values": [120, 140],
                         "task": "sum_rate"}}
        assert main(["run", write_cfg(tmp_path / "s.json", cfg), "--out", str(tmp_path / "s")]) == EXIT_OK
        rows = read_rows(tmp_path / "s" / "index.csv")
        assert [r["value"] for r in rows] == ["120", "140"]
        u = [float(r["utility"]) for r in rows]
        assert u[1] > u[0]
        assert (tmp_path / "s" / "point_001" / "rates.csv").exists()


class TestErrors:
    def test_missing_scenario(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", write_cfg(tmp_path / "c.json", {"task": "sum_rate"}), "--out", str(out)]) == EXIT_CONFIG
        assert not out.exists()

    @pytest.mark.parametrize("patch", [
        {"bogus": 1}, {"task": "fly"}, {"seed": -1}, {"N": 0}, {"conv_tol": 2.0},
        {"utility": {"kind": "alpha_fair", "alpha": 0}}, {"lambda_mode": "guess"},
        {"weights": [1, 2]}, {"log_base": "dB"}, {"tolerances": {"fp_tol": 0}},
    ])
    def test_rejected(self, tmp_path, patch):
        cfg = {"scenario": LINEAR4, **patch}
        assert main(["run", write_cfg(tmp_path / "c.json", cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_seed_required_for_mc(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config({"scenario": LINEAR4, "task": "validate_mc"})
        rc = parse_config({"scenario": LINEAR4, "task": "validate_mc"}, seed=3)
        assert rc.seed == 3

    def test_invalid_sweep_point(self):
        with pytest.raises(ConfigError):
            parse_config({"scenario": LINEAR4, "task": "sweep",
                          "sweep": {"parameter": "scenario.power.per_bs", "values": [1, -1]}})

    def test_missing_config_file(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("CELLRATE_THREADS", "3")
        assert thread_count() == 3
        assert thread_count(2) == 2
        monkeypatch.setenv("CELLRATE_THREADS", "x")
        with pytest.raises(ConfigError):
            thread_count()


class TestPlot:
    def test_two_runs(self, tmp_path, two_cell_runs):
        dirs = [str(two_cell_runs["two_cell_none_pfs"]), str(two_cell_runs["two_cell_full_pfs"])]
        assert main(["plot", *dirs, "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "rate_vs_position.dat").read_text().splitlines()
        assert lines[0].startswith("#") and len(lines) == 9
        assert all(len(l.split()) == 3 for l in lines[1:])
        xs = [float(l.split()[0]) for l in lines[1:]]
        assert xs == sorted(xs)
        it = (tmp_path / "utility_vs_iter.dat").read_text().splitlines()
        assert len(it[1].split()) == 3

    def test_single_run(self, tmp_path, two_cell_runs):
        assert main(["plot", str(two_cell_runs["two_cell_full_pfs"]), "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "rate_vs_position.dat").read_text().splitlines()
        assert all(len(l.split()) == 2 for l in lines[1:])

    def test_mismatched(self, tmp_path, two_cell_runs):
        cfg = {"scenario": LINEAR4, "task": "solve_fairness"}
        main(["run", write_cfg(tmp_path / "c.json", cfg), "--out", str(tmp_path / "four")])
        code = main(["plot", str(two_cell_runs["two_cell_full_pfs"]), str(tmp_path / "four"),
                     "--out", str(tmp_path / "p")])
        assert code == EXIT_CONFIG

    def test_missing(self, tmp_path):
        assert main(["plot", str(tmp_path / "none")]) == EXIT_IO


def test_fmt():
    assert fmt(1 / 3) == "0.333333333333"
    assert fmt(2.0) == "2"


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "cellrate.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
