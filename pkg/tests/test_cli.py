import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from hellbayes import cli
from hellbayes.exceptions import ConfigError, GridRangeError

DP = ["--iters", "300", "--burn", "100", "--thin", "20"]


@pytest.fixture
def data_file(tmp_path):
    p = tmp_path / "x.csv"
    x = np.random.default_rng(7).normal(5, 1, 20)
    p.write_text("x\n" + "".join(f"{v:.17g}\n" for v in x))
    return p


def run(argv):
    return cli.main([str(a) for a in argv])


def rerun_bytes(tmp_path, argv, name="out"):
    outs = []
    for i in range(2):
        path = tmp_path / f"{name}{i}"
        assert run([*argv, "--out", path]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    return json.loads(outs[0]) if outs[0].lstrip().startswith(b"{") else outs[0].decode()


class TestLoadDataset:
    def test_plain(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("1.0\n2.5\n")
        np.testing.assert_array_equal(cli.load_dataset_csv(p), [1.0, 2.5])

    def test_header(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x\n3\n")
        np.testing.assert_array_equal(cli.load_dataset_csv(p), [3.0])

    def test_unparsable(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("abc\n")
        with pytest.raises(ConfigError, match="line 1"):
            cli.load_dataset_csv(p)

    def test_order_and_blank_lines(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("3\n\n1\n2\n")
        np.testing.assert_array_equal(cli.load_dataset_csv(p), [3.0, 1.0, 2.0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cli.load_dataset_csv(tmp_path / "nope.csv")


class TestSerialisation:
    def test_seventeen_digits(self):
        assert cli.dumps({"a": 0.1}) == '{"a": 0.10000000000000001}\n'
        assert json.loads(cli.dumps([1 / 3]))[0] == 1 / 3

    def test_non_finite(self):
        assert cli.dumps([math.nan, math.inf, 1]) == "[null, null, 1]\n"

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        target = tmp_path / "o.json"
        cli.write_atomic(target, "one")
        cli.write_atomic(target, "two")
        assert target.read_text() == "two"
        assert os.listdir(tmp_path) == ["o.json"]


class TestHellinger:
    def test_closed_form(self, capsys):
        assert run(["hellinger", "--g", "normal:0,1", "--f", "normal-loc:1"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["d_h_sq"] == pytest.approx(2 * (1 - math.exp(-1 / 8)), abs=1e-6)
        assert round(out["d_h_sq"], 3) == 0.235

    def test_location_scale(self, capsys):
        assert run(["hellinger", "--g", "normal:0,1", "--f", "normal-loc-scale:0,2"]) == 0
        expected = 2 - 2 * math.sqrt(2 * 2 / 5)
        assert json.loads(capsys.readouterr().out)["d_h_sq"] == pytest.approx(expected, abs=1e-6)

    def test_mixture_file(self, tmp_path, capsys):
        p = tmp_path / "g.json"
        p.write_text(json.dumps({"weights": [1.0], "means": [2.0], "variances": [1.0]}))
        assert run(["hellinger", "--g", f"@{p}", "--f", "normal-loc:2"]) == 0
        assert json.loads(capsys.readouterr().out)["d_h_sq"] == pytest.approx(0.0, abs=1e-8)

    def test_bad_spec(self, capsys):
        assert run(["hellinger", "--g", "cauchy:0,1", "--f", "normal-loc:1"]) == 1
        assert "unknown density" in capsys.readouterr().err

    def test_numerical_failure_exit_code(self, monkeypatch, capsys):
        def boom(*a, **k):
            raise GridRangeError("mass outside grid")

        monkeypatch.setattr(cli, "hellinger_sq", boom)
        assert run(["hellinger", "--g", "normal:0,1", "--f", "normal-loc:1"]) == 2
        assert "numerical failure" in capsys.readouterr().err


class TestUsageErrors:
    def test_missing_data(self, capsys):
        assert run(["fit"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run([]) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 20, "replicates": 5}))
        assert run(["simulate", "--config", cfg]) == 1

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        assert cli._threads(None) == 3
        assert cli._threads("2") == 2
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        with pytest.raises(ConfigError):
            cli._threads(None)


class TestDeterminism:
    def test_hellinger(self, tmp_path):
        rerun_bytes(tmp_path, ["hellinger", "--g", "uniform:0,1", "--f", "normal-loc:0.5"])

    def test_dpmix(self, tmp_path, data_file):
        out = rerun_bytes(tmp_path, ["dpmix", "--data", data_file, *DP, "--seed", "3"])
        assert len(out["draws"]) == 10

    @pytest.mark.parametrize("method", ["t1", "t2", "t3", "mhde"])
    def test_estimate(self, tmp_path, data_file, method):
        out = rerun_bytes(tmp_path, ["estimate", "--method", method, "--data", data_file, *DP])
        assert abs(out["theta"][0] - 5.0) < 1.0
        assert out["n"] == 20

    def test_estimate_from_ensemble(self, tmp_path, data_file):
        ens = tmp_path / "ens.json"
        assert run(["dpmix", "--data", data_file, *DP, "--out", ens]) == 0
        direct = rerun_bytes(tmp_path, ["estimate", "--method", "t2", "--data", data_file, *DP], "a")
        stored = rerun_bytes(tmp_path, ["estimate", "--method", "t2", "--data", data_file, "--ensemble", ens], "b")
        assert direct["theta"] == stored["theta"]

    def test_fit(self, tmp_path, data_file):
        out = rerun_bytes(tmp_path, ["fit", "--data", data_file, *DP, "--mh-steps", "1000"])
        (lo, hi), = out["ci"]
        assert lo < out["eap"][0] < hi
        assert out["ensemble_size"] == 10 and out["seed"] == 0

    def test_simulate(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"replications": 3, "methods": ["conjugate", "hierarchical", "t1"],
                                   "contamination": [{"k": 1, "shift": 10}], "dp_iter": 300,
                                   "dp_burn_in": 100, "dp_thin": 20, "mh_steps": 1000}))
        table = rerun_bytes(tmp_path, ["simulate", "--config", cfg, "--threads", "1"])
        lines = table.splitlines()
        assert lines[0].startswith("method\tk\tshift")
        assert len(lines) == 1 + 3 * 2

    def test_realdata(self, tmp_path):
        dens = [tmp_path / "d0.csv", tmp_path / "d1.csv"]
        outs = []
        for i in range(2):
            out = tmp_path / f"r{i}.json"
            assert run(["realdata", "--mh-steps", "1000", "--out", out, "--density-csv", dens[i]]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert dens[0].read_bytes() == dens[1].read_bytes()
        summary = json.loads(outs[0])
        assert summary["classical"]["suspected_outlier"] == "5"


def test_console_script_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hellbayes.cli", "hellinger", "--g", "normal:0,1",
                           "--f", "normal-loc:0"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["d_h_sq"] == pytest.approx(0.0, abs=1e-8)
