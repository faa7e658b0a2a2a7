import json
import subprocess
import sys

import numpy as np
import pytest

from cpmgee import __version__, cli, npmle, simulate
from cpmgee.conditional import conditional_cdf, conditional_mean, conditional_quantile
from cpmgee.dataset import ColumnMapping, load_csv, write_csv

COLS = ColumnMapping("id", "time", "y", ("X", "T"))


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    data = simulate.generate_dataset(simulate.SimConfig(n_clusters=60),
                                     np.random.default_rng(42))
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    write_csv(data, path, COLS)
    return path


@pytest.fixture(scope="module")
def fit_path(csv_path):
    out = csv_path.parent / "fit.json"
    assert cli.main(["fit", "--input", str(csv_path), "--out", str(out)]) == 0
    return out


def _run(capsys, argv):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestFit:
    def test_writes_fit_and_manifest(self, fit_path, csv_path):
        payload = json.loads(fit_path.read_text())
        assert list(payload)[:3] == ["format", "link", "structure"]
        assert payload["format"] == cli.FIT_FORMAT
        assert payload["covariate_names"] == ["X", "T"]
        assert np.all(np.diff(payload["gamma"]) > 0)
        assert payload["convergence"]["converged"] is True
        manifest = json.loads((fit_path.parent / "fit.json.manifest.json").read_text())
        assert manifest["command"] == "fit"
        assert manifest["version"] == __version__
        assert manifest["input_digest"] == {str(csv_path): cli.digest(csv_path)}
        assert manifest["options"]["link"] == "logit"
        assert manifest["wall_time"] >= 0

    def test_digest_stable(self, csv_path, tmp_path):
        copy = tmp_path / "copy.csv"
        copy.write_bytes(csv_path.read_bytes())
        assert cli.digest(copy) == cli.digest(csv_path)

    def test_missing_input(self, capsys, tmp_path):
        missing = tmp_path / "nope.csv"
        code, _, err = _run(capsys, ["fit", "--input", str(missing), "--out",
                                     str(tmp_path / "f.json")])
        assert code == 1
        assert str(missing) in err

    def test_unsupported_combination(self, capsys, csv_path, tmp_path):
        code, _, err = _run(capsys, ["fit", "--input", str(csv_path), "--corstr",
                                     "exchangeable", "--link", "probit", "--bins", "20",
                                     "--out", str(tmp_path / "f.json")])
        assert code == 1
        assert "E300" in err

    def test_level_cap(self, capsys, csv_path, tmp_path):
        code, _, err = _run(capsys, ["fit", "--input", str(csv_path), "--corstr", "ar1",
                                     "--out", str(tmp_path / "f.json"), "--max-levels", "50"])
        assert code == 1 and "E301" in err and "--bins" in err

    def test_exchangeable(self, csv_path, tmp_path):
        out = tmp_path / "ex.json"
        assert cli.main(["fit", "--input", str(csv_path), "--corstr", "exchangeable",
                         "--bins", "30", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["structure"] == "exchangeable"
        assert payload["outer_iterations"] == 1
        assert payload["alpha"] is not None and payload["alpha_objective"] is not None
        assert len(payload["levels"]) <= 30

    def test_non_convergence_writes_partial(self, capsys, csv_path, tmp_path, monkeypatch):
        original = npmle.fit_independence

        def one_iteration(data, enc=None, link="logit", options=None):
            return original(data, enc, link, npmle.FitOptions(max_iter=1))

        monkeypatch.setattr(cli.npmle, "fit_independence", one_iteration)
        out = tmp_path / "partial.json"
        code, _, err = _run(capsys, ["fit", "--input", str(csv_path), "--out", str(out)])
        assert code == 2 and "E202" in err
        assert json.loads(out.read_text())["convergence"]["converged"] is False

    def test_usage_error_is_input_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["fit", "--bins", "3", "--round", "1"])
        assert exc.value.code == 1

    def test_columns_flag(self, csv_path, tmp_path):
        out = tmp_path / "x.json"
        assert cli.main(["fit", "--input", str(csv_path), "--covariate-cols", "X",
                         "--link", "cloglog", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["covariate_names"] == ["X"] and payload["link"] == "cloglog"


class TestPredict:
    def test_round_trip_bit_exact(self, capsys, fit_path, csv_path):
        code, out, _ = _run(capsys, ["predict", "--fit", str(fit_path), "--at",
                                     "X=1,T=0.2", "--mean", "--cdf", "3", "--quantile", "0.5"])
        assert code == 0
        records = json.loads(out)
        assert [r["kind"] for r in records] == ["mean", "cdf", "quantile"]
        fit = npmle.fit_independence(load_csv(csv_path, COLS))
        x = [1.0, 0.2]
        want = [conditional_mean(fit, x), conditional_cdf(fit, x, 3.0),
                conditional_quantile(fit, x, 0.5)]
        for rec, est in zip(records, want):
            assert rec == est.to_dict()

    def test_order_follows_command_line(self, capsys, fit_path):
        code, out, _ = _run(capsys, ["predict", "--fit", str(fit_path), "--at", "T=0,X=0",
                                     "--quantile", "0.25", "--exceed", "2", "--cdf", "2"])
        records = json.loads(out)
        assert [r["kind"] for r in records] == ["quantile", "exceedance", "cdf"]
        assert records[1]["value"] + records[2]["value"] == 1.0

    def test_extreme_quantile(self, capsys, fit_path):
        code, _, err = _run(capsys, ["predict", "--fit", str(fit_path), "--at", "X=1,T=0.2",
                                     "--quantile", "0.9999999"])
        assert code == 1 and "E400" in err

    @pytest.mark.parametrize("at", ["X=1", "X=1,T=0.2,Z=3", "X=1,Q=2", "X=one,T=0"])
    def test_bad_covariates(self, capsys, fit_path, at):
        code, _, err = _run(capsys, ["predict", "--fit", str(fit_path), "--at", at, "--mean"])
        assert code == 1 and "E401" in err

    def test_out_file_and_manifest(self, fit_path, tmp_path):
        out = tmp_path / "pred.json"
        assert cli.main(["predict", "--fit", str(fit_path), "--at", "X=0,T=0", "--mean",
                         "--out", str(out)]) == 0
        assert len(json.loads(out.read_text())) == 1
        manifest = json.loads((tmp_path / "pred.json.manifest.json").read_text())
        assert manifest["options"]["requests"] == [["mean", []]]
        assert str(fit_path) in manifest["input_digest"]

    def test_not_a_fit_file(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "other"}')
        code, _, err = _run(capsys, ["predict", "--fit", str(bad), "--mean"])
        assert code == 1 and "E101" in err


class TestSimulate:
    def _config(self, tmp_path, **kw):
        payload = {"n_clusters": 30, "reps": 3, "seed": 0,
                   "estimators": [{"name": "cpm_ind"}]}
        payload.update(kw)
        path = tmp_path / "sim.json"
        path.write_text(json.dumps(payload))
        return path

    def test_byte_identical(self, tmp_path):
        config = self._config(tmp_path)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert cli.main(["simulate", "--config", str(config), "--seed", "7", "--out",
                         str(a)]) == 0
        assert cli.main(["--threads", "2", "simulate", "--config", str(config), "--seed", "7",
                         "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert json.loads(a.read_text())["config"]["seed"] == 7
        assert "Percent bias" in (tmp_path / "a.txt").read_text()
        assert (tmp_path / "a.txt.manifest.json").exists()

    def test_seed_required(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["simulate", "--config", str(self._config(tmp_path)), "--out",
                      str(tmp_path / "o.json")])
        assert exc.value.code == 1

    def test_invalid_config(self, capsys, tmp_path):
        code, _, err = _run(capsys, ["simulate", "--config",
                                     str(self._config(tmp_path, reps=0)), "--seed", "1",
                                     "--out", str(tmp_path / "o.json")])
        assert code == 1 and "reps" in err and "E500" in err

    def test_degraded(self, capsys, tmp_path):
        config = self._config(tmp_path, estimators=[
            {"name": "cpm_ind"}, {"name": "capped", "structure": "exchangeable",
                                  "max_levels": 5}])
        out = tmp_path / "o.json"
        code, _, err = _run(capsys, ["simulate", "--config", str(config), "--seed", "1",
                                     "--out", str(out), "--table", str(tmp_path / "t.txt")])
        assert code == 3
        assert "warning" in err
        assert json.loads(out.read_text())["failures"]["capped"] == 3


class TestBin:
    def test_bins(self, csv_path, tmp_path):
        out = tmp_path / "binned.csv"
        assert cli.main(["bin", "--input", str(csv_path), "--bins", "10", "--out",
                         str(out)]) == 0
        data = load_csv(out, COLS)
        assert np.unique(data.response).size <= 10
        assert data.n_obs == load_csv(csv_path, COLS).n_obs

    def test_round(self, csv_path, tmp_path):
        out = tmp_path / "rounded.csv"
        assert cli.main(["bin", "--input", str(csv_path), "--round", "0", "--out",
                         str(out)]) == 0
        assert set(np.unique(load_csv(out, COLS).response)) <= {0.0, 1.0, 2.0, 3.0, 4.0}

    def test_requires_coarsening(self, csv_path, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bin", "--input", str(csv_path), "--out", str(tmp_path / "o.csv")])
        assert exc.value.code == 1


def test_console_script_version():
    res = subprocess.run([sys.executable, "-m", "cpmgee.cli", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and __version__ in res.stdout


def test_threads_env(monkeypatch):
    monkeypatch.setenv("CPMGEE_THREADS", "2")
    assert cli._resolve_threads(None) == 2
    assert cli._resolve_threads(5) == 5
