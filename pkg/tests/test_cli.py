import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from sklearn.base import clone

from oracles import circle_net_bounds
from submax import cli
from submax.cli import main, point_seed, run_experiment
from submax.config import ExperimentConfig, parse_settings, parse_value, read_settings
from submax.errors import BudgetExceeded, DomainError, ReportIOError, ValidationError
from submax.scaling import ScalingFit, ScalingReport, emit_report, fit_scaling


def write(path, text):
    path.write_text(text)
    return path


class TestFit:
    def test_power_exact(self):
        x = np.array([2.0, 4.0, 8.0, 16.0])
        params, r2 = fit_scaling(np.column_stack([x, x**0.5]), "power")
        assert params["slope"] == pytest.approx(0.5, abs=1e-12)
        assert r2 == pytest.approx(1.0)

    def test_log_exact(self):
        x = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
        params, r2 = fit_scaling(np.column_stack([x, np.log(x)]), "log")
        assert params["slope"] == pytest.approx(1.0) and params["intercept"] == pytest.approx(0.0, abs=1e-12)
        assert r2 == pytest.approx(1.0)

    def test_sqrtlog_noisy(self):
        rng = np.random.default_rng(0)
        x = 2.0 ** np.arange(2, 12)
        y = np.sqrt(np.log(x)) * (1 + 0.01 * rng.standard_normal(x.size))
        _, r2 = fit_scaling(np.column_stack([x, y]), "sqrtlog")
        assert r2 > 0.95

    def test_errors(self):
        with pytest.raises(DomainError):
            fit_scaling([(1, 1), (2, 0), (3, 1)], "power")
        with pytest.raises(DomainError):
            fit_scaling([(1, 1), (2, 2)], "power")
        with pytest.raises(DomainError):
            fit_scaling([(1, 1), (2, 2), (3, 3)], "cubic")

    def test_r2_range(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([np.arange(1, 20.0), rng.uniform(1, 2, 19)])
        for model in ("power", "log", "sqrtlog"):
            _, r2 = fit_scaling(pts, model)
            assert 0.0 <= r2 <= 1.0

    def test_estimator(self):
        x = np.array([2.0, 4.0, 8.0, 16.0])
        est = ScalingFit("power").fit(x[:, None], 3 * x**0.25)
        assert est.slope_ == pytest.approx(0.25)
        assert np.allclose(est.predict(x[:, None]), 3 * x**0.25)
        assert est.score(x[:, None], 3 * x**0.25) == pytest.approx(1.0)
        assert clone(est).get_params() == {"model": "power"}
        sq = ScalingFit("sqrtlog").fit(x[:, None], np.sqrt(np.log(x)))
        assert np.allclose(sq.predict(x[:, None]), np.sqrt(np.log(x)))


class TestReport:
    def report(self, records=()):
        rep = ScalingReport("net-cardinality", "delta", list(records), comparison={"exponent": 1})
        rep.refit()
        return rep

    def test_empty_sweep(self, tmp_path):
        paths = emit_report(self.report(), tmp_path)
        assert (tmp_path / "report.csv").read_text() == "delta,x,value\n"
        assert (tmp_path / "report.dat").read_text().startswith("#")
        assert len(paths) == 4

    def test_roundtrip(self, tmp_path):
        recs = [{"parameter": 2.0**-k, "x": 2.0**k, "value": 3.0 * 2**k, "flag": "ok"} for k in range(2, 6)]
        rep = self.report(recs)
        emit_report(rep, tmp_path)
        back = ScalingReport.from_json((tmp_path / "report.json").read_text())
        assert back.to_dict() == json.loads(rep.to_json())
        assert back.fit["slope"] == pytest.approx(1.0)
        dat = (tmp_path / "report.dat").read_text().splitlines()[1:]
        assert [tuple(map(float, line.split())) for line in dat] == [(r["x"], r["value"]) for r in recs]

    def test_unwritable(self, tmp_path):
        blocker = write(tmp_path / "file", "x")
        with pytest.raises(ReportIOError) as err:
            emit_report(self.report(), blocker / "sub")
        assert str(blocker / "sub") in str(err.value)

    def test_numpy_values(self, tmp_path):
        rep = self.report([{"parameter": np.float64(0.25), "x": 4.0, "value": np.float32(2.0), "flag": "ok",
                            "grid": np.array([3, 4])}])
        data = json.loads(rep.to_json())
        assert data["records"][0]["grid"] == [3, 4]


class TestConfig:
    def test_values(self):
        assert parse_value("2^-3") == 0.125
        assert parse_value("1/16") == 0.0625
        assert parse_value("3") == 3 and isinstance(parse_value("3"), int)
        assert parse_value("yes") is True
        assert parse_value("4, 8,16") == [4, 8, 16]
        assert parse_value("sqrtlog") == "sqrtlog"

    def test_include_and_override(self, tmp_path):
        write(tmp_path / "base.cfg", "d = 1\nn = 3   # comment\nvalues = 2^-2, 2^-3\n")
        main_cfg = write(tmp_path / "run.cfg", "include base.cfg\nkind = net\nn = 2\n")
        s = read_settings(main_cfg)
        assert s == {"d": 1, "n": 2, "values": [0.25, 0.125], "kind": "net"}

    def test_include_cycle(self, tmp_path):
        write(tmp_path / "a.cfg", "include b.cfg\n")
        write(tmp_path / "b.cfg", "include a.cfg\n")
        with pytest.raises(ValidationError):
            read_settings(tmp_path / "a.cfg")

    def test_enumerates_all_problems(self):
        with pytest.raises(ValidationError) as err:
            ExperimentConfig.from_settings({"kind": "net", "d": 3, "n": 2, "values": [0.1, 0.2, 0.15],
                                            "model": "cubic", "seed": -1})
        probs = err.value.problems
        assert len(probs) == 4
        assert any("sorted" in p for p in probs) and any("d < n" in p for p in probs)

    def test_grid_resolves_delta(self):
        with pytest.raises(ValidationError) as err:
            ExperimentConfig.from_settings({"kind": "nikodym", "values": [0.125, 0.0625], "h": 0.05})
        assert "resolve" in str(err.value)

    def test_syntax_errors(self):
        with pytest.raises(ValidationError) as err:
            parse_settings("just words\n1bad = 2\nok = 1\n")
        assert len(err.value.problems) == 2

    def test_defaults_by_kind(self):
        cfg = ExperimentConfig.from_settings({"kind": "maxavg", "values": [8, 16]})
        assert (cfg.sweep, cfg.model) == ("N", "log")
        assert cfg.digest() == ExperimentConfig.from_settings({"kind": "maxavg", "values": [8, 16]}).digest()


NET_CFG = {"kind": "net", "d": 1, "n": 2, "values": [2.0**-k for k in range(3, 8)]}


class TestRun:
    def test_net_cardinality_slope(self, tmp_path):
        rep = run_experiment(dict(NET_CFG), tmp_path)
        for rec in rep.records:
            lo, hi = circle_net_bounds(rec["parameter"])
            assert lo <= rec["value"] <= hi
        assert rep.fit["slope"] == pytest.approx(1.0, abs=0.1)
        assert rep.comparison["exponent"] == 1 and rep.comparison["provenance"]
        assert (tmp_path / "report.json").exists() and (tmp_path / "checkpoint.jsonl").exists()

    def test_threads_deterministic(self, tmp_path):
        run_experiment(dict(NET_CFG, seed=7), tmp_path / "serial", threads=1)
        run_experiment(dict(NET_CFG, seed=7), tmp_path / "pool", threads=3)
        for name in ("report.json", "report.csv", "report.dat"):
            assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a = run_experiment(dict(NET_CFG, seed=1))
        b = run_experiment(dict(NET_CFG, seed=2))
        assert [r["seed"] for r in a.records] != [r["seed"] for r in b.records]
        assert point_seed(1, 0) == a.records[0]["seed"]

    def test_resume_skips_finished(self, tmp_path, monkeypatch):
        first = run_experiment(dict(NET_CFG), tmp_path)

        def boom(cfg, value, seed):
            raise AssertionError("finished point was rerun")

        monkeypatch.setitem(cli.RUNNERS, "net", boom)
        again = run_experiment(dict(NET_CFG), tmp_path, resume=True)
        assert again.to_json() == first.to_json()

    def test_resume_partial(self, tmp_path):
        run_experiment(dict(NET_CFG), tmp_path)
        lines = (tmp_path / "checkpoint.jsonl").read_text().splitlines()
        (tmp_path / "checkpoint.jsonl").write_text("\n".join(lines[:3]) + "\n")
        rep = run_experiment(dict(NET_CFG), tmp_path, resume=True)
        assert all(r["flag"] == "ok" for r in rep.records)

    def test_budget_skip(self, tmp_path):
        cfg = {"kind": "net", "d": 2, "n": 4, "values": [0.05, 0.04, 0.03], "budget": 0.2}
        with pytest.raises(BudgetExceeded):
            run_experiment(cfg, tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert all(r["flag"] == "budget" and r["value"] is None for r in data["records"])
        assert data["meta"]["skipped"] == [0.05, 0.04, 0.03]

    def test_point_error_flagged(self, monkeypatch):
        def bad(cfg, value, seed):
            if value < 0.05:
                raise DomainError("too small")
            return {"value": 1.0 / value}

        monkeypatch.setitem(cli.RUNNERS, "net", bad)
        rep = run_experiment(dict(NET_CFG))
        flags = [r["flag"] for r in rep.records]
        assert flags.count("error") == 3 and rep.fit is None
        assert "too small" in rep.records[-1]["reason"]

    def test_kind_checks(self):
        with pytest.raises(ValidationError):
            run_experiment({"kind": "nikodym", "d": 1, "n": 3, "values": [0.25, 0.125]})
        with pytest.raises(ValidationError):
            run_experiment({"kind": "carleson", "n": 4, "d": 1, "values": [4, 8]})

    def test_codim1_bounded(self):
        rep = run_experiment({"kind": "carleson", "n": 2, "values": [4, 8, 16], "seeds": 2,
                              "delta": 0.125, "depth": 2})
        q = [r["value"] for r in rep.records]
        assert all(0 < v < 2 for v in q) and max(q) / min(q) < 4

    def test_nikodym_small(self):
        rep = run_experiment({"kind": "nikodym", "values": [2.0**-4, 2.0**-5, 2.0**-6]})
        q = [r["value"] for r in rep.records]
        assert all(b >= a - 1e-3 for a, b in zip(q, q[1:]))
        assert rep.fit["model"] == "sqrtlog"

    def test_angles_agree(self):
        rep = run_experiment({"kind": "angles", "d": 2, "n": 4, "values": [5, 10, 20]})
        assert max(r["value"] for r in rep.records) < 1e-6

    def test_scaling_fit_only(self, tmp_path):
        data = write(tmp_path / "pts.dat", "# x y\n2 1.4142\n4 2\n8 2.8284\n16 4\n")
        rep = run_experiment({"kind": "scaling", "input": str(data), "model": "power"}, tmp_path / "out")
        assert rep.fit["slope"] == pytest.approx(0.5, abs=1e-4)


class TestMain:
    def cfg(self, tmp_path, text):
        return str(write(tmp_path / "run.cfg", text))

    def test_ok(self, tmp_path, capsys):
        path = self.cfg(tmp_path, "d = 1\nn = 2\nvalues = 2^-3, 2^-4, 2^-5\n")
        assert main(["net", "--config", path, "--out", str(tmp_path / "r"), "--seed", "3"]) == 0
        data = json.loads((tmp_path / "r" / "report.json").read_text())
        assert data["config"]["seed"] == 3 and data["experiment"] == "net-cardinality"
        assert "net-cardinality" in capsys.readouterr().out

    def test_validation_exit(self, tmp_path, capsys):
        path = self.cfg(tmp_path, "d = 2\nn = 2\nvalues = \n")
        assert main(["net", "--config", path, "--out", str(tmp_path / "r")]) == 2
        assert capsys.readouterr().err.count("error:") >= 2

    def test_kind_mismatch(self, tmp_path):
        path = self.cfg(tmp_path, "kind = carleson\nvalues = 4, 8\n")
        assert main(["net", "--config", path, "--out", str(tmp_path / "r")]) == 2

    def test_io_exit(self, tmp_path):
        path = self.cfg(tmp_path, "values = 2^-3, 2^-4, 2^-5\n")
        blocker = write(tmp_path / "blocker", "")
        assert main(["net", "--config", path, "--out", str(blocker / "r")]) == 4

    def test_budget_exit(self, tmp_path):
        path = self.cfg(tmp_path, "d = 2\nn = 4\nvalues = 0.05, 0.04\nbudget = 0.2\n")
        assert main(["net", "--config", path, "--out", str(tmp_path / "r")]) == 3

    def test_missing_config(self, tmp_path):
        assert main(["net", "--config", str(tmp_path / "none.cfg")]) == 2

    def test_module_entry(self, tmp_path):
        path = self.cfg(tmp_path, "values = 2^-3, 2^-4, 2^-5\n")
        code = os.system(f"python3 -m submax.cli net --config {path} --out {tmp_path / 'm'} > /dev/null")
        assert code == 0 and (Path(tmp_path) / "m" / "report.csv").exists()
        assert math.isfinite(json.loads((tmp_path / "m" / "report.json").read_text())["fit"]["r2"])
