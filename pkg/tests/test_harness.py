import json
import math
import os

import jsonschema
import numpy as np
import pytest

from ve_wane.config import RunConfig, load_config
from ve_wane.data import write_csv
from ve_wane.errors import IdentifiabilityError, StudyError
from ve_wane.mc import run_estimate, run_mc_study, true_values
from ve_wane.model import Theta
from ve_wane.report import emit_table, read_summary_csv
from ve_wane.simulate import ScenarioConfig, generate_dataset, preset

from _toys import make_data

SCHEMA = json.load(open(
    os.path.join(os.path.dirname(__file__), "..", "src", "ve_wane", "schemas",
                 "mc_summary.schema.json")))


def busy_cfg(**kw):
    """Event-rich scenario so small-n harness tests never lose identifiability."""
    base = preset("i-a")
    return ScenarioConfig(**{
        **base.__dict__,
        "delta": (math.log(0.003), 0.4, 0.04),
        **kw,
    })


@pytest.fixture(scope="module")
def small_summary():
    cfg = RunConfig(mode="mc-study", scenario=busy_cfg(n=5000), weights="both",
                    replications=3, seed=314, threads=1)
    return run_mc_study(cfg)


class TestMonteCarloSummary:
    def test_csv_round_trip(self, small_summary, tmp_path):
        path = tmp_path / "summary.csv"
        emit_table(small_summary, "csv", path)
        rows = read_summary_csv(path)
        by_key = {(r["weights"], r["estimand"]): r for r in rows}
        for mode, agg in small_summary.modes.items():
            for est, row in agg["rows"].items():
                got = by_key[(mode, est)]
                for col in ("mean", "median", "sd", "mean_se", "coverage"):
                    assert got[col] == row[col]

    def test_json_validates_against_schema(self, small_summary, tmp_path):
        path = tmp_path / "summary.json"
        emit_table(small_summary, "json", path)
        doc = json.load(open(path))
        jsonschema.validate(doc, SCHEMA)

    def test_text_table_mentions_modes(self, small_summary, tmp_path):
        path = tmp_path / "summary.txt"
        emit_table(small_summary, "text", path)
        text = open(path).read()
        assert "Stabilized weights = 1" in text
        assert "Stabilized weights estimated" in text
        assert "theta1" in text

    def test_unknown_format(self, small_summary, tmp_path):
        with pytest.raises(ValueError):
            emit_table(small_summary, "yaml", tmp_path / "x")

    def test_truth_values(self):
        cfg = preset("i-a")
        truth = true_values(cfg)
        assert truth["theta1"] == pytest.approx(math.log(7))
        assert truth["VE<=20"] == pytest.approx(0.95)
        assert truth["VE>20"] == pytest.approx(0.65)


class TestRunMcStudy:
    def test_single_replication_sd_absent(self):
        cfg = RunConfig(mode="mc-study", scenario=busy_cfg(n=5000), weights="unit",
                        replications=1, seed=11, threads=1)
        summary = run_mc_study(cfg)
        row = summary.modes["unit"]["rows"]["theta1"]
        assert row["sd"] is None
        assert row["mean"] == row["median"]

    def test_deterministic_across_workers(self):
        kw = dict(mode="mc-study", scenario=busy_cfg(n=8000), weights="both",
                  replications=4, seed=99)
        s1 = run_mc_study(RunConfig(threads=1, **kw))
        s2 = run_mc_study(RunConfig(threads=3, **kw))
        assert json.dumps(s1.to_dict(), sort_keys=True) == \
            json.dumps(s2.to_dict(), sort_keys=True)

    def test_failure_threshold(self):
        # tiny n: most replications cannot identify theta; study must abort
        cfg = RunConfig(mode="mc-study", scenario=busy_cfg(n=60), weights="unit",
                        replications=4, seed=5, threads=1)
        with pytest.raises(StudyError):
            run_mc_study(cfg)

    def test_coverage_fields_in_range(self, small_summary):
        for agg in small_summary.modes.values():
            for row in agg["rows"].values():
                if row["coverage"] is not None:
                    assert 0.0 <= row["coverage"] <= 1.0


class TestRunEstimate:
    def test_pipeline_on_csv(self, tmp_path):
        sim = generate_dataset(busy_cfg(), n=5000, seed=21)
        path = tmp_path / "data.csv"
        write_csv(sim.data, path)
        cfg = RunConfig(mode="estimate", data_path=str(path), weights="estimated",
                        seed=1)
        result, payload, proc = run_estimate(cfg)
        assert result.converged
        assert payload["diagnostics"]["top_weights"]
        assert payload["nuisance"]["version"] == 1
        assert len(payload["diagnostics"]["top_weights"]) <= 10
        assert payload["diagnostics"]["ess"]["unblinded"] > 0

    def test_validation_failure_itemized(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "entry,arm,u,delta,r,gamma,psi,x1\n"
            "14.0,0,30.0,1,30.0,0,0,0.5\n"   # entry after accrual closes
        )
        cfg = RunConfig(mode="estimate", data_path=str(path))
        with pytest.raises(ValueError, match="row 0"):
            run_estimate(cfg)

    def test_no_unblinded_subjects_names_theta1(self, tmp_path):
        rows = [
            dict(entry=1.0, arm=1, u=15.0, r=15.0, gamma=0, psi=0),
            dict(entry=2.0, arm=0, u=16.0, r=16.0, gamma=0, psi=0),
            dict(entry=3.0, arm=0, u=60.0, infected=0, r=60.0, gamma=0, psi=0),
            dict(entry=1.0, arm=1, u=61.0, infected=0, r=61.0, gamma=0, psi=0),
        ]
        path = tmp_path / "blinded.csv"
        write_csv(make_data(rows), path)
        cfg = RunConfig(mode="estimate", data_path=str(path), weights="unit")
        with pytest.raises(IdentifiabilityError, match="theta1"):
            run_estimate(cfg)

    def test_bootstrap_cov_close_to_sandwich(self, tmp_path):
        sim = generate_dataset(busy_cfg(), n=6000, seed=33)
        path = tmp_path / "d.csv"
        write_csv(sim.data, path)
        cfg = RunConfig(mode="estimate", data_path=str(path), weights="unit",
                        seed=2, bootstrap=40)
        result, payload, _ = run_estimate(cfg)
        boot = np.asarray(payload["bootstrap_cov"])
        # crude agreement: same order of magnitude on the diagonal
        ratio = np.diag(boot) / np.diag(result.cov)
        assert np.all(ratio > 0.4) and np.all(ratio < 2.5)


class TestConfigLoading:
    def test_toml_config(self, tmp_path):
        path = tmp_path / "study.toml"
        path.write_text(
            '[scenario]\npreset = "i-b"\n\n'
            '[run]\nweights = "both"\nreplications = 2\nseed = 7\nthreads = 1\n'
            'alpha = 0.1\n'
        )
        cfg = load_config(path, "mc-study")
        assert cfg.preset == "i-b" and cfg.weights == "both"
        assert cfg.replications == 2 and cfg.alpha == 0.1

    def test_json_config_with_overrides(self, tmp_path):
        path = tmp_path / "study.json"
        path.write_text(json.dumps({
            "scenario": {"preset": "i-a", "n": 4000, "delta": [-5.8, 0.4, 0.04]},
            "run": {"seed": 3, "weights": "unit"},
        }))
        cfg = load_config(path, "mc-study", replications=2)
        scen = cfg.resolve_scenario()
        assert scen.n == 4000
        assert scen.delta[0] == pytest.approx(-5.8)
        assert cfg.replications == 2

    def test_timeline_and_waning_sections(self, tmp_path):
        path = tmp_path / "t.toml"
        path.write_text(
            "[timeline]\nlag = 4.0\n\n[waning]\nknots = [15.0, 30.0]\n\n"
            '[scenario]\npreset = "i-a"\ntheta1 = [0.5, 1.0]\n\n[run]\nseed = 1\n'
        )
        cfg = load_config(path, "mc-study")
        assert cfg.timeline.lag == 4.0
        scen = cfg.resolve_scenario()
        assert scen.waning.knots == (15.0, 30.0)
        assert np.allclose(scen.theta_true.theta1, [0.5, 1.0])

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            RunConfig(mode="mc-study")  # no scenario source
        with pytest.raises(ValueError):
            RunConfig(mode="nonsense")
        with pytest.raises(ValueError):
            RunConfig(mode="mc-study", preset="i-a", weights="nope")
        with pytest.raises(ValueError):
            RunConfig(mode="mc-study", preset="i-a", data_path="x.csv")


class TestCli:
    def test_simulate_estimate_mc_flow(self, tmp_path):
        from ve_wane.cli import main

        out_sim = tmp_path / "sim"
        code = main(["simulate", "--preset", "i-a", "--n", "4000", "--seed", "11",
                     "--out", str(out_sim)])
        assert code == 0
        assert (out_sim / "data.csv").exists()

        out_est = tmp_path / "est"
        code = main(["estimate", "--data", str(out_sim / "data.csv"),
                     "--weights", "unit", "--out", str(out_est)])
        assert code == 0
        for name in ("result.json", "ve_table.csv", "ve_table.txt",
                     "weights_diag.csv", "ve_curve.png"):
            assert (out_est / name).exists(), name

        out_mc = tmp_path / "mc"
        code = main(["mc-study", "--preset", "i-a", "--n", "12000", "--reps", "2",
                     "--seed", "4", "--weights", "unit", "--threads", "1",
                     "--out", str(out_mc), "--no-figures"])
        assert code == 0
        for name in ("summary.csv", "summary.json", "summary.txt"):
            assert (out_mc / name).exists(), name
        assert not (out_mc / "mc_summary.png").exists()

    def test_cli_error_is_clean(self, tmp_path, capsys):
        from ve_wane.cli import main

        code = main(["estimate", "--data", str(tmp_path / "missing.csv"),
                     "--out", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_estimated_weights_figures(self, tmp_path):
        from ve_wane.cli import main

        sim = generate_dataset(busy_cfg(), n=5000, seed=77)
        path = tmp_path / "d.csv"
        write_csv(sim.data, path)
        out = tmp_path / "est"
        code = main(["estimate", "--data", str(path), "--weights", "estimated",
                     "--out", str(out)])
        assert code == 0
        assert (out / "weights_hist.png").exists()
