import json

import pytest
from click.testing import CliRunner

from sccmarket.cli import main
from sccmarket.experiment import ExperimentPlan, PlanError, run_plan

TOY_PLAN = {"case": "toy3", "train_limits": [2.7], "i_lim": 2.7, "n_train": 64,
            "n_validate": 64, "policy": "uniform", "scc_buses": [3],
            "scenarios": {"g-b1": ["g-b1"]}, "penalties": [1, 10]}


def plan(tmp_path, **kw):
    return ExperimentPlan.from_dict({**TOY_PLAN, "out_dir": str(tmp_path), **kw})


def test_full_toy_plan(tmp_path):
    bundle = run_plan(plan(tmp_path))
    assert bundle.ok, bundle.status
    for name in ("coefficients.json", "error_report.csv", "critical.json", "clearing.csv",
                 "offers.json", "offers.csv", "uc_status.csv", "strategic_summary.json",
                 "provenance.json"):
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "strategic_summary.json").read_text())
    assert summary["scenarios"]["g-b1"]["status"] == "Optimal"
    assert [r["W"] for r in summary["sweep"]["g-b1"]["rows"]] == [1.0, 10.0]
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["seed"] == 0 and prov["solver"].startswith("highspy")
    offers = json.loads((tmp_path / "offers.json").read_text())
    assert offers["schema_version"] == 1


def test_runs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_plan(plan(a))
    run_plan(plan(b))
    for name in ("coefficients.json", "error_report.csv", "clearing.csv", "offers.csv",
                 "uc_status.csv"):
        assert (a / name).read_text() == (b / name).read_text(), name


def test_stage_artifacts_are_reused(tmp_path):
    run_plan(plan(tmp_path, stages=["train"]))
    bundle = run_plan(plan(tmp_path, stages=["competitive", "price"]))
    assert bundle.ok, bundle.status


def test_missing_dependency_is_a_plan_error(tmp_path):
    with pytest.raises(PlanError):
        run_plan(plan(tmp_path, stages=["price"]))
    with pytest.raises(PlanError):
        ExperimentPlan.from_dict({"bogus": 1})


def test_failed_stage_skips_dependents(tmp_path):
    bundle = run_plan(plan(tmp_path, i_lim=2.7, train_limits=[2.7], scc_buses=[99]))
    assert bundle.status["competitive"].startswith("failed")
    assert bundle.status["price"].startswith("skipped")
    assert bundle.status["train"] == "ok"
    assert (tmp_path / "provenance.json").exists()


@pytest.fixture
def toy_artifacts(tmp_path):
    r = CliRunner().invoke(main, ["--out", str(tmp_path), "train-scc", "toy3", "--i-lim", "2.7",
                                  "--samples", "64", "--policy", "uniform"])
    assert r.exit_code == 0, r.output
    return tmp_path


def test_cli_end_to_end(toy_artifacts):
    out = str(toy_artifacts)
    coef = str(toy_artifacts / "coefficients.json")
    run = CliRunner().invoke
    r = run(main, ["--out", out, "validate-scc", "toy3", "--coefficients", coef, "--samples", "32",
                   "--policy", "uniform"])
    assert r.exit_code == 0, r.output
    r = run(main, ["--out", out, "clear", "toy3", "--coefficients", coef, "--i-lim", "2.7",
                   "--buses", "3"])
    assert r.exit_code == 0, r.output
    r = run(main, ["--out", out, "price-scc", "toy3", "--coefficients", coef, "--i-lim", "2.7",
                   "--buses", "3"])
    assert r.exit_code == 0, r.output
    offers = str(toy_artifacts / "offers.json")
    r = run(main, ["--out", out, "solve-strategic", "toy3", "--coefficients", coef, "--offers",
                   offers, "--strategic", "g-b1", "--i-lim", "2.7"])
    assert r.exit_code == 0, r.output
    assert "Optimal" in r.output
    r = run(main, ["--out", out, "sweep-w", "toy3", "--coefficients", coef, "--offers", offers,
                   "--strategic", "g-b1", "--i-lim", "2.7", "--w", "1", "--w", "100"])
    assert r.exit_code == 0, r.output
    assert (toy_artifacts / "sweep.csv").read_text().count("\n") == 3


def test_cli_exit_codes(tmp_path, toy_artifacts):
    run = CliRunner().invoke
    coef = str(toy_artifacts / "coefficients.json")
    # invalid input
    assert run(main, ["train-scc", str(tmp_path / "missing.json")]).exit_code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 7}))
    assert run(main, ["train-scc", str(bad)]).exit_code == 2
    assert run(main, ["clear", "toy3", "--coefficients", coef, "--i-lim", "3.0"]).exit_code == 2
    # solver failure
    r = run(main, ["--out", str(tmp_path), "--time-limit", "0", "clear", "toy3", "--energy-only"])
    assert r.exit_code == 3, r.output
    # infeasible market
    c = json.loads((toy_artifacts / "coefficients.json").read_text())
    c["levels"][0]["coefficients"]["k_gen"] = [[0.1, 0.1]]
    weak = tmp_path / "weak.json"
    weak.write_text(json.dumps(c))
    r = run(main, ["--out", str(tmp_path), "clear", "toy3", "--coefficients", str(weak),
                   "--i-lim", "2.7", "--buses", "3"])
    assert r.exit_code == 4, r.output


def test_run_plan_command(tmp_path):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps({**TOY_PLAN, "stages": ["train", "validate"]}))
    r = CliRunner().invoke(main, ["--out", str(tmp_path / "out"), "run-plan", str(path)])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "out" / "error_report.csv").exists()
