import json
from pathlib import Path

import pandas as pd
import pytest

from app.assignment import Assignment
from app.cli import SUMMARY_COLUMNS, ExperimentSpec, execute, load_experiment, main, plan_runs
from app.errors import ConfigError
from app.model import Node, Role, dump_instance

from conftest import edge, make_instance, sender, task_type

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


def _spec(**kwargs) -> ExperimentSpec:
    data = {"policies": ["NoOffload"], "seeds": [1, 2], "duration_s": 2, "scenario_overrides": {"n_cars": 10}}
    data.update(kwargs)
    return ExperimentSpec.model_validate(data)


def test_no_offload_experiment(tmp_path):
    result = execute(_spec(), tmp_path / "out")
    assert (result.runs, result.failed) == (2, 0)
    summary = pd.read_csv(result.summary_csv)
    assert list(summary.columns) == SUMMARY_COLUMNS
    row = summary.iloc[0]
    assert row["policy"] == "NoOffload"
    assert row["processed_rate_mean"] == pytest.approx(1.0)
    assert row["rate_mean"] == 0.0
    assert len(list((tmp_path / "out" / "runs").glob("*.csv"))) == 2


def test_repeat_runs_are_byte_identical(tmp_path):
    spec = _spec(policies=["RandomHybrid", "NoOffload"], seeds=[3])
    a = execute(spec, tmp_path / "a")
    b = execute(spec, tmp_path / "b")
    assert a.summary_csv.read_bytes() == b.summary_csv.read_bytes()
    for path in sorted((tmp_path / "a" / "runs").glob("*.csv")):
        assert path.read_bytes() == (tmp_path / "b" / "runs" / path.name).read_bytes()


def test_failed_runs_are_recorded_in_the_manifest(tmp_path):
    spec = _spec(trace={"membership": str(tmp_path / "missing.csv")}, seeds=[1])
    result = execute(spec, tmp_path / "out")
    assert result.failed == 1
    manifest = json.loads(result.manifest.read_text())
    run = manifest["runs"][0]
    assert run["status"] == "failed"
    assert "trace file not found" in run["error"]
    assert pd.read_csv(result.summary_csv).iloc[0]["failed"] == 1


def test_plan_covers_every_combination(tmp_path):
    spec = _spec(policies=["Hybrid", "NoOffload"], sweep={"variable": "v2v_penetration", "values": [0.0, 0.5, 1.0]}, seeds=[1, 2])
    runs = plan_runs(spec, tmp_path)
    assert len(runs) == 12
    assert len({r.run_id for r in runs}) == 12
    assert runs[0].run_id == "r0000_Hybrid_v2v_penetration-0.0_s1"
    assert {r.scenario["v2v_penetration"] for r in runs} == {0.0, 0.5, 1.0}


def test_invalid_sweep_value_rejected_up_front(tmp_path):
    spec = _spec(sweep={"variable": "v2v_penetration", "values": [0.5, 1.5]})
    with pytest.raises(ConfigError):
        plan_runs(spec, tmp_path)
    with pytest.raises(ConfigError):
        _spec(sweep={"variable": "warp_factor", "values": [1]}).sweep_configs()


def test_experiment_files_load():
    for path in sorted((CONFIG_DIR / "experiments").glob("*.json")):
        spec = load_experiment(path)
        assert spec.sweep_configs()
    spec = load_experiment(CONFIG_DIR / "experiments" / "point_cloud.json")
    config = spec.base_config()
    assert config.task_profile == "point_cloud"
    assert config.cap_lte_bps == 24e6
    assert load_experiment(CONFIG_DIR / "experiments" / "high_compute.json").base_config().profile.compute_cycles == 1e9


def test_experiment_spec_rejects_duplicate_seeds():
    with pytest.raises(ValueError):
        _spec(seeds=[1, 1])


def test_run_command_exit_codes(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"policies": ["NoOffload"], "seeds": [1], "duration_s": 1, "scenario_overrides": {"n_cars": 5}}))
    assert main(["run", str(good), "-o", str(tmp_path / "out")]) == 0
    assert main(["run", str(tmp_path / "nope.json")]) == 1
    failing = tmp_path / "failing.json"
    failing.write_text(json.dumps({"policies": ["NoOffload"], "seeds": [1], "trace": {"membership": str(tmp_path / "missing.csv")}}))
    assert main(["run", str(failing), "-o", str(tmp_path / "out2")]) == 2


def test_assign_verify_and_export(tmp_path, vertical_instance):
    instance = tmp_path / "instance.json"
    dump_instance(vertical_instance, instance)
    out = tmp_path / "assignment.json"
    assert main(["assign", "--instance", str(instance), "--solver", "builtin", "-o", str(out)]) == 0
    assignment = Assignment.model_validate_json(out.read_text())
    assert assignment.total_tasks == 10
    assert main(["verify", "--instance", str(instance), "--assignment", str(out)]) == 0

    bad = tmp_path / "bad.json"
    bad.write_text(Assignment(x={"tt_s": {"e": 1.0}}, y_lte={"tt_s": {"e": 0.001}}, m={"tt_s": {"e": 10}}).model_dump_json())
    assert main(["verify", "--instance", str(instance), "--assignment", str(bad)]) == 1

    mps = tmp_path / "p1.mps"
    assert main(["export-mps", "--instance", str(instance), "-o", str(mps)]) == 0
    assert mps.read_text().startswith("*")
    assert mps.read_text().endswith("ENDATA\n")


def test_assign_can_emit_mps_instead_of_solving(tmp_path, vertical_instance, capsys):
    instance = tmp_path / "instance.json"
    dump_instance(vertical_instance, instance)
    assert main(["assign", "--instance", str(instance), "--solver", "mps-export"]) == 0
    assert "ENDATA" in capsys.readouterr().out


def test_assign_exits_invalid_when_verification_fails(tmp_path, capsys):
    # random shares send 4000 image frames over a 24 Mb/s LTE budget
    nodes = [sender("s"), Node(id="r", roles=frozenset({Role.RECEIVER}))] + [edge(f"e{i}", 1e12) for i in range(4)]
    raw = [("s", f"e{i}", 1e9) for i in range(4)]
    instance = tmp_path / "instance.json"
    dump_instance(make_instance(nodes, raw, [task_type("tt_s", "s")], cap_lte_bps=24e6), instance)
    out = tmp_path / "assignment.json"
    assert main(["assign", "--instance", str(instance), "--policy", "RandomHybrid", "-o", str(out)]) == 1
    assert "verification FAILED" in capsys.readouterr().err
    assert Assignment.model_validate_json(out.read_text()).total_tasks > 0


def test_missing_instance_is_a_validation_error(tmp_path):
    assert main(["assign", "--instance", str(tmp_path / "missing.json")]) == 1


# ---------------------------------------------------------------------------
# Trend checks on the 20-car synthetic scenario
# ---------------------------------------------------------------------------

def _trend(tmp_path, **kwargs) -> pd.DataFrame:
    data = {
        "scenario": str(CONFIG_DIR / "scenario_defaults.json"),
        "seeds": list(range(1, 11)),
        "duration_s": 3,
        "solver": {"backend": "highs"},
    }
    data.update(kwargs)
    result = execute(ExperimentSpec.model_validate(data), tmp_path)
    assert result.failed == 0
    return pd.read_csv(result.summary_csv)


@pytest.mark.slow
def test_policy_ordering(tmp_path):
    summary = _trend(tmp_path, policies=["Hybrid", "VerticalOnly", "NoOffload"]).set_index("policy")
    in_time = summary["rate_mean"]
    assert in_time["Hybrid"] >= in_time["VerticalOnly"] - 1e-9
    assert in_time["VerticalOnly"] >= summary.loc["NoOffload", "processed_rate_mean"] - 1e-9


@pytest.mark.slow
def test_penetration_sweep(tmp_path):
    values = [0.0, 0.25, 0.5, 0.75, 1.0]
    summary = _trend(
        tmp_path,
        policies=["Hybrid", "NoOffload"],
        sweep={"variable": "v2v_penetration", "values": values},
        duration_s=2,
    )
    hybrid = summary[summary["policy"] == "Hybrid"].set_index("sweep_value")["rate_mean"]
    local = summary[summary["policy"] == "NoOffload"].set_index("sweep_value")["processed_rate_mean"]
    rates = [hybrid[v] for v in values]
    assert all(b >= a - 1e-9 for a, b in zip(rates, rates[1:]))
    # in-time rate still doubles the local rate under the 24 Mb/s LTE cap
    for v in (0.5, 0.75, 1.0):
        assert hybrid[v] >= 2 * local[v]


@pytest.mark.slow
def test_high_compute_offload_rate_and_delay(tmp_path):
    summary = _trend(
        tmp_path,
        policies=["VerticalOnly", "NoOffload"],
        scenario_overrides={"task_profile": "image"},
        seeds=[1, 2, 3, 4, 5],
    ).set_index("policy")
    local = summary.loc["NoOffload"]
    vertical = summary.loc["VerticalOnly"]
    assert local["processed_rate_mean"] == pytest.approx(1.0)
    assert vertical["rate_mean"] >= 1.5 * local["processed_rate_mean"]
    assert vertical["mean_total_delay_s"] < local["mean_total_delay_s"]


@pytest.mark.slow
def test_uncapped_point_cloud_offload_rate(tmp_path):
    summary = _trend(
        tmp_path,
        policies=["VerticalOnly", "NoOffload"],
        scenario_overrides={"task_profile": "point_cloud", "u_lte": None},
        seeds=[1, 2, 3, 4, 5],
    ).set_index("policy")
    assert summary.loc["NoOffload", "rate_mean"] == pytest.approx(5.0)
    assert summary.loc["VerticalOnly", "rate_mean"] >= 1.5 * summary.loc["NoOffload", "rate_mean"]
