import math

import pytest

from app import simulator
from app.assignment import Assignment, Policy, verify_assignment
from app.errors import SolverStatusError
from app.model import Node, Role
from app.scheduler import Schedule, TaskSchedule, build_schedule
from app.simulator import (
    METRIC_COLUMNS,
    SENDER_COLUMNS,
    EventKind,
    mean_ci,
    plan_period,
    run_period,
    run_simulation,
    simulate_instances,
)
from app.scenario import synth_timeline

from conftest import make_instance, sender, task_type, worker


def test_no_offload_processes_one_frame_per_sender(vertical_instance):
    series = simulate_instances([vertical_instance] * 3, Policy.NO_OFFLOAD)
    for pm in series.periods:
        # 1 GHz sender needs 1 s for a 1E9-cycle task: processed, never in time
        assert pm.generated == 1
        assert pm.delivered_in_time == 0
        assert pm.rate_processed == pytest.approx(1.0)
    summary = series.summary()
    assert summary["processed_rate_mean"] == pytest.approx(1.0)
    assert summary["rate_mean"] == 0.0
    assert summary["bytes_lte_mean"] == 0.0


def test_vertical_plan_is_delivered_in_time(vertical_instance, builtin_options):
    series = simulate_instances([vertical_instance] * 3, Policy.HYBRID, builtin_options)
    for pm in series.periods:
        assert pm.generated == 10
        assert pm.delivered_in_time == 10
        assert pm.rate_in_time == pytest.approx(10.0)
        assert pm.bits_lte == pytest.approx(10 * 160_000)
        assert pm.fallback == ""
    assert series.summary()["bytes_lte_mean"] == pytest.approx(200_000)


def test_lte_bytes_stay_under_the_cap(point_cloud_instance, builtin_options):
    series = simulate_instances([point_cloud_instance] * 2, Policy.HYBRID, builtin_options)
    for pm in series.periods:
        assert pm.bits_lte <= point_cloud_instance.cap_lte_bps * point_cloud_instance.period_s
        assert pm.generated == 12


def test_hybrid_plan_is_fully_processed(hybrid_instance, builtin_options):
    series = simulate_instances([hybrid_instance] * 2, Policy.HYBRID, builtin_options)
    for pm in series.periods:
        assert pm.generated > 0
        assert pm.delivered == pm.generated
        assert pm.bits_lte <= 24e6


def test_csv_columns_and_determinism(tmp_path, hybrid_instance, builtin_options):
    paths = []
    for name in ("a.csv", "b.csv"):
        series = simulate_instances([hybrid_instance] * 2, Policy.RANDOM_HYBRID, builtin_options, seed=4)
        series.write_csv(tmp_path / name)
        paths.append(tmp_path / name)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header.split(",") == METRIC_COLUMNS
    frame = series.to_frame()
    assert len(frame) == 4
    assert set(frame["policy"]) == {"RandomHybrid"}


def test_event_trace_is_ordered(vertical_instance, builtin_options):
    series = simulate_instances([vertical_instance] * 2, Policy.HYBRID, builtin_options, record_events=True)
    times = [e.time for e in series.events]
    assert times == sorted(times)
    by_task = {}
    for e in series.events:
        by_task.setdefault((e.period, e.type_id, e.task_index), []).append(e)
    assert len(by_task) == 20
    for events in by_task.values():
        kinds = [e.kind for e in events]
        assert kinds == [EventKind.FRAME_GENERATED, EventKind.TX_COMPLETE, EventKind.COMPUTE_COMPLETE, EventKind.DELIVERED]
        assert all(a.time <= b.time for a, b in zip(events, events[1:]))


def test_missing_incumbent_falls_back_to_no_offload(monkeypatch, vertical_instance, caplog):
    def no_incumbent(*args, **kwargs):
        raise SolverStatusError("P1 solve ended with status NodeLimit and no incumbent")

    monkeypatch.setattr(simulator, "assign", no_incumbent)
    series = simulate_instances([vertical_instance], Policy.HYBRID)
    pm = series.periods[0]
    assert pm.fallback == "no_offload"
    assert pm.solver_status == "NoIncumbent"
    assert pm.generated == 1
    assert series.summary()["fallback_periods"] == 1
    assert "falling back to NoOffload" in caplog.text


def test_period_without_senders_is_excluded_from_rates(vertical_instance):
    idle = vertical_instance.model_copy(update={"task_types": ()})
    series = simulate_instances([vertical_instance, idle], Policy.NO_OFFLOAD)
    assert series.periods[1].n_senders == 0
    assert series.periods[1].rate_processed == 0.0
    assert series.summary()["processed_rate_mean"] == pytest.approx(1.0)


def test_run_simulation_over_synthetic_trace(small_scenario):
    timeline = synth_timeline(small_scenario, duration_s=3)
    series = run_simulation(timeline, small_scenario, Policy.NO_OFFLOAD, duration_s=3, seed=2)
    assert len(series.periods) == 3
    # 10 cars at 0.2 give 2 senders per period
    assert all(pm.n_senders == 2 for pm in series.periods)
    assert series.summary()["processed_rate_mean"] == pytest.approx(1.0)


def test_mean_ci():
    mean, half = mean_ci([1.0, 2.0, 3.0])
    assert mean == pytest.approx(2.0)
    # t(0.975, 2) * 1 / sqrt(3)
    assert half == pytest.approx(4.302653 / math.sqrt(3), rel=1e-5)
    assert mean_ci([5.0]) == (5.0, 0.0)
    assert all(math.isnan(v) for v in mean_ci([]))


def _pair_instance(sender_hz, worker_hz, rate_bps, profile):
    nodes = [sender("s", sender_hz), worker("a", worker_hz), Node(id="r", roles=frozenset({Role.RECEIVER}))]
    return make_instance(nodes, [("s", "a", rate_bps), ("a", "s", rate_bps)], [task_type("k", "s", profile)])


def test_single_offloaded_task_trace():
    profile = {"data_bits": 3.2e6, "compute_cycles": 2e8, "max_delay_s": 0.6}
    instance = _pair_instance(1e9, 1e9, 10e6, profile)
    assignment = Assignment(x={"k": {"a": 1.0}}, y_v2v={"k": {"a": 1.0}}, m={"k": {"a": 1}})
    schedule = Schedule(by_type={"k": TaskSchedule(type_id="k", arrivals=[0.0], workers=["a"], worker_order=["a"])})
    metrics, state = run_period(instance, assignment, schedule, final=True)
    rec = state.records[0]
    assert rec.tx_delay == pytest.approx(0.32)
    assert rec.compute_delay == pytest.approx(0.2)
    assert metrics.delivered_in_time == 1
    assert metrics.bits_v2v == 3.2e6


def test_burst_queues_on_the_busier_worker():
    # service 1/3 s on s; its frames arrive at 0, 0.5 and 0.75
    profile = {"data_bits": 1e5, "compute_cycles": 1e9, "max_delay_s": 0.6}
    instance = _pair_instance(3e9, 5e9, 10e6, profile)
    assignment = Assignment(x={"k": {"s": 1.0, "a": 1.0}}, y_v2v={"k": {"a": 1.0}}, m={"k": {"s": 3, "a": 1}})
    schedule = Schedule(
        by_type={
            "k": TaskSchedule(
                type_id="k", arrivals=[0.0, 0.25, 0.5, 0.75], workers=["s", "a", "s", "s"], worker_order=["s", "a"]
            )
        }
    )
    metrics, state = run_period(instance, assignment, schedule, final=True)
    last = state.records[3]
    assert last.compute_start_s == pytest.approx(5 / 6)
    assert last.compute_end_s == pytest.approx(7 / 6)
    assert last.total_delay == pytest.approx(5 / 12)
    assert metrics.delivered == 4


def test_empty_schedule_gives_zero_metrics(vertical_instance):
    metrics, _ = run_period(vertical_instance, Assignment(), Schedule(by_type={}), final=True)
    assert (metrics.generated, metrics.delivered, metrics.bits_lte) == (0, 0, 0.0)


def test_uniform_plan_meets_every_deadline(vertical_instance, builtin_options):
    state, start = None, 0.0
    for p in range(3):
        assignment, fallback = plan_period(vertical_instance, Policy.HYBRID, builtin_options, p)
        assert fallback == ""
        assert verify_assignment(vertical_instance, assignment).passed
        schedule = build_schedule(vertical_instance, assignment, p)
        _, state = run_period(vertical_instance, assignment, schedule, state, start_s=start, final=p == 2)
        start += vertical_instance.period_s
    assert len(state.records) == 30
    for rec in state.records:
        assert rec.completed
        assert rec.total_delay <= rec.deadline_s + 1e-9


def _assert_counts_nest(series):
    for pm in series.periods:
        for m in pm.by_type.values():
            assert 0 <= m.delivered_in_time <= m.delivered <= m.generated
        assert pm.delivered_in_time <= pm.delivered <= pm.generated


def test_in_time_never_exceeds_processed_across_periods(hybrid_instance, builtin_options, small_scenario):
    for policy in Policy:
        _assert_counts_nest(simulate_instances([hybrid_instance] * 3, policy, builtin_options, seed=1))
    timeline = synth_timeline(small_scenario, duration_s=3)
    _assert_counts_nest(run_simulation(timeline, small_scenario, Policy.HYBRID, duration_s=3, seed=2))


def test_open_period_counts_only_finished_tasks():
    profile = {"data_bits": 1e5, "compute_cycles": 1e9, "max_delay_s": 0.6}
    instance = _pair_instance(1.25e9, 1e9, 10e6, profile)
    # 0.8 s per task on the sender: the second frame is still queued at the boundary
    assignment = Assignment(x={"k": {"s": 1.0}}, m={"k": {"s": 2}})
    schedule = Schedule(by_type={"k": TaskSchedule(type_id="k", arrivals=[0.0, 0.2], workers=["s", "s"], worker_order=["s"])})
    metrics, state = run_period(instance, assignment, schedule)
    assert (metrics.generated, metrics.delivered, metrics.delivered_in_time) == (2, 1, 0)
    assert len(state.in_flight()) == 1


def test_per_sender_in_time_counts(hybrid_instance, builtin_options):
    series = simulate_instances([hybrid_instance] * 2, Policy.HYBRID, builtin_options)
    for pm in series.periods:
        counts = pm.per_sender_in_time
        assert set(counts) == {"s1", "s2"}
        assert sum(counts.values()) == pm.delivered_in_time
        assert pm.sender_rates() == {s: float(n) for s, n in sorted(counts.items())}
    frame = series.sender_frame()
    assert list(frame.columns) == SENDER_COLUMNS
    assert len(frame) == 4
    assert frame["in_time"].sum() == sum(pm.delivered_in_time for pm in series.periods)


def test_vertical_sender_rate(vertical_instance, builtin_options):
    pm = simulate_instances([vertical_instance], Policy.HYBRID, builtin_options).periods[0]
    assert pm.per_sender_in_time == {"s": 10}
    assert pm.sender_rates() == {"s": 10.0}
