import math

import pytest

from app.assignment import (
    Assignment,
    Policy,
    assign,
    baseline_assignment,
    build_p1,
    extract_assignment,
    random_hybrid,
    solve_p1,
    task_count,
    verify_assignment,
)
from app.errors import ConfigError
from app.milp import SolverOptions, SolveStatus, solve
from app.model import Medium, Node, Role

from conftest import IMAGE, edge, make_instance, sender, task_type, worker
from oracle import brute_force, random_instance


def test_task_count_floor(vertical_instance):
    tt = vertical_instance.task_type("tt_s")
    assert task_count(vertical_instance, tt, "e", 1.0) == 10
    assert task_count(vertical_instance, tt, "e", 0.35) == 3
    assert task_count(vertical_instance, tt, "e", 0.0) == 0


def test_vertical_image_tasks(vertical_instance, builtin_options):
    assignment, solution = solve_p1(vertical_instance, builtin_options)
    assert solution.status == SolveStatus.OPTIMAL
    assert assignment.total_tasks == 10
    assert assignment.tasks("tt_s", "e") == 10
    # 1 GHz sender cannot finish a 1E9-cycle task within 0.6 s
    assert assignment.tasks("tt_s", "s") == 0
    assert verify_assignment(vertical_instance, assignment).passed


def test_lte_cap_limits_point_cloud_offload(point_cloud_instance, builtin_options):
    assignment, _ = solve_p1(point_cloud_instance, builtin_options)
    # 5 local + floor(24e6 / 3.2e6) = 7 offloaded
    assert assignment.tasks("tt_s", "s") == 5
    assert assignment.tasks("tt_s", "e") == 7
    report = verify_assignment(point_cloud_instance, assignment)
    assert report.passed
    assert report["C2"].worst_slack >= 0


def test_uncapped_point_cloud_uses_the_full_link(point_cloud_instance, builtin_options):
    uncapped = point_cloud_instance.model_copy(update={"cap_lte_bps": None})
    assignment, _ = solve_p1(uncapped, builtin_options)
    # C1: m * 3.2e6 <= 50e6
    assert assignment.tasks("tt_s", "e") == 15
    assert assignment.total_tasks == 20


def test_hybrid_beats_vertical_only(hybrid_instance, builtin_options):
    hybrid, _ = assign(hybrid_instance, Policy.HYBRID, builtin_options)
    vertical, _ = assign(hybrid_instance, Policy.VERTICAL_ONLY, builtin_options)
    assert hybrid.total_tasks >= vertical.total_tasks
    assert vertical.policy == Policy.VERTICAL_ONLY
    assert not any(v > 0 for row in vertical.y_v2v.values() for v in row.values())
    assert verify_assignment(hybrid_instance, hybrid).passed
    assert verify_assignment(hybrid_instance, vertical).passed


def test_linearization_artifacts(vertical_instance):
    problem, artifacts = build_p1(vertical_instance, grid_size=5)
    assert artifacts.alpha == (0.2, 0.4, 0.6, 0.8)
    assert set(artifacts.pairs) == {("tt_s", "s"), ("tt_s", "e")}
    assert len(artifacts.u[("tt_s", "e")]) == 4
    assert ("tt_s", "s") not in artifacts.u
    names = [c.name for c in problem.constraints]
    assert "C1[tt_s,e]" in names
    assert "grid[tt_s,e]" in names
    assert "C7[s]" in names
    assert not any(name.startswith("C2") for name in names)


def test_grid_size_must_be_at_least_two(vertical_instance):
    with pytest.raises(ConfigError):
        build_p1(vertical_instance, grid_size=1)


def test_no_task_types_short_circuits(vertical_instance):
    empty = vertical_instance.model_copy(update={"task_types": ()})
    assignment, solution = solve_p1(empty)
    assert solution is None
    assert assignment.total_tasks == 0
    assert assignment.objective == 0.0


def test_extract_snaps_share_up_to_task_count(vertical_instance):
    problem, artifacts = build_p1(vertical_instance)
    solution = solve(problem, SolverOptions(backend="builtin"))
    pair = artifacts.pairs[("tt_s", "e")]
    values = solution.values.copy()
    values[pair.x] = 0.7 - 1e-9
    solution.values = values
    solution.objective = 7.0
    assignment = extract_assignment(vertical_instance, solution, artifacts)
    assert assignment.tasks("tt_s", "e") == 7
    assert assignment.share("tt_s", "e") == pytest.approx(0.7)


def test_infinite_caps_are_uncapped(vertical_instance, point_cloud_instance, builtin_options):
    caps = {"cap_lte_bps": math.inf, "cap_v2v_bps": math.inf}
    problem, _ = build_p1(vertical_instance.model_copy(update=caps))
    assert not any(c.name in ("C2", "C3") for c in problem.constraints)
    assignment, _ = solve_p1(vertical_instance.model_copy(update=caps), builtin_options)
    assert assignment.tasks("tt_s", "e") == 10
    uncapped = point_cloud_instance.model_copy(update=caps)
    assignment, _ = solve_p1(uncapped, builtin_options)
    assert assignment.tasks("tt_s", "e") == 15
    assert verify_assignment(uncapped, assignment).passed


def test_snap_never_overfills_a_worker(hybrid_instance):
    problem, artifacts = build_p1(hybrid_instance)
    solution = solve(problem, SolverOptions(backend="builtin"))
    values = solution.values.copy()
    # 10 image tasks per full edge share: 6.99999999 + 3.00000001 tasks
    values[artifacts.pairs[("tt_s1", "e")].x] = 0.7 - 1e-9
    values[artifacts.pairs[("tt_s2", "e")].x] = 0.3 + 1e-9
    solution.values = values
    assignment = extract_assignment(hybrid_instance, solution, artifacts)
    assert assignment.share("tt_s1", "e") + assignment.share("tt_s2", "e") == pytest.approx(1.0, abs=1e-12)
    assert assignment.tasks("tt_s1", "e") == 6
    assert assignment.tasks("tt_s2", "e") == 3
    assert verify_assignment(hybrid_instance, assignment)["C6"].passed


def test_verify_flags_delay_violation(vertical_instance):
    # 10 tasks over a 0.1% transmit share: 0.0032 / 0.001 = 3.2 s
    bad = Assignment(x={"tt_s": {"e": 1.0}}, y_lte={"tt_s": {"e": 0.001}}, m={"tt_s": {"e": 10}})
    report = verify_assignment(vertical_instance, bad)
    assert not report.passed
    assert "C5" in report.failures()
    assert "C1" in report.failures()


def test_verify_flags_floor_and_budget_violations(vertical_instance):
    bad = Assignment(x={"tt_s": {"e": 0.5, "s": 0.6}}, y_lte={"tt_s": {"e": 1.2}}, m={"tt_s": {"e": 7, "s": 0}})
    report = verify_assignment(vertical_instance, bad)
    assert {"floor", "C7", "local_delay"} <= set(report.failures())


def test_verify_flags_share_on_missing_medium(hybrid_instance):
    vertical_only_view = Assignment(x={"tt_s1": {"a": 0.5}}, y_lte={"tt_s1": {"a": 0.5}}, m={"tt_s1": {"a": 2}})
    report = verify_assignment(hybrid_instance, vertical_only_view)
    assert "medium" in report.failures()


def test_no_offload_keeps_everything_local(hybrid_instance):
    assignment = baseline_assignment(hybrid_instance, Policy.NO_OFFLOAD)
    assert assignment.x == {"tt_s1": {"s1": 1.0}, "tt_s2": {"s2": 1.0}}
    assert assignment.total_tasks == 2
    assert assignment.y_lte == {} and assignment.y_v2v == {}


def test_random_hybrid_is_seeded(hybrid_instance):
    a = random_hybrid(hybrid_instance, seed=5)
    b = random_hybrid(hybrid_instance, seed=5)
    assert a == b
    for w in ("a", "r", "e"):
        rows = [k for k in a.x if a.share(k, w) > 0]
        assert len(rows) == 1
        assert a.share(rows[0], w) == 1.0
    for table in (a.y_lte, a.y_v2v):
        per_sender = {}
        for k, row in table.items():
            per_sender[k] = per_sender.get(k, 0.0) + sum(row.values())
        assert all(total <= 1.0 + 1e-12 for total in per_sender.values())


def test_random_hybrid_can_exceed_the_lte_cap():
    # four edge servers each take the whole task type at 1000 tasks/s; the cap fits only 150
    nodes = [sender("s"), Node(id="r", roles=frozenset({Role.RECEIVER}))] + [edge(f"e{i}", 1e12) for i in range(4)]
    raw = [("s", f"e{i}", 1e9) for i in range(4)]
    instance = make_instance(nodes, raw, [task_type("tt_s", "s")], cap_lte_bps=24e6)
    assignment = random_hybrid(instance, seed=0)
    report = verify_assignment(instance, assignment)
    assert "C2" in report.failures()


def test_unknown_policy_rejected(hybrid_instance):
    with pytest.raises(ValueError):
        baseline_assignment(hybrid_instance, "Greedy")


@pytest.mark.parametrize("seed", range(20))
def test_matches_lattice_search(seed):
    instance = random_instance(seed, lte_cap=None if seed % 2 else 4e6)
    assignment, solution = solve_p1(instance, SolverOptions(backend="builtin"))
    assert solution.status == SolveStatus.OPTIMAL
    report = verify_assignment(instance, assignment)
    assert report.passed, report.failures()
    pairs = len(instance.task_types) * len(instance.workers)
    assert assignment.total_tasks >= brute_force(instance) - pairs


@pytest.mark.parametrize("seed", range(100, 200))
def test_true_delay_never_exceeded(seed):
    instance = random_instance(seed, lte_cap=6e6)
    assignment, _ = solve_p1(instance, SolverOptions(backend="builtin", n_grid=int(2 + seed % 5)))
    for k, w in assignment.active_pairs():
        tt = instance.task_type(k)
        F = instance.node(w).compute_hz
        delay = tt.compute_cycles / (F * assignment.share(k, w))
        medium = instance.medium(tt.sender, w)
        if medium != Medium.SELF:
            y = assignment.y(k, w, medium)
            delay += math.inf if y == 0 else tt.data_bits / (instance.rate(tt.sender, w) * y)
        assert delay <= tt.max_delay_s * (1 + 1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_finer_nested_grid_never_loses_tasks(seed):
    instance = random_instance(300 + seed)
    objective = {}
    for n in (2, 5, 10):
        assignment, _ = solve_p1(instance, SolverOptions(backend="builtin", n_grid=n))
        objective[n] = assignment.total_tasks
    assert objective[2] <= objective[10]
    assert objective[5] <= objective[10]


def test_image_tasks_on_idle_high_end_car():
    # 5 GHz car over 12 Mb/s V2V: floor(5 * x) tasks, delay 0.0133/y + 0.2/x
    nodes = [sender("s"), worker("a", 5e9), Node(id="r", roles=frozenset({Role.RECEIVER})), edge()]
    raw = [("s", "a", 12e6), ("a", "s", 12e6)]
    instance = make_instance(nodes, raw, [task_type("tt_s", "s", IMAGE)])
    assignment, _ = solve_p1(instance, SolverOptions(backend="builtin"))
    assert assignment.tasks("tt_s", "a") == 5
    assert assignment.y("tt_s", "a", Medium.V2V) > 0
