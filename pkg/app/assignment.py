"""
Resource assignment: the linearized task-count maximization, its extraction
and verification, and the baseline policies it is compared against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import AssignmentError, ConfigError, InstanceValidationError, SolverStatusError
from .milp import Comparator, Integrality, MilpProblem, MilpSolution, Sense, SolveStatus, SolverOptions, solve
from .model import Instance, Medium, Role, TaskType, drop_medium

logger = logging.getLogger(__name__)

_CLEAN_TOL = 1e-9
_SNAP_TOL = 1e-7


class Policy(str, Enum):
    HYBRID = "Hybrid"
    VERTICAL_ONLY = "VerticalOnly"
    NO_OFFLOAD = "NoOffload"
    RANDOM_HYBRID = "RandomHybrid"


Shares = Dict[str, Dict[str, float]]


class Assignment(BaseModel):
    """Shares X, Y^LTE, Y^V2V keyed [task type][worker] plus task counts M."""

    model_config = ConfigDict(extra="forbid")

    x: Shares = Field(default_factory=dict)
    y_lte: Shares = Field(default_factory=dict)
    y_v2v: Shares = Field(default_factory=dict)
    m: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    policy: Policy = Policy.HYBRID
    solver_status: Optional[str] = None
    objective: Optional[float] = None

    @property
    def l(self) -> Dict[str, int]:  # noqa: E743
        return {k: sum(row.values()) for k, row in self.m.items()}

    @property
    def total_tasks(self) -> int:
        return sum(sum(row.values()) for row in self.m.values())

    def share(self, k: str, w: str) -> float:
        return self.x.get(k, {}).get(w, 0.0)

    def tasks(self, k: str, w: str) -> int:
        return self.m.get(k, {}).get(w, 0)

    def y(self, k: str, w: str, medium: Medium) -> float:
        table = self.y_lte if medium == Medium.LTE else self.y_v2v if medium == Medium.V2V else {}
        return table.get(k, {}).get(w, 0.0)

    def active_pairs(self) -> Iterator[Tuple[str, str]]:
        for k in sorted(self.x):
            for w in sorted(self.x[k]):
                if self.x[k][w] > 0:
                    yield k, w


def _set(table: Dict, k: str, w: str, value) -> None:
    table.setdefault(k, {})[w] = value


def _finite(cap: Optional[float]) -> bool:
    return cap is not None and math.isfinite(cap)


def task_count(instance: Instance, tt: TaskType, worker: str, x: float) -> int:
    """M = floor(T * F_w * X / c_k)."""
    if x <= 0:
        return 0
    return int(math.floor(instance.period_s * instance.node(worker).compute_hz * x / tt.compute_cycles))


# ---------------------------------------------------------------------------
# Linearized P1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairVars:
    """Variable ids of one (task type, worker) pair."""

    k: str
    w: str
    medium: Medium
    x: int
    v: int
    b: int
    y: Optional[int] = None
    u: Tuple[int, ...] = ()


@dataclass
class LinearizationArtifacts:
    grid_size: int
    alpha: Tuple[float, ...]
    epsilon: float
    pairs: Dict[Tuple[str, str], PairVars] = field(default_factory=dict)

    @property
    def v(self) -> Dict[Tuple[str, str], int]:
        return {key: p.v for key, p in self.pairs.items()}

    @property
    def u(self) -> Dict[Tuple[str, str], Tuple[int, ...]]:
        return {key: p.u for key, p in self.pairs.items() if p.u}

    @property
    def b(self) -> Dict[Tuple[str, str], int]:
        return {key: p.b for key, p in self.pairs.items()}


def candidate_pairs(instance: Instance) -> List[Tuple[TaskType, str, Medium]]:
    """(task type, worker, medium) triples that may carry load; others are forced to zero."""
    out = []
    for tt in instance.task_types:
        for node in instance.workers:
            if node.id == tt.sender:
                out.append((tt, node.id, Medium.SELF))
                continue
            medium = instance.medium(tt.sender, node.id)
            if medium in (Medium.LTE, Medium.V2V) and instance.rate(tt.sender, node.id) > 0:
                out.append((tt, node.id, medium))
    return out


def build_p1(instance: Instance, grid_size: int = 5, epsilon: float = 0.999) -> Tuple[MilpProblem, LinearizationArtifacts]:
    """Linearize the task-count maximization for one period.

    Args:
        instance: validated period instance
        grid_size: N; delay split points are alpha = n/N for n = 1..N-1
        epsilon: slack of the floor pair (T F X / c - epsilon <= V)

    Returns:
        The MILP and the ids of its helper variables
    """
    if grid_size < 2:
        raise ConfigError(f"grid_size must be at least 2, got {grid_size}")
    if not instance.workers:
        raise InstanceValidationError(["instance: worker set is empty"])

    T = instance.period_s
    alpha = tuple(n / grid_size for n in range(1, grid_size))
    artifacts = LinearizationArtifacts(grid_size=grid_size, alpha=alpha, epsilon=epsilon)
    problem = MilpProblem(name="P1")

    lte_traffic: Dict[int, float] = {}
    v2v_traffic: Dict[int, float] = {}
    compute_share: Dict[str, Dict[int, float]] = {}
    tx_share: Dict[Tuple[str, Medium], Dict[int, float]] = {}

    for tt, w, medium in candidate_pairs(instance):
        F = instance.node(w).compute_hz
        c, d, tau = tt.compute_cycles, tt.data_bits, tt.max_delay_s
        per_share = T * F / c
        tag = f"{tt.id},{w}"

        x = problem.add_variable(f"x[{tag}]", 0.0, 1.0)
        v = problem.add_variable(f"v[{tag}]", 0.0, math.floor(per_share + 1e-9), Integrality.INTEGER)
        b = problem.add_variable(f"b[{tag}]", integrality=Integrality.BINARY)
        problem.add_constraint({v: 1.0, x: -per_share}, Comparator.LE, 0.0, f"floor_hi[{tag}]")
        problem.add_constraint({x: per_share, v: -1.0}, Comparator.LE, epsilon, f"floor_lo[{tag}]")
        problem.add_constraint({x: 1.0, b: -1.0}, Comparator.LE, 0.0, f"ind[{tag}]")
        compute_share.setdefault(w, {})[x] = 1.0

        if medium == Medium.SELF:
            # (1 - B) + tau F X / c >= 1
            problem.add_constraint({x: tau * F / c, b: -1.0}, Comparator.GE, 0.0, f"local[{tag}]")
            artifacts.pairs[(tt.id, w)] = PairVars(tt.id, w, medium, x, v, b)
            continue

        R = instance.rate(tt.sender, w)
        y = problem.add_variable(f"y_{medium.value}[{tag}]", 0.0, 1.0)
        problem.add_constraint({v: 1.0, y: -T * R / d}, Comparator.LE, 0.0, f"C1[{tag}]")
        (lte_traffic if medium == Medium.LTE else v2v_traffic)[v] = d
        tx_share.setdefault((tt.sender, medium), {})[y] = 1.0

        u_ids = []
        for n, a in enumerate(alpha, start=1):
            u = problem.add_variable(f"u{n}[{tag}]", integrality=Integrality.BINARY)
            problem.add_constraint({u: 1.0, x: a * tau * F / c}, Comparator.GE, 1.0, f"gc{n}[{tag}]")
            problem.add_constraint({u: 1.0, y: (1.0 - a) * tau * R / d}, Comparator.GE, 1.0, f"gt{n}[{tag}]")
            u_ids.append(u)
        problem.add_constraint({**{u: 1.0 for u in u_ids}, b: 1.0}, Comparator.LE, float(len(alpha)), f"grid[{tag}]")
        artifacts.pairs[(tt.id, w)] = PairVars(tt.id, w, medium, x, v, b, y, tuple(u_ids))

    if lte_traffic and _finite(instance.cap_lte_bps):
        problem.add_constraint(lte_traffic, Comparator.LE, instance.cap_lte_bps * T, "C2")
    if v2v_traffic and _finite(instance.cap_v2v_bps):
        problem.add_constraint(v2v_traffic, Comparator.LE, instance.cap_v2v_bps * T, "C3")
    for w, terms in compute_share.items():
        problem.add_constraint(terms, Comparator.LE, 1.0, f"C6[{w}]")
    for (sender, medium), terms in tx_share.items():
        family = "C7" if medium == Medium.LTE else "C8"
        problem.add_constraint(terms, Comparator.LE, 1.0, f"{family}[{sender}]")

    problem.set_objective({p.v: 1.0 for p in artifacts.pairs.values()}, Sense.MAX)
    logger.debug(
        f"Built P1: {len(artifacts.pairs)} pairs, {problem.num_variables} vars, {len(problem.constraints)} rows, N={grid_size}"
    )
    return problem, artifacts


def extract_assignment(instance: Instance, solution: MilpSolution, artifacts: LinearizationArtifacts) -> Assignment:
    """Read shares from a solution and recompute task counts with the true floor.

    Shares within 1e-7 tasks below an integer count are snapped up to it so the
    count and share stay consistent. A worker whose compute shares would sum
    past 1 after snapping keeps its raw shares and the lower counts.
    """
    if solution.status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED) or not solution.has_incumbent:
        raise SolverStatusError(f"no assignment to extract: solver status {solution.status.value}")

    out = Assignment(solver_status=solution.status.value, objective=solution.objective)
    T = instance.period_s
    raw_sum: Dict[str, float] = {}
    snapped: Dict[str, List[Tuple[str, float, float]]] = {}
    for (k, w), p in artifacts.pairs.items():
        tt = instance.task_type(k)
        per_share = T * instance.node(w).compute_hz / tt.compute_cycles
        x = float(np.clip(solution.value(p.x), 0.0, 1.0))
        if x < _CLEAN_TOL:
            x = 0.0
        raw_sum[w] = raw_sum.get(w, 0.0) + x
        m = int(math.floor(per_share * x + _SNAP_TOL)) if x > 0 else 0
        if m > per_share * x:
            snapped.setdefault(w, []).append((k, x, per_share))
            x = min(1.0, m / per_share)
        _set(out.x, k, w, x)
        _set(out.m, k, w, m)
        if p.y is not None:
            y = float(np.clip(solution.value(p.y), 0.0, 1.0))
            _set(out.y_lte if p.medium == Medium.LTE else out.y_v2v, k, w, 0.0 if y < _CLEAN_TOL else y)

    for w, entries in snapped.items():
        share_sum = sum(row[w] for row in out.x.values() if w in row)
        if share_sum <= max(1.0, raw_sum[w]):
            continue
        logger.debug(f"Undoing share snap on {w}: compute shares would sum to {share_sum:.12g}")
        for k, x, per_share in entries:
            _set(out.x, k, w, x)
            _set(out.m, k, w, int(math.floor(per_share * x)))

    total = out.total_tasks
    if solution.objective is not None:
        drift = abs(total - solution.objective)
        if drift > len(instance.task_types) * len(instance.workers):
            raise AssignmentError(f"recomputed task total {total} departs from solver objective {solution.objective:.6g}")
        if drift > 1e-6:
            logger.debug(f"Recomputed task total {total} vs solver objective {solution.objective:.6g}")
    return out


# ---------------------------------------------------------------------------
# Verification in the original nonlinear form
# ---------------------------------------------------------------------------

class FamilyResult(BaseModel):
    family: str
    passed: bool = True
    worst_slack: Optional[float] = None
    violations: List[str] = Field(default_factory=list)

    def check(self, slack: float, tolerance: float, label: str) -> None:
        """Record one check; ``slack`` is rhs - lhs in the constraint's own units."""
        if self.worst_slack is None or slack < self.worst_slack:
            self.worst_slack = slack
        if slack < -tolerance:
            self.passed = False
            self.violations.append(f"{label}: slack {slack:.6g}")


FAMILIES = ("floor", "C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8", "local_delay", "medium")


class Report(BaseModel):
    families: Dict[str, FamilyResult] = Field(default_factory=lambda: {f: FamilyResult(family=f) for f in FAMILIES})

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.families.values())

    def failures(self) -> List[str]:
        return [f for f, r in self.families.items() if not r.passed]

    def __getitem__(self, family: str) -> FamilyResult:
        return self.families[family]


def verify_assignment(instance: Instance, assignment: Assignment, rel_tol: float = 1e-9) -> Report:
    """Re-check the assignment against the true floor, delay sum, caps and budgets."""
    report = Report()
    T = instance.period_s

    def tol(scale: float) -> float:
        return rel_tol * max(1.0, abs(scale))

    traffic = {Medium.LTE: 0.0, Medium.V2V: 0.0}
    compute: Dict[str, float] = {}
    tx: Dict[Tuple[str, Medium], float] = {}

    for k in sorted(set(assignment.x) | set(assignment.m) | set(assignment.y_lte) | set(assignment.y_v2v)):
        try:
            tt = instance.task_type(k)
        except KeyError:
            report["medium"].check(-1.0, 0.0, f"task type {k} not in instance")
            continue
        workers = set(assignment.x.get(k, {})) | set(assignment.m.get(k, {}))
        workers |= set(assignment.y_lte.get(k, {})) | set(assignment.y_v2v.get(k, {}))
        for w in sorted(workers):
            pair = f"({k}, {w})"
            if not instance.has_node(w):
                report["medium"].check(-1.0, 0.0, f"{pair} worker not in instance")
                continue
            x, m = assignment.share(k, w), assignment.tasks(k, w)
            medium = instance.medium(tt.sender, w)
            F = instance.node(w).compute_hz
            R = instance.rate(tt.sender, w)
            compute[w] = compute.get(w, 0.0) + x

            for ymed in (Medium.LTE, Medium.V2V):
                yv = assignment.y(k, w, ymed)
                if yv > 0:
                    if medium != ymed:
                        report["medium"].check(-yv, 0.0, f"{pair} {ymed.value} share on a {medium.value} pair")
                    tx[(tt.sender, ymed)] = tx.get((tt.sender, ymed), 0.0) + yv
            if x > 0 and medium not in (Medium.SELF, Medium.LTE, Medium.V2V):
                report["medium"].check(-x, 0.0, f"{pair} compute share without a link")
                continue
            if medium != Medium.SELF and x > 0 and not instance.node(w).has_role(Role.WORKER):
                report["medium"].check(-x, 0.0, f"{pair} compute share on a non-worker")

            quantity = T * F * x / tt.compute_cycles if F > 0 else 0.0
            report["floor"].check(quantity - m, tol(quantity), f"{pair} m={m} exceeds {quantity:.6g}")
            if m > 0 or x > 0:
                report["floor"].check(m + 1 - quantity, tol(quantity), f"{pair} m={m} under-counts {quantity:.6g}")

            if medium == Medium.SELF:
                if x > 0:
                    delay = tt.compute_cycles / (F * x) if F > 0 else math.inf
                    report["local_delay"].check(tt.max_delay_s - delay, tol(tt.max_delay_s), f"{pair} compute delay {delay:.6g}")
                continue
            if medium not in (Medium.LTE, Medium.V2V):
                continue

            y = assignment.y(k, w, medium)
            if m > 0:
                capacity = T * R * y
                report["C1"].check(capacity - m * tt.data_bits, tol(capacity), f"{pair} {m} frames need {m * tt.data_bits:.6g} bits")
            traffic[medium] += m * tt.data_bits
            if x > 0:
                family = "C4" if medium == Medium.V2V else "C5"
                tx_delay = tt.data_bits / (R * y) if R * y > 0 else math.inf
                delay = tx_delay + tt.compute_cycles / (F * x)
                report[family].check(tt.max_delay_s - delay, tol(tt.max_delay_s), f"{pair} delay {delay:.6g}")

    for medium, family, budget in (
        (Medium.LTE, "C2", instance.lte_budget_bits),
        (Medium.V2V, "C3", instance.v2v_budget_bits),
    ):
        if math.isfinite(budget):
            report[family].check(budget - traffic[medium], tol(budget), f"{traffic[medium]:.6g} bits")
    for w, total in compute.items():
        report["C6"].check(1.0 - total, 1e-8, f"worker {w} shares sum to {total:.6g}")
    for (sender, medium), total in tx.items():
        family = "C7" if medium == Medium.LTE else "C8"
        report[family].check(1.0 - total, 1e-8, f"sender {sender} shares sum to {total:.6g}")
    return report


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def solve_p1(instance: Instance, options: Optional[SolverOptions] = None) -> Tuple[Assignment, Optional[MilpSolution]]:
    """Build, solve and extract P1. K = 0 short-circuits to an empty assignment."""
    options = options or SolverOptions()
    if not instance.task_types:
        return Assignment(solver_status=SolveStatus.OPTIMAL.value, objective=0.0), None
    problem, artifacts = build_p1(instance, options.n_grid, options.epsilon)
    solution = solve(problem, options)
    if not solution.has_incumbent:
        raise SolverStatusError(f"P1 solve ended with status {solution.status.value} and no incumbent")
    assignment = extract_assignment(instance, solution, artifacts)
    logger.debug(
        f"P1 {solution.status.value}: objective {solution.objective:.6g}, {assignment.total_tasks} tasks, "
        f"{solution.nodes_explored} nodes ({solution.backend})"
    )
    return assignment, solution


def _self_processing(instance: Instance, policy: Policy) -> Assignment:
    out = Assignment(policy=policy)
    by_sender: Dict[str, List[TaskType]] = {}
    for tt in instance.task_types:
        by_sender.setdefault(tt.sender, []).append(tt)
    for sender, tts in by_sender.items():
        share = 1.0 / len(tts)
        for tt in tts:
            _set(out.x, tt.id, sender, share)
            _set(out.m, tt.id, sender, task_count(instance, tt, sender, share))
    return out


def random_hybrid(instance: Instance, seed: int) -> Assignment:
    """Senders keep their own task types; every other worker takes a random reachable one at full capacity."""
    rng = np.random.default_rng(seed)
    out = _self_processing(instance, Policy.RANDOM_HYBRID)
    senders = {tt.sender for tt in instance.task_types}
    links: Dict[Tuple[str, Medium], List[Tuple[str, str]]] = {}

    for node in instance.workers:
        if node.id in senders:
            continue
        reachable = [
            tt for tt in instance.task_types
            if instance.medium(tt.sender, node.id) in (Medium.LTE, Medium.V2V) and instance.rate(tt.sender, node.id) > 0
        ]
        if not reachable:
            continue
        tt = reachable[int(rng.integers(len(reachable)))]
        _set(out.x, tt.id, node.id, 1.0)
        _set(out.m, tt.id, node.id, task_count(instance, tt, node.id, 1.0))
        links.setdefault((tt.sender, instance.medium(tt.sender, node.id)), []).append((tt.id, node.id))

    for (_, medium), pairs in links.items():
        table = out.y_lte if medium == Medium.LTE else out.y_v2v
        for k, w in pairs:
            _set(table, k, w, 1.0 / len(pairs))
    return out


def baseline_assignment(instance: Instance, policy: Policy, seed: int = 0, options: Optional[SolverOptions] = None) -> Assignment:
    policy = Policy(policy)
    if policy == Policy.NO_OFFLOAD:
        return _self_processing(instance, policy)
    if policy == Policy.RANDOM_HYBRID:
        return random_hybrid(instance, seed)
    if policy == Policy.VERTICAL_ONLY:
        assignment, _ = solve_p1(drop_medium(instance, Medium.V2V), options)
        return assignment.model_copy(update={"policy": policy})
    raise ValueError(f"{policy.value} is not a baseline policy")


def assign(
    instance: Instance, policy: Policy, options: Optional[SolverOptions] = None, seed: int = 0
) -> Tuple[Assignment, Optional[MilpSolution]]:
    """Produce the period's assignment under ``policy`` (solution is None for heuristic policies)."""
    policy = Policy(policy)
    if policy == Policy.HYBRID:
        return solve_p1(instance, options)
    if policy == Policy.VERTICAL_ONLY:
        assignment, solution = solve_p1(drop_medium(instance, Medium.V2V), options)
        return assignment.model_copy(update={"policy": policy}), solution
    return baseline_assignment(instance, policy, seed, options), None
