"""
Discrete-event execution of scheduled tasks over consecutive periods.

Every (period, task type, worker) pair owns a dedicated FIFO channel of rate
R * y and a FIFO processor of rate F * x (fluid time-sharing). Tasks still in
flight at a period boundary keep their old channel and processor, so shares
from consecutive periods may overlap for a while.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import simpy
from scipy import stats

from .assignment import Assignment, Policy, assign, baseline_assignment, verify_assignment
from .errors import SolverStatusError
from .milp import SolverOptions
from .model import Instance, Medium
from .scheduler import Schedule, build_schedule

logger = logging.getLogger(__name__)

_DEADLINE_TOL = 1e-9

METRIC_COLUMNS = [
    "period_start_s",
    "tt_id",
    "generated",
    "in_time",
    "late",
    "mean_tx_delay_s",
    "mean_compute_delay_s",
    "bytes_lte",
    "bytes_v2v",
    "policy",
    "solver_status",
    "fallback",
    "n_senders",
]

SENDER_COLUMNS = ["period_start_s", "sender", "generated", "in_time", "rate_in_time"]


class EventKind(IntEnum):
    FRAME_GENERATED = 0
    TX_COMPLETE = 1
    COMPUTE_COMPLETE = 2
    DELIVERED = 3


@dataclass(frozen=True)
class Event:
    time: float
    kind: EventKind
    period: int
    type_id: str
    task_index: int
    worker: str

    def sort_key(self):
        return (self.time, int(self.kind), self.task_index, self.period, self.type_id)


@dataclass
class TaskRecord:
    period: int
    type_id: str
    index: int
    worker: str
    medium: Medium
    data_bits: float
    generated_s: float
    deadline_s: float
    tx_start_s: Optional[float] = None
    tx_end_s: Optional[float] = None
    compute_start_s: Optional[float] = None
    compute_end_s: Optional[float] = None

    @property
    def completed(self) -> bool:
        return self.compute_end_s is not None

    @property
    def in_time(self) -> bool:
        return self.completed and self.compute_end_s - self.generated_s <= self.deadline_s * (1 + _DEADLINE_TOL)

    @property
    def tx_delay(self) -> float:
        """Queue wait plus transmission."""
        return self.tx_end_s - self.generated_s

    @property
    def compute_delay(self) -> float:
        """Queue wait plus computation."""
        return self.compute_end_s - self.tx_end_s

    @property
    def total_delay(self) -> float:
        return self.compute_end_s - self.generated_s


@dataclass
class TypeMetrics:
    type_id: str
    sender: str = ""
    generated: int = 0
    delivered_in_time: int = 0
    delivered_late: int = 0
    tx_delay_sum: float = 0.0
    compute_delay_sum: float = 0.0
    bits_lte: float = 0.0
    bits_v2v: float = 0.0

    @property
    def delivered(self) -> int:
        return self.delivered_in_time + self.delivered_late

    @property
    def mean_tx_delay(self) -> float:
        return self.tx_delay_sum / self.delivered if self.delivered else math.nan

    @property
    def mean_compute_delay(self) -> float:
        return self.compute_delay_sum / self.delivered if self.delivered else math.nan


@dataclass
class PeriodMetrics:
    period: int
    start_s: float
    period_s: float
    n_senders: int
    by_type: Dict[str, TypeMetrics] = field(default_factory=dict)
    policy: str = Policy.HYBRID.value
    solver_status: Optional[str] = None
    fallback: str = ""

    def _sum(self, attr: str):
        return sum(getattr(m, attr) for m in self.by_type.values())

    @property
    def generated(self) -> int:
        return self._sum("generated")

    @property
    def delivered_in_time(self) -> int:
        return self._sum("delivered_in_time")

    @property
    def delivered(self) -> int:
        return self._sum("delivered")

    @property
    def bits_lte(self) -> float:
        return self._sum("bits_lte")

    @property
    def bits_v2v(self) -> float:
        return self._sum("bits_v2v")

    @property
    def rate_in_time(self) -> float:
        """Tasks per second per sender delivered within their deadline."""
        return self.delivered_in_time / (self.period_s * self.n_senders) if self.n_senders else 0.0

    @property
    def rate_processed(self) -> float:
        return self.delivered / (self.period_s * self.n_senders) if self.n_senders else 0.0

    @property
    def per_sender_in_time(self) -> Dict[str, int]:
        """In-time deliveries of this period's tasks, keyed by sender."""
        out: Dict[str, int] = {}
        for m in self.by_type.values():
            out[m.sender] = out.get(m.sender, 0) + m.delivered_in_time
        return out

    def sender_rates(self) -> Dict[str, float]:
        return {s: n / self.period_s for s, n in sorted(self.per_sender_in_time.items())}


class CarryoverState:
    """Simulation clock, in-flight tasks and the records of every period so far."""

    def __init__(self, record_events: bool = False) -> None:
        self.env = simpy.Environment()
        self.records: List[TaskRecord] = []
        self.events: List[Event] = []
        self.record_events = record_events
        self.periods = 0

    def _log(self, kind: EventKind, rec: TaskRecord) -> None:
        if self.record_events:
            self.events.append(Event(self.env.now, kind, rec.period, rec.type_id, rec.index, rec.worker))

    def _task(self, rec: TaskRecord, channel, tx_time: Optional[float], processor, compute_time: Optional[float]):
        env = self.env
        yield env.timeout(max(0.0, rec.generated_s - env.now))
        self._log(EventKind.FRAME_GENERATED, rec)
        if channel is not None:
            if tx_time is None:
                return
            with channel.request() as req:
                yield req
                rec.tx_start_s = env.now
                yield env.timeout(tx_time)
            rec.tx_end_s = env.now
            self._log(EventKind.TX_COMPLETE, rec)
        else:
            rec.tx_start_s = rec.tx_end_s = rec.generated_s
        if compute_time is None:
            return
        with processor.request() as req:
            yield req
            rec.compute_start_s = env.now
            yield env.timeout(compute_time)
        rec.compute_end_s = env.now
        self._log(EventKind.COMPUTE_COMPLETE, rec)
        self._log(EventKind.DELIVERED, rec)

    def in_flight(self) -> List[TaskRecord]:
        return [r for r in self.records if not r.completed and r.generated_s < self.env.now]

    def drain(self) -> None:
        """Run until every task that can complete has completed."""
        self.env.run()

    def metrics(self, period: int, instance: Instance, start_s: float) -> PeriodMetrics:
        senders = {tt.sender for tt in instance.task_types}
        out = PeriodMetrics(period=period, start_s=start_s, period_s=instance.period_s, n_senders=len(senders))
        for tt in instance.task_types:
            out.by_type[tt.id] = TypeMetrics(tt.id, tt.sender)
        for rec in self.records:
            if rec.period != period:
                continue
            m = out.by_type.setdefault(rec.type_id, TypeMetrics(rec.type_id))
            m.generated += 1
            if rec.tx_end_s is not None and rec.medium != Medium.SELF:
                if rec.medium == Medium.LTE:
                    m.bits_lte += rec.data_bits
                else:
                    m.bits_v2v += rec.data_bits
            if rec.completed:
                if rec.in_time:
                    m.delivered_in_time += 1
                else:
                    m.delivered_late += 1
                m.tx_delay_sum += rec.tx_delay
                m.compute_delay_sum += rec.compute_delay
        return out

    def event_trace(self) -> List[Event]:
        return sorted(self.events, key=Event.sort_key)


def run_period(
    instance: Instance,
    assignment: Assignment,
    schedule: Schedule,
    carryover: Optional[CarryoverState] = None,
    start_s: Optional[float] = None,
    final: bool = False,
) -> tuple[PeriodMetrics, CarryoverState]:
    """Simulate one period starting at ``start_s`` (default: the state's current clock).

    Metrics count tasks finished by the end of the period; with ``final`` the
    state is drained first so late completions are included.
    """
    state = carryover or CarryoverState()
    env = state.env
    start = env.now if start_s is None else start_s
    if start > env.now:
        env.run(until=start)
    period = state.periods
    state.periods += 1

    overdraft = state.in_flight()
    if overdraft:
        logger.debug(f"Period {period}: {len(overdraft)} tasks from earlier periods still in flight")

    for tt in instance.task_types:
        ts = schedule.by_type.get(tt.id)
        if ts is None:
            continue
        channels: Dict[str, simpy.Resource] = {}
        processors: Dict[str, simpy.Resource] = {}
        for l, (t_l, w) in enumerate(zip(ts.arrivals, ts.workers)):
            medium = instance.medium(tt.sender, w)
            rec = TaskRecord(period, tt.id, l, w, medium, tt.data_bits, start + t_l, tt.max_delay_s)
            state.records.append(rec)

            channel, tx_time = None, None
            if medium != Medium.SELF:
                if w not in channels:
                    channels[w] = simpy.Resource(env, capacity=1)
                channel = channels[w]
                tx_rate = instance.rate(tt.sender, w) * assignment.y(tt.id, w, medium)
                tx_time = tt.data_bits / tx_rate if tx_rate > 0 else None
            cpu_rate = instance.node(w).compute_hz * assignment.share(tt.id, w)
            compute_time = tt.compute_cycles / cpu_rate if cpu_rate > 0 else None
            if w not in processors:
                processors[w] = simpy.Resource(env, capacity=1)
            processor = processors[w]
            env.process(state._task(rec, channel, tx_time, processor, compute_time))

    env.run(until=start + instance.period_s)
    if final:
        state.drain()
    return state.metrics(period, instance, start), state


@dataclass
class MetricsSeries:
    period_s: float
    policy: str
    periods: List[PeriodMetrics] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for pm in self.periods:
            for tt_id in sorted(pm.by_type):
                m = pm.by_type[tt_id]
                rows.append(
                    {
                        "period_start_s": pm.start_s,
                        "tt_id": tt_id,
                        "generated": m.generated,
                        "in_time": m.delivered_in_time,
                        "late": m.delivered_late,
                        "mean_tx_delay_s": m.mean_tx_delay,
                        "mean_compute_delay_s": m.mean_compute_delay,
                        "bytes_lte": m.bits_lte / 8,
                        "bytes_v2v": m.bits_v2v / 8,
                        "policy": pm.policy,
                        "solver_status": pm.solver_status or "",
                        "fallback": pm.fallback,
                        "n_senders": pm.n_senders,
                    }
                )
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    def sender_frame(self) -> pd.DataFrame:
        """One row per (period, sender) with the in-time rate of that sender."""
        rows = []
        for pm in self.periods:
            generated: Dict[str, int] = {}
            for m in pm.by_type.values():
                generated[m.sender] = generated.get(m.sender, 0) + m.generated
            for s, n in sorted(pm.per_sender_in_time.items()):
                rows.append(
                    {"period_start_s": pm.start_s, "sender": s, "generated": generated[s], "in_time": n, "rate_in_time": n / pm.period_s}
                )
        return pd.DataFrame(rows, columns=SENDER_COLUMNS)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.9g")

    def summary(self) -> Dict[str, float]:
        """Period means with 95% t-intervals; delays are averaged over delivered tasks."""
        active = [pm for pm in self.periods if pm.n_senders > 0]
        delivered = sum(pm.delivered for pm in self.periods)
        tx = sum(m.tx_delay_sum for pm in self.periods for m in pm.by_type.values())
        cpu = sum(m.compute_delay_sum for pm in self.periods for m in pm.by_type.values())
        rate_mean, rate_ci = mean_ci([pm.rate_in_time for pm in active])
        proc_mean, proc_ci = mean_ci([pm.rate_processed for pm in active])
        lte_mean, _ = mean_ci([pm.bits_lte / 8 for pm in self.periods])
        v2v_mean, _ = mean_ci([pm.bits_v2v / 8 for pm in self.periods])
        return {
            "periods": len(self.periods),
            "rate_mean": rate_mean,
            "rate_ci95": rate_ci,
            "processed_rate_mean": proc_mean,
            "processed_rate_ci95": proc_ci,
            "mean_tx_delay_s": tx / delivered if delivered else math.nan,
            "mean_compute_delay_s": cpu / delivered if delivered else math.nan,
            "mean_total_delay_s": (tx + cpu) / delivered if delivered else math.nan,
            "bytes_lte_mean": lte_mean,
            "bytes_v2v_mean": v2v_mean,
            "fallback_periods": sum(1 for pm in self.periods if pm.fallback),
        }


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Sample mean and t-interval half-width (0 for fewer than two samples)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    sem = float(arr.std(ddof=1)) / math.sqrt(arr.size)
    return mean, float(stats.t.ppf(0.5 + confidence / 2, arr.size - 1) * sem)


def period_seed(seed: int, period: int) -> int:
    return int(np.random.SeedSequence([seed, period]).generate_state(1)[0])


def plan_period(
    instance: Instance, policy: Policy, options: Optional[SolverOptions], seed: int
) -> tuple[Assignment, str]:
    """Assignment for one period plus the fallback flag ("", "incumbent" or "no_offload")."""
    try:
        assignment, solution = assign(instance, policy, options, seed)
    except SolverStatusError as e:
        logger.warning(f"{policy.value}: {e}; falling back to NoOffload for this period")
        fallback = baseline_assignment(instance, Policy.NO_OFFLOAD)
        return fallback.model_copy(update={"policy": policy, "solver_status": "NoIncumbent"}), "no_offload"

    fallback = ""
    if solution is not None and assignment.solver_status == "NodeLimit":
        logger.warning(f"{policy.value}: node limit reached, using the incumbent assignment")
        fallback = "incumbent"
    if policy in (Policy.HYBRID, Policy.VERTICAL_ONLY):
        report = verify_assignment(instance, assignment, rel_tol=1e-7)
        if not report.passed:
            logger.warning(f"{policy.value} assignment fails verification: {', '.join(report.failures())}")
    return assignment, fallback


def simulate_instances(
    instances: Iterable[Instance],
    policy: Policy,
    options: Optional[SolverOptions] = None,
    seed: int = 0,
    record_events: bool = False,
) -> MetricsSeries:
    """Run consecutive periods, one per instance, then drain in-flight tasks."""
    policy = Policy(policy)
    instances = list(instances)
    state = CarryoverState(record_events=record_events)
    period_s = instances[0].period_s if instances else 1.0
    series = MetricsSeries(period_s=period_s, policy=policy.value)

    plans = []
    start = 0.0
    for p, instance in enumerate(instances):
        pseed = period_seed(seed, p)
        assignment, fallback = plan_period(instance, policy, options, pseed)
        schedule = build_schedule(instance, assignment, pseed)
        run_period(instance, assignment, schedule, state, start_s=start)
        plans.append((instance, start, assignment, fallback))
        logger.debug(f"Period {p}: {policy.value} plans {assignment.total_tasks} tasks")
        start += instance.period_s

    state.drain()
    for p, (instance, start_s, assignment, fallback) in enumerate(plans):
        pm = state.metrics(p, instance, start_s)
        pm.policy = policy.value
        pm.solver_status = assignment.solver_status
        pm.fallback = fallback
        series.periods.append(pm)
    if record_events:
        series.events = state.event_trace()
    return series


def run_simulation(
    timeline,
    config,
    policy: Policy,
    options: Optional[SolverOptions] = None,
    duration_s: Optional[float] = None,
    seed: int = 0,
    record_events: bool = False,
) -> MetricsSeries:
    """Re-plan every period over a trace timeline.

    Args:
        timeline: TraceTimeline supplying membership and link quality
        config: ScenarioConfig
        policy: Hybrid, VerticalOnly, NoOffload or RandomHybrid
        options: solver options for the optimizing policies
        duration_s: simulated span (defaults to the timeline span)
        seed: seeds role draws, LTE rates, random assignment and worker order

    Returns:
        MetricsSeries with one entry per period
    """
    from .scenario import ScenarioBuilder

    builder = ScenarioBuilder(timeline, config, seed)
    instances = list(builder.instances(duration_s))
    logger.info(f"Simulating {len(instances)} periods, policy {Policy(policy).value}, seed {seed}")
    return simulate_instances(instances, policy, options, seed, record_events)
