"""
Frame generation times and round-robin task-to-worker mapping.
"""

from __future__ import annotations

import logging
import zlib
from typing import Dict, List, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .assignment import Assignment
from .model import Instance

logger = logging.getLogger(__name__)


def arrival_times(count: int, period_s: float) -> List[float]:
    """Evenly spaced generation times t_l = (l - 1) T / L within one period."""
    if count <= 0:
        return []
    return [l * period_s / count for l in range(count)]


def round_robin(m: Mapping[str, int], worker_order: Sequence[str]) -> List[str]:
    """Walk the worker order repeatedly, handing one task to each worker with residual count.

    Returns the worker of each task index l.
    """
    residual = {w: int(m.get(w, 0)) for w in worker_order}
    total = sum(max(0, n) for n in m.values())
    if sum(residual.values()) < total:
        missing = sorted(w for w, n in m.items() if n > 0 and w not in residual)
        raise ValueError(f"worker_order is missing workers with tasks: {missing}")

    z: List[str] = []
    while len(z) < total:
        for w in worker_order:
            if residual[w] > 0:
                z.append(w)
                residual[w] -= 1
    return z


class TaskSchedule(BaseModel):
    type_id: str
    arrivals: List[float] = Field(default_factory=list)
    workers: List[str] = Field(default_factory=list)
    worker_order: List[str] = Field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.arrivals)

    def z(self, l: int, w: str) -> int:  # noqa: E741
        return int(self.workers[l] == w)

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for w in self.workers:
            out[w] = out.get(w, 0) + 1
        return out


class Schedule(BaseModel):
    seed: int = 0
    by_type: Dict[str, TaskSchedule] = Field(default_factory=dict)

    @property
    def total_tasks(self) -> int:
        return sum(ts.count for ts in self.by_type.values())


def shuffled_workers(workers: Sequence[str], seed: int, type_id: str) -> List[str]:
    """Seeded permutation; each task type draws from its own stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(type_id.encode())]))
    return [workers[i] for i in rng.permutation(len(workers))]


def build_schedule(instance: Instance, assignment: Assignment, seed: int = 0) -> Schedule:
    schedule = Schedule(seed=seed)
    for tt in instance.task_types:
        row = {w: n for w, n in assignment.m.get(tt.id, {}).items() if n > 0}
        workers = [node.id for node in instance.nodes if node.id in row]
        order = shuffled_workers(workers, seed, tt.id)
        mapping = round_robin(row, order)
        schedule.by_type[tt.id] = TaskSchedule(
            type_id=tt.id,
            arrivals=arrival_times(len(mapping), instance.period_s),
            workers=mapping,
            worker_order=order,
        )
    logger.debug(f"Scheduled {schedule.total_tasks} tasks across {len(schedule.by_type)} task types")
    return schedule
