import logging

import pytest

from app.milp import SolverOptions
from app.model import BITS_PER_KB, Instance, Node, NodeKind, Role, TaskType, build_link_table, validate_instance
from app.scenario import ScenarioConfig

IMAGE = {"data_bits": 20 * BITS_PER_KB, "compute_cycles": 1e9, "max_delay_s": 0.6}
POINT_CLOUD = {"data_bits": 400 * BITS_PER_KB, "compute_cycles": 2e8, "max_delay_s": 0.6}


def sender(node_id: str, hz: float = 1e9) -> Node:
    return Node(id=node_id, compute_hz=hz, v2v_capable=True, roles=frozenset({Role.SENDER, Role.WORKER}))


def worker(node_id: str, hz: float = 5e9) -> Node:
    return Node(id=node_id, compute_hz=hz, v2v_capable=True, roles=frozenset({Role.WORKER}))


def edge(node_id: str = "e", hz: float = 1e10) -> Node:
    return Node(id=node_id, kind=NodeKind.EDGE_SERVER, compute_hz=hz)


def make_instance(nodes, raw, task_types, period_s: float = 1.0, cap_lte_bps=None, cap_v2v_bps=None) -> Instance:
    return validate_instance(
        Instance(
            nodes=tuple(nodes),
            links=build_link_table(nodes, raw),
            task_types=tuple(task_types),
            period_s=period_s,
            cap_lte_bps=cap_lte_bps,
            cap_v2v_bps=cap_v2v_bps,
        )
    )


def task_type(tt_id: str, sender_id: str, profile=IMAGE, receivers=("r",)) -> TaskType:
    return TaskType(id=tt_id, sender=sender_id, receivers=tuple(receivers), **profile)


@pytest.fixture
def vertical_instance() -> Instance:
    """One image sender and one edge server over a 50 Mb/s LTE link."""
    nodes = [sender("s"), edge(), Node(id="r", roles=frozenset({Role.RECEIVER}))]
    raw = [("s", "e", 50e6), ("e", "s", 50e6)]
    return make_instance(nodes, raw, [task_type("tt_s", "s")])


@pytest.fixture
def point_cloud_instance() -> Instance:
    """Point-cloud sender that can also process locally, LTE capped at 24 Mb/s."""
    nodes = [sender("s"), edge(), Node(id="r", roles=frozenset({Role.RECEIVER}))]
    raw = [("s", "e", 50e6), ("e", "s", 50e6)]
    return make_instance(nodes, raw, [task_type("tt_s", "s", POINT_CLOUD)], cap_lte_bps=24e6)


@pytest.fixture
def hybrid_instance() -> Instance:
    """Two image senders, a high-end car, a receiver and one edge server."""
    nodes = [
        sender("s1"),
        sender("s2"),
        worker("a", 5e9),
        Node(id="r", compute_hz=1e9, v2v_capable=True, roles=frozenset({Role.RECEIVER, Role.WORKER})),
        edge(),
    ]
    raw = []
    cars = ["s1", "s2", "a", "r"]
    v2v = {("s1", "a"): 12e6, ("s2", "a"): 6e6, ("s1", "r"): 9e6, ("s2", "r"): 4.5e6, ("s1", "s2"): 18e6, ("a", "r"): 24e6}
    for (i, j), rate in v2v.items():
        raw += [(i, j, rate), (j, i, rate)]
    for car in cars:
        raw += [(car, "e", 50e6), ("e", car, 50e6)]
    return make_instance(nodes, raw, [task_type("tt_s1", "s1"), task_type("tt_s2", "s2")], cap_lte_bps=24e6)


@pytest.fixture
def builtin_options() -> SolverOptions:
    return SolverOptions(backend="builtin")


@pytest.fixture
def small_scenario() -> ScenarioConfig:
    return ScenarioConfig(n_cars=10, seed=7)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO)
