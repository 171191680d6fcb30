"""
Domain model: nodes, links, task types and per-period instances.

Units are fixed throughout the package: bits, seconds, cycles and Hz.
"""

from __future__ import annotations

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from .errors import ConfigError, InstanceValidationError

logger = logging.getLogger(__name__)

BITS_PER_KB = 8000


class NodeKind(str, Enum):
    CAR = "Car"
    EDGE_SERVER = "EdgeServer"


class Role(str, Enum):
    SENDER = "Sender"
    RECEIVER = "Receiver"
    WORKER = "Worker"


class Medium(str, Enum):
    LTE = "LTE"
    V2V = "V2V"
    NONE = "None"
    SELF = "Self"


class Node(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    kind: NodeKind = NodeKind.CAR
    compute_hz: float = 0.0
    v2v_capable: bool = False
    roles: FrozenSet[Role] = frozenset()

    @model_validator(mode="before")
    @classmethod
    def _edge_servers_work(cls, data):
        # Edge servers are always worker-eligible.
        if isinstance(data, dict) and data.get("kind") in (NodeKind.EDGE_SERVER, NodeKind.EDGE_SERVER.value):
            roles = set(data.get("roles") or ())
            roles.add(Role.WORKER)
            data = {**data, "roles": frozenset(Role(r) for r in roles)}
        return data

    def has_role(self, role: Role) -> bool:
        return role in self.roles

    @property
    def is_edge(self) -> bool:
        return self.kind == NodeKind.EDGE_SERVER


class RawRate(BaseModel):
    """One directional rate entry as it arrives from a trace or an instance file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    src: str
    dst: str
    rate_bps: float


class LinkTable(BaseModel):
    """Directional rates R[i][j] and the medium of every listed pair."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rate_bps: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    medium: Dict[str, Dict[str, Medium]] = Field(default_factory=dict)

    def medium_of(self, src: str, dst: str) -> Medium:
        if src == dst:
            return Medium.SELF
        return self.medium.get(src, {}).get(dst, Medium.NONE)

    def rate(self, src: str, dst: str) -> float:
        if src == dst:
            return 0.0
        return self.rate_bps.get(src, {}).get(dst, 0.0)

    def pairs(self) -> Iterator[Tuple[str, str, Medium, float]]:
        for src in sorted(self.medium):
            for dst in sorted(self.medium[src]):
                yield src, dst, self.medium[src][dst], self.rate(src, dst)

    def raw_rates(self) -> List[RawRate]:
        return [RawRate(src=s, dst=d, rate_bps=r) for s, d, m, r in self.pairs() if m in (Medium.LTE, Medium.V2V)]


def _derive_medium(a: Node, b: Node) -> Optional[Medium]:
    """Medium implied by the endpoint kinds, or None when the pair can never communicate."""
    if a.is_edge and b.is_edge:
        return None
    if a.is_edge or b.is_edge:
        return Medium.LTE
    if a.v2v_capable and b.v2v_capable:
        return Medium.V2V
    return None


def build_link_table(nodes: Sequence[Node], raw_rates: Iterable) -> LinkTable:
    """Assign a medium to every supplied rate.

    Args:
        nodes: the node list of the instance
        raw_rates: RawRate entries or (src, dst, bits/s) tuples

    Returns:
        LinkTable with LTE/V2V media; unlisted pairs read back as Medium.NONE

    Raises:
        InstanceValidationError naming every unknown or impossible pair
    """
    index = {n.id: n for n in nodes}
    rates: Dict[str, Dict[str, float]] = {}
    media: Dict[str, Dict[str, Medium]] = {}
    errors: List[str] = []

    for entry in raw_rates:
        if not isinstance(entry, RawRate):
            src, dst, value = entry
            entry = RawRate(src=str(src), dst=str(dst), rate_bps=float(value))
        src, dst = entry.src, entry.dst
        if src not in index or dst not in index:
            missing = [x for x in (src, dst) if x not in index]
            errors.append(f"link ({src}, {dst}): unknown node {', '.join(missing)}")
            continue
        if src == dst:
            errors.append(f"link ({src}, {dst}): a node has no link to itself")
            continue
        if entry.rate_bps < 0:
            errors.append(f"link ({src}, {dst}): rate_bps must be non-negative")
            continue
        medium = _derive_medium(index[src], index[dst])
        if medium is None:
            errors.append(f"link ({src}, {dst}): impossible pair, neither V2V nor LTE can connect them")
            continue
        if dst in media.get(src, {}):
            errors.append(f"link ({src}, {dst}): listed more than once")
            continue
        if entry.rate_bps == 0:
            continue
        rates.setdefault(src, {})[dst] = float(entry.rate_bps)
        media.setdefault(src, {})[dst] = medium

    if errors:
        raise InstanceValidationError(errors)
    return LinkTable(rate_bps=rates, medium=media)


class TaskType(BaseModel):
    """Parameters A_k shared by all frames of one task type."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    data_bits: float
    compute_cycles: float
    sender: str
    receivers: Tuple[str, ...]
    max_delay_s: float


class Task(BaseModel):
    """One frame l of a task type, generated at ``arrival_s`` after the period start."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type_id: str
    index: int
    arrival_s: float


class Instance(BaseModel):
    """The world of one optimization period."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    nodes: Tuple[Node, ...]
    links: LinkTable = Field(default_factory=LinkTable)
    task_types: Tuple[TaskType, ...] = ()
    period_s: float = 1.0
    # None means uncapped.
    cap_lte_bps: Optional[float] = None
    cap_v2v_bps: Optional[float] = None

    _node_index: Dict[str, Node] = PrivateAttr(default_factory=dict)
    _tt_index: Dict[str, TaskType] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        self._node_index = {n.id: n for n in self.nodes}
        self._tt_index = {t.id: t for t in self.task_types}

    def node(self, node_id: str) -> Node:
        return self._node_index[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_index

    def task_type(self, tt_id: str) -> TaskType:
        return self._tt_index[tt_id]

    def with_role(self, role: Role) -> Tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.has_role(role))

    @property
    def workers(self) -> Tuple[Node, ...]:
        return self.with_role(Role.WORKER)

    @property
    def senders(self) -> Tuple[Node, ...]:
        return self.with_role(Role.SENDER)

    @property
    def receivers(self) -> Tuple[Node, ...]:
        return self.with_role(Role.RECEIVER)

    @property
    def edge_servers(self) -> Tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.is_edge)

    @property
    def microcloud(self) -> Tuple[Node, ...]:
        """C': the V2V-capable cars."""
        return tuple(n for n in self.nodes if not n.is_edge and n.v2v_capable)

    @property
    def lte_budget_bits(self) -> float:
        return float("inf") if self.cap_lte_bps is None else self.cap_lte_bps * self.period_s

    @property
    def v2v_budget_bits(self) -> float:
        return float("inf") if self.cap_v2v_bps is None else self.cap_v2v_bps * self.period_s

    def medium(self, src: str, dst: str) -> Medium:
        return self.links.medium_of(src, dst)

    def rate(self, src: str, dst: str) -> float:
        return self.links.rate(src, dst)


def instance_violations(instance: Instance) -> List[str]:
    """Every invariant violation of the instance, each naming the offending id."""
    out: List[str] = []
    seen: set = set()
    for n in instance.nodes:
        if n.id in seen:
            out.append(f"node {n.id}: duplicate id")
        seen.add(n.id)
        if n.compute_hz < 0:
            out.append(f"node {n.id}: compute_hz must be non-negative")
        if n.has_role(Role.WORKER) and n.compute_hz <= 0:
            out.append(f"node {n.id}: compute_hz must be positive for a worker")
        if n.is_edge and n.v2v_capable:
            out.append(f"node {n.id}: edge servers cannot be V2V capable")
        if n.is_edge and not n.has_role(Role.WORKER):
            out.append(f"node {n.id}: edge servers must be worker-eligible")
        if not n.is_edge and n.has_role(Role.WORKER) and not n.v2v_capable:
            out.append(f"node {n.id}: worker car must belong to the micro cloud (V2V capable)")

    if not instance.workers:
        out.append("instance: worker set is empty")
    if instance.period_s <= 0:
        out.append("instance: period_s must be positive")
    for name in ("cap_lte_bps", "cap_v2v_bps"):
        cap = getattr(instance, name)
        if cap is not None and cap < 0:
            out.append(f"instance: {name} must be non-negative")

    for src, dst, medium, rate in instance.links.pairs():
        if not (instance.has_node(src) and instance.has_node(dst)):
            out.append(f"link ({src}, {dst}): unknown node")
            continue
        expected = _derive_medium(instance.node(src), instance.node(dst))
        if medium not in (Medium.LTE, Medium.V2V) or medium != expected:
            out.append(f"link ({src}, {dst}): medium {medium.value} does not match endpoint kinds")
        if rate <= 0:
            out.append(f"link ({src}, {dst}): rate_bps must be positive on a listed link")

    tt_seen: set = set()
    for tt in instance.task_types:
        if tt.id in tt_seen:
            out.append(f"task type {tt.id}: duplicate id")
        tt_seen.add(tt.id)
        for field in ("data_bits", "compute_cycles", "max_delay_s"):
            if not getattr(tt, field) > 0:
                out.append(f"task type {tt.id}: {field} must be positive")
        if not instance.has_node(tt.sender):
            out.append(f"task type {tt.id}: sender {tt.sender} is not a node")
        elif not instance.node(tt.sender).has_role(Role.SENDER):
            out.append(f"task type {tt.id}: sender {tt.sender} does not hold the Sender role")
        if not tt.receivers:
            out.append(f"task type {tt.id}: receivers must be non-empty")
        if len(set(tt.receivers)) != len(tt.receivers):
            out.append(f"task type {tt.id}: receivers contain duplicates")
        for r in tt.receivers:
            if not instance.has_node(r):
                out.append(f"task type {tt.id}: receiver {r} is not a node")
    return out


def validate_instance(instance: Instance) -> Instance:
    """Check every type invariant; return the instance or raise with all violations."""
    violations = instance_violations(instance)
    if violations:
        raise InstanceValidationError(violations)
    return instance


def drop_medium(instance: Instance, medium: Medium) -> Instance:
    """Copy of the instance with every link on ``medium`` removed."""
    rates: Dict[str, Dict[str, float]] = {}
    media: Dict[str, Dict[str, Medium]] = {}
    for src, dst, m, r in instance.links.pairs():
        if m == medium:
            continue
        rates.setdefault(src, {})[dst] = r
        media.setdefault(src, {})[dst] = m
    return instance.model_copy(update={"links": LinkTable(rate_bps=rates, medium=media)})


class InstanceDocument(BaseModel):
    """File form of an instance: links are listed as raw directional rates."""

    model_config = ConfigDict(extra="forbid")

    nodes: List[Node]
    links: List[RawRate] = Field(default_factory=list)
    task_types: List[TaskType] = Field(default_factory=list)
    period_s: float = 1.0
    cap_lte_bps: Optional[float] = None
    cap_v2v_bps: Optional[float] = None

    def to_instance(self) -> Instance:
        links = build_link_table(self.nodes, self.links)
        instance = Instance(
            nodes=tuple(self.nodes),
            links=links,
            task_types=tuple(self.task_types),
            period_s=self.period_s,
            cap_lte_bps=self.cap_lte_bps,
            cap_v2v_bps=self.cap_v2v_bps,
        )
        return validate_instance(instance)

    @classmethod
    def from_instance(cls, instance: Instance) -> "InstanceDocument":
        return cls(
            nodes=list(instance.nodes),
            links=instance.links.raw_rates(),
            task_types=list(instance.task_types),
            period_s=instance.period_s,
            cap_lte_bps=instance.cap_lte_bps,
            cap_v2v_bps=instance.cap_v2v_bps,
        )


def load_instance(path: str | Path) -> Instance:
    """Read an instance file; unreadable or malformed files raise ConfigError."""
    try:
        with open(path, "r") as f:
            doc = InstanceDocument.model_validate(json.load(f))
    except FileNotFoundError as e:
        raise ConfigError(f"instance file not found: {path}") from e
    except ValueError as e:
        raise ConfigError(f"invalid instance file {path}: {e}") from e
    return doc.to_instance()


def dump_instance(instance: Instance, path: str | Path) -> None:
    doc = InstanceDocument.from_instance(instance)
    Path(path).write_text(doc.model_dump_json(indent=2))
