"""
Per-period instances from mobility/link traces or a synthetic generator.

Trace CSV schemas (the integration boundary with external traffic and network
simulators):

* membership: ``time_s, car_id, present, v2v_capable`` (state changes; a car
  keeps its last listed state until listed again)
* SINR: ``time_s, src_id, dst_id, sinr_db`` (one full sample per time)
* direct rates: ``time_s, src_id, dst_id, rate_bps, medium``
"""

from __future__ import annotations

import bisect
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError
from .model import BITS_PER_KB, Instance, Medium, Node, NodeKind, Role, TaskType, build_link_table, validate_instance

logger = logging.getLogger(__name__)

# 802.11p, 10 MHz channel: minimum SINR (dB) per data rate
DSRC_SINR_TABLE: List[Tuple[float, float]] = [
    (5.0, 3e6),
    (6.0, 4.5e6),
    (8.0, 6e6),
    (11.0, 9e6),
    (15.0, 12e6),
    (20.0, 18e6),
    (25.0, 24e6),
    (26.0, 27e6),
]


class TaskProfile(BaseModel):
    """Shared parameters of every task type in a scenario; ``d`` is in KB."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    data_kb: float = Field(alias="d", gt=0)
    compute_cycles: float = Field(alias="c", gt=0)
    max_delay_s: float = Field(alias="tau", gt=0)

    @property
    def data_bits(self) -> float:
        return self.data_kb * BITS_PER_KB


TASK_PROFILES: Dict[str, TaskProfile] = {
    "image": TaskProfile(d=20, c=1e9, tau=0.6),
    "point_cloud": TaskProfile(d=400, c=2e8, tau=0.6),
}


class ScenarioConfig(BaseModel):
    """Scenario parameters; JSON keys may use the short table names (T, eta_s, mu_c1, ...)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    period_s: float = Field(default=1.0, alias="T", gt=0)
    sender_share: float = Field(default=0.2, alias="eta_s", ge=0, le=1)
    receiver_share: float = Field(default=0.2, alias="eta_r", ge=0, le=1)
    v2v_penetration: float = Field(default=1.0, ge=0, le=1)
    # one car may hold both the sender and the receiver role
    allow_role_overlap: bool = False

    sender_hz: float = Field(default=1e9, alias="mu_c1", gt=0)
    highend_hz: float = Field(default=5e9, alias="mu_c2", gt=0)
    edge_hz: float = Field(default=1e10, alias="mu_c3", gt=0)
    highend_share: float = Field(default=0.3, ge=0, le=1)

    lte_rate_mean_bps: float = Field(default=50e6, alias="mu_r", gt=0)
    lte_rate_std_bps: float = Field(default=5e6, alias="sigma_r", ge=0)
    lte_rate_floor_bps: float = Field(default=1e6, gt=0)

    # None means uncapped
    cap_lte_bps: Optional[float] = Field(default=24e6, alias="u_lte")
    cap_v2v_bps: Optional[float] = Field(default=None, alias="u_v2v")

    task_profile: str = "image"
    task_profiles: Dict[str, TaskProfile] = Field(default_factory=lambda: dict(TASK_PROFILES))

    n_edge_servers: int = Field(default=1, ge=1)
    microcloud_radius_m: float = Field(default=150.0, gt=0)
    sinr_table: List[Tuple[float, float]] = Field(default_factory=lambda: list(DSRC_SINR_TABLE))

    # synthetic generator
    n_cars: int = Field(default=20, ge=0)
    arrival_rate_per_s: float = Field(default=0.0, ge=0)
    mean_dwell_s: Optional[float] = None
    tx_power_dbm: float = 20.0
    noise_dbm: float = -95.0
    path_loss_ref_db: float = 47.9
    path_loss_exponent: float = 2.75
    shadowing_std_db: float = 4.0
    min_distance_m: float = 1.0

    seed: int = 0

    @field_validator("cap_lte_bps", "cap_v2v_bps")
    @classmethod
    def _cap_positive(cls, v):
        if v is not None and v <= 0:
            raise ValueError("caps must be positive or null (uncapped)")
        return v

    @field_validator("sinr_table")
    @classmethod
    def _table_sorted(cls, v):
        if not v:
            raise ValueError("sinr_table must not be empty")
        thresholds = [t for t, _ in v]
        if thresholds != sorted(thresholds):
            raise ValueError("sinr_table thresholds must be sorted ascending")
        if any(r <= 0 for _, r in v):
            raise ValueError("sinr_table rates must be positive")
        return v

    @model_validator(mode="after")
    def _profile_known(self):
        if self.task_profile not in self.task_profiles:
            raise ValueError(f"unknown task_profile {self.task_profile!r}; known: {sorted(self.task_profiles)}")
        return self

    @property
    def profile(self) -> TaskProfile:
        return self.task_profiles[self.task_profile]

    def with_value(self, name: str, value) -> "ScenarioConfig":
        """Copy with one parameter replaced (field name or table alias), re-validated."""
        fields = {f.alias or n: n for n, f in type(self).model_fields.items()}
        key = fields.get(name, name)
        if key not in type(self).model_fields:
            raise ConfigError(f"unknown scenario parameter {name!r}")
        data = self.model_dump()
        data[key] = value
        return type(self).model_validate(data)


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    """Read a scenario file (JSON or YAML)."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) if path.suffix in (".yaml", ".yml") else json.loads(path.read_text())
        return ScenarioConfig.model_validate(raw or {})
    except FileNotFoundError as e:
        raise ConfigError(f"scenario file not found: {path}") from e
    except (ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"invalid scenario file {path}: {e}") from e


def sinr_to_rate(sinr_db: float, table: List[Tuple[float, float]]) -> float:
    """Step function: rate of the highest threshold not above ``sinr_db``; 0 below the lowest."""
    if not table:
        raise ConfigError("SINR mapping table is empty")
    thresholds = np.array([t for t, _ in table])
    idx = int(np.searchsorted(thresholds, sinr_db, side="right")) - 1
    return 0.0 if idx < 0 else float(table[idx][1])


def sample_lte_rate(rng: np.random.Generator, mean_bps: float, std_bps: float, floor_bps: float) -> float:
    """One Normal(mean, std) draw clamped below at ``floor_bps``."""
    return max(floor_bps, float(rng.normal(mean_bps, std_bps)))


def path_loss_sinr(distance_m: float, shadowing_db: float, config: ScenarioConfig) -> float:
    """Log-distance path loss with log-normal shadowing; interference is not modelled."""
    d = max(distance_m, config.min_distance_m)
    loss = config.path_loss_ref_db + 10 * config.path_loss_exponent * math.log10(d) + shadowing_db
    return config.tx_power_dbm - loss - config.noise_dbm


# ---------------------------------------------------------------------------
# Timelines
# ---------------------------------------------------------------------------

@dataclass
class Snapshot:
    time_s: float
    # car id -> V2V capability (None when the trace does not say)
    members: Dict[str, Optional[bool]] = field(default_factory=dict)
    sinr_db: Dict[Tuple[str, str], float] = field(default_factory=dict)
    rates: Dict[Tuple[str, str], Tuple[float, Medium]] = field(default_factory=dict)
    positions: Dict[str, Tuple[float, float]] = field(default_factory=dict)


@dataclass
class TraceTimeline:
    snapshots: List[Snapshot] = field(default_factory=list)
    synthetic: bool = False

    def __post_init__(self) -> None:
        times = [s.time_s for s in self.snapshots]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("timeline snapshot times must be nondecreasing")

    @property
    def start_s(self) -> float:
        return self.snapshots[0].time_s if self.snapshots else 0.0

    @property
    def end_s(self) -> float:
        return self.snapshots[-1].time_s if self.snapshots else 0.0

    def at(self, t: float) -> Snapshot:
        """Latest snapshot not after ``t``."""
        if not self.snapshots or t < self.start_s - 1e-9:
            raise ValueError(f"time {t} is outside the timeline span [{self.start_s}, {self.end_s}]")
        idx = bisect.bisect_right([s.time_s for s in self.snapshots], t + 1e-9) - 1
        return self.snapshots[idx]


def _pair_seed(seed: int, a: str, b: str) -> np.random.SeedSequence:
    lo, hi = sorted((a, b))
    return np.random.SeedSequence([seed, 3, zlib.crc32(lo.encode()), zlib.crc32(hi.encode())])


def synth_timeline(config: ScenarioConfig, duration_s: float, seed: Optional[int] = None) -> TraceTimeline:
    """Synthetic stand-in for a traffic/network simulator export.

    Cars enter as a Poisson process, stay for an exponential dwell time (forever
    when ``mean_dwell_s`` is None) and sit at uniform positions inside the
    micro-cloud disk. One snapshot per period carries the pairwise SINR.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    radius = config.microcloud_radius_m

    def place() -> Tuple[float, float]:
        r = radius * math.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * math.pi)
        return r * math.cos(phi), r * math.sin(phi)

    def dwell() -> float:
        return math.inf if config.mean_dwell_s is None else float(rng.exponential(config.mean_dwell_s))

    cars: List[Tuple[str, float, float, Tuple[float, float]]] = []
    for _ in range(config.n_cars):
        cars.append((f"car{len(cars):03d}", 0.0, dwell(), place()))
    if config.arrival_rate_per_s > 0:
        t = float(rng.exponential(1.0 / config.arrival_rate_per_s))
        while t < duration_s:
            stay = dwell()
            cars.append((f"car{len(cars):03d}", t, t + stay, place()))
            t += float(rng.exponential(1.0 / config.arrival_rate_per_s))

    shadowing: Dict[Tuple[str, str], float] = {}
    snapshots = []
    n_periods = max(1, int(math.ceil(duration_s / config.period_s - 1e-9)))
    for p in range(n_periods):
        t = p * config.period_s
        present = [(cid, pos) for cid, enter, leave, pos in cars if enter <= t < leave]
        snap = Snapshot(time_s=t, members={cid: None for cid, _ in present}, positions=dict(present))
        for i, (a, pa) in enumerate(present):
            for b, pb in present[i + 1:]:
                key = (a, b) if a < b else (b, a)
                if key not in shadowing:
                    shadowing[key] = float(np.random.default_rng(_pair_seed(seed, a, b)).normal(0.0, config.shadowing_std_db))
                sinr = path_loss_sinr(math.dist(pa, pb), shadowing[key], config)
                snap.sinr_db[(a, b)] = snap.sinr_db[(b, a)] = sinr
        snapshots.append(snap)
    logger.debug(f"Synthesized {len(snapshots)} snapshots over {len(cars)} cars")
    return TraceTimeline(snapshots, synthetic=True)


def load_trace(
    membership_csv: str | Path,
    sinr_csv: Optional[str | Path] = None,
    rate_csv: Optional[str | Path] = None,
) -> TraceTimeline:
    """Assemble a timeline from trace CSV files."""
    try:
        members = pd.read_csv(membership_csv)
        sinr = pd.read_csv(sinr_csv) if sinr_csv else None
        rates = pd.read_csv(rate_csv) if rate_csv else None
    except FileNotFoundError as e:
        raise ConfigError(f"trace file not found: {e.filename}") from e

    _require(members, ["time_s", "car_id", "present"], membership_csv)
    if sinr is not None:
        _require(sinr, ["time_s", "src_id", "dst_id", "sinr_db"], sinr_csv)
    if rates is not None:
        _require(rates, ["time_s", "src_id", "dst_id", "rate_bps", "medium"], rate_csv)

    times = set(members["time_s"].astype(float))
    for frame in (sinr, rates):
        if frame is not None:
            times |= set(frame["time_s"].astype(float))

    has_flag = "v2v_capable" in members.columns
    state: Dict[str, Optional[bool]] = {}
    by_time = {t: g for t, g in members.groupby(members["time_s"].astype(float), sort=True)}
    sinr_by_time = {} if sinr is None else {t: g for t, g in sinr.groupby(sinr["time_s"].astype(float), sort=True)}
    rate_by_time = {} if rates is None else {t: g for t, g in rates.groupby(rates["time_s"].astype(float), sort=True)}

    snapshots: List[Snapshot] = []
    last_sinr: Dict[Tuple[str, str], float] = {}
    last_rates: Dict[Tuple[str, str], Tuple[float, Medium]] = {}
    for t in sorted(times):
        for row in by_time.get(t, pd.DataFrame()).itertuples(index=False):
            cid = str(row.car_id)
            if int(row.present):
                flag = getattr(row, "v2v_capable", None) if has_flag else None
                state[cid] = None if flag is None or pd.isna(flag) else bool(int(flag))
            else:
                state.pop(cid, None)
        if t in sinr_by_time:
            g = sinr_by_time[t]
            last_sinr = {(str(a), str(b)): float(s) for a, b, s in zip(g["src_id"], g["dst_id"], g["sinr_db"])}
        if t in rate_by_time:
            g = rate_by_time[t]
            last_rates = {
                (str(a), str(b)): (float(r), Medium(str(m)))
                for a, b, r, m in zip(g["src_id"], g["dst_id"], g["rate_bps"], g["medium"])
            }
        snapshots.append(Snapshot(time_s=t, members=dict(state), sinr_db=dict(last_sinr), rates=dict(last_rates)))
    logger.info(f"Loaded trace with {len(snapshots)} snapshots from {membership_csv}")
    return TraceTimeline(snapshots)


def _require(frame: pd.DataFrame, columns: List[str], source) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigError(f"{source}: missing columns {missing}")


def write_trace(timeline: TraceTimeline, directory: str | Path) -> Dict[str, Path]:
    """Write a timeline in the trace CSV schemas; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    member_rows, sinr_rows, rate_rows = [], [], []
    previous: Set[str] = set()
    for snap in timeline.snapshots:
        for cid in sorted(previous - set(snap.members)):
            member_rows.append({"time_s": snap.time_s, "car_id": cid, "present": 0, "v2v_capable": None})
        for cid, flag in sorted(snap.members.items()):
            member_rows.append({"time_s": snap.time_s, "car_id": cid, "present": 1, "v2v_capable": None if flag is None else int(flag)})
        previous = set(snap.members)
        for (a, b), s in sorted(snap.sinr_db.items()):
            sinr_rows.append({"time_s": snap.time_s, "src_id": a, "dst_id": b, "sinr_db": s})
        for (a, b), (r, m) in sorted(snap.rates.items()):
            rate_rows.append({"time_s": snap.time_s, "src_id": a, "dst_id": b, "rate_bps": r, "medium": m.value})

    paths = {"membership": directory / "membership.csv"}
    pd.DataFrame(member_rows, columns=["time_s", "car_id", "present", "v2v_capable"]).to_csv(paths["membership"], index=False)
    if sinr_rows:
        paths["sinr"] = directory / "sinr.csv"
        pd.DataFrame(sinr_rows).to_csv(paths["sinr"], index=False, float_format="%.6f")
    if rate_rows:
        paths["rates"] = directory / "rates.csv"
        pd.DataFrame(rate_rows).to_csv(paths["rates"], index=False)
    return paths


# ---------------------------------------------------------------------------
# Instance construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CarTraits:
    highend: bool
    v2v_draw: float


def role_count(share: float, n: int) -> int:
    """round(share * n), halves rounded up."""
    return int(math.floor(share * n + 0.5))


class ScenarioBuilder:
    """Turns a timeline into per-period instances, keeping roles sticky for cars that stay."""

    def __init__(self, timeline: TraceTimeline, config: ScenarioConfig, seed: Optional[int] = None) -> None:
        self.timeline = timeline
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.roles: Dict[str, Set[Role]] = {}
        self.period = 0
        self._traits: Dict[str, CarTraits] = {}

    def traits(self, car_id: str) -> CarTraits:
        if car_id not in self._traits:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0, zlib.crc32(car_id.encode())]))
            u_high, u_v2v = rng.uniform(size=2)
            self._traits[car_id] = CarTraits(highend=bool(u_high < self.config.highend_share), v2v_draw=float(u_v2v))
        return self._traits[car_id]

    def _assign_roles(self, members: Dict[str, Optional[bool]], rng: np.random.Generator) -> None:
        present = sorted(members)
        self.roles = {cid: held for cid, held in self.roles.items() if cid in members}
        n = len(present)
        for role, share in ((Role.SENDER, self.config.sender_share), (Role.RECEIVER, self.config.receiver_share)):
            holders = sorted(cid for cid, held in self.roles.items() if role in held)
            target = role_count(share, n)
            if len(holders) > target:
                for cid in rng.choice(holders, size=len(holders) - target, replace=False):
                    self.roles[str(cid)].discard(role)
                    if not self.roles[str(cid)]:
                        del self.roles[str(cid)]
            elif len(holders) < target:
                # senders and receivers are V2V capable; cars flagged otherwise are not eligible
                if self.config.allow_role_overlap:
                    pool = [cid for cid in present if role not in self.roles.get(cid, ()) and members[cid] is not False]
                else:
                    pool = [cid for cid in present if cid not in self.roles and members[cid] is not False]
                take = min(target - len(holders), len(pool))
                if take < target - len(holders):
                    logger.debug(f"Only {len(pool)} cars eligible for {role.value}, wanted {target - len(holders)}")
                for cid in rng.choice(pool, size=take, replace=False) if take else []:
                    self.roles.setdefault(str(cid), set()).add(role)

    def instance_at(self, t: float) -> Instance:
        """Instance of the period starting at ``t``; advances the sticky role state."""
        cfg = self.config
        snap = self.timeline.at(t)
        period = self.period
        self.period += 1
        self._assign_roles(snap.members, np.random.default_rng(np.random.SeedSequence([self.seed, 1, period])))

        nodes: List[Node] = []
        v2v: Dict[str, bool] = {}
        for cid in sorted(snap.members):
            held = self.roles.get(cid, set())
            traits = self.traits(cid)
            if held:
                capable = True
            elif snap.members[cid] is not None:
                capable = bool(snap.members[cid])
            else:
                capable = traits.v2v_draw < cfg.v2v_penetration
            v2v[cid] = capable
            roles = set(held)
            if capable:
                roles.add(Role.WORKER)
            if Role.SENDER in held:
                hz = cfg.sender_hz
            else:
                hz = cfg.highend_hz if traits.highend else cfg.sender_hz
            nodes.append(Node(id=cid, kind=NodeKind.CAR, compute_hz=hz, v2v_capable=capable, roles=frozenset(roles)))
        edges = [f"edge{i}" for i in range(cfg.n_edge_servers)]
        for eid in edges:
            nodes.append(Node(id=eid, kind=NodeKind.EDGE_SERVER, compute_hz=cfg.edge_hz))

        raw: List[Tuple[str, str, float]] = []
        capable_cars = [cid for cid in sorted(snap.members) if v2v[cid]]
        for a in capable_cars:
            for b in capable_cars:
                if a == b:
                    continue
                if (a, b) in snap.rates and snap.rates[(a, b)][1] == Medium.V2V:
                    rate = snap.rates[(a, b)][0]
                elif (a, b) in snap.sinr_db:
                    rate = sinr_to_rate(snap.sinr_db[(a, b)], cfg.sinr_table)
                else:
                    rate = 0.0
                if rate > 0:
                    raw.append((a, b, rate))
        for cid in sorted(snap.members):
            lte_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2, period, zlib.crc32(cid.encode())]))
            sampled = sample_lte_rate(lte_rng, cfg.lte_rate_mean_bps, cfg.lte_rate_std_bps, cfg.lte_rate_floor_bps)
            for eid in edges:
                up = snap.rates.get((cid, eid), (sampled, Medium.LTE))[0]
                down = snap.rates.get((eid, cid), (sampled, Medium.LTE))[0]
                raw += [(cid, eid, up), (eid, cid, down)]

        senders = sorted(cid for cid, held in self.roles.items() if Role.SENDER in held)
        receivers = tuple(sorted(cid for cid, held in self.roles.items() if Role.RECEIVER in held))
        profile = cfg.profile
        task_types = tuple(
            TaskType(
                id=f"tt_{s}",
                data_bits=profile.data_bits,
                compute_cycles=profile.compute_cycles,
                sender=s,
                receivers=receivers or (s,),
                max_delay_s=profile.max_delay_s,
            )
            for s in senders
        )
        instance = Instance(
            nodes=tuple(nodes),
            links=build_link_table(nodes, raw),
            task_types=task_types,
            period_s=cfg.period_s,
            cap_lte_bps=cfg.cap_lte_bps,
            cap_v2v_bps=cfg.cap_v2v_bps,
        )
        return validate_instance(instance)

    def instances(self, duration_s: Optional[float] = None) -> Iterator[Instance]:
        """One instance per period from the timeline start for ``duration_s`` (default: the whole span)."""
        T = self.config.period_s
        start = self.timeline.start_s
        if duration_s is None:
            duration_s = self.timeline.end_s - start + T
        n_periods = max(0, int(math.ceil(duration_s / T - 1e-9)))
        for p in range(n_periods):
            yield self.instance_at(start + p * T)


def snapshot_instance(timeline: TraceTimeline, t: float, config: ScenarioConfig, seed: Optional[int] = None) -> Instance:
    """Instance of the period containing ``t``, replaying role history from the timeline start."""
    builder = ScenarioBuilder(timeline, config, seed)
    T = config.period_s
    n_prior = max(0, int(math.floor((t - timeline.start_s) / T + 1e-9)))
    for p in range(n_prior):
        builder.instance_at(timeline.start_s + p * T)
    return builder.instance_at(timeline.start_s + n_prior * T)
