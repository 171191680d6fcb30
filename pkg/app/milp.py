"""
Mixed-integer linear programming substrate.

``MilpProblem`` is a plain container of variables, constraints and a linear
objective. Two backends solve it:

* ``builtin``: a dense two-phase simplex (Dantzig pricing with a Bland's-rule
  fallback) under depth-first branch-and-bound. Deterministic, sized for
  desk-scale problems (a few hundred integer variables).
* ``highs``: SciPy's HiGHS interface, used as the reference solver and for
  problems above the built-in sizing bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import MilpValidationError, NumericError

logger = logging.getLogger(__name__)

INF = float("inf")

_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9
_ZERO_TOL = 1e-13
_PHASE1_TOL = 1e-7
_DEGENERATE_SWITCH = 50


class Integrality(str, Enum):
    CONTINUOUS = "Continuous"
    INTEGER = "Integer"
    BINARY = "Binary"


class Sense(str, Enum):
    MAX = "Max"
    MIN = "Min"


class Comparator(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    GAP_LIMIT = "GapLimit"
    NODE_LIMIT = "NodeLimit"


@dataclass(frozen=True)
class Variable:
    name: Optional[str]
    lower: float = 0.0
    upper: float = INF
    integrality: Integrality = Integrality.CONTINUOUS

    @property
    def is_integral(self) -> bool:
        return self.integrality != Integrality.CONTINUOUS


@dataclass(frozen=True)
class Constraint:
    terms: Tuple[Tuple[int, float], ...]
    comparator: Comparator
    rhs: float
    name: Optional[str] = None


Terms = Union[Mapping[int, float], Iterable[Tuple[int, float]]]


def _merge_terms(terms: Terms) -> Tuple[Tuple[int, float], ...]:
    items = terms.items() if isinstance(terms, Mapping) else terms
    merged: Dict[int, float] = {}
    for var, coef in items:
        merged[int(var)] = merged.get(int(var), 0.0) + float(coef)
    return tuple((v, c) for v, c in merged.items() if c != 0.0)


@dataclass
class DenseForm:
    """Matrix view of a problem; objective always in the problem's own sense."""

    c: np.ndarray
    A: np.ndarray
    comparators: List[Comparator]
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integral: np.ndarray
    maximize: bool


class MilpProblem:
    """A linear program with integrality marks."""

    def __init__(self, name: str = "problem") -> None:
        self.name = name
        self.variables: List[Variable] = []
        self.constraints: List[Constraint] = []
        self.objective: Tuple[Tuple[int, float], ...] = ()
        self.sense: Sense = Sense.MAX

    def add_variable(
        self,
        name: Optional[str] = None,
        lower: float = 0.0,
        upper: float = INF,
        integrality: Integrality = Integrality.CONTINUOUS,
    ) -> int:
        if integrality == Integrality.BINARY:
            lower, upper = max(lower, 0.0), min(upper, 1.0)
        self.variables.append(Variable(name, float(lower), float(upper), integrality))
        return len(self.variables) - 1

    def add_constraint(self, terms: Terms, comparator: Comparator, rhs: float, name: Optional[str] = None) -> int:
        self.constraints.append(Constraint(_merge_terms(terms), Comparator(comparator), float(rhs), name))
        return len(self.constraints) - 1

    def set_objective(self, terms: Terms, sense: Sense = Sense.MAX) -> None:
        self.objective = _merge_terms(terms)
        self.sense = Sense(sense)

    @property
    def num_variables(self) -> int:
        return len(self.variables)

    @property
    def num_integer(self) -> int:
        return sum(1 for v in self.variables if v.is_integral)

    def validate(self) -> "MilpProblem":
        """Raise MilpValidationError listing every malformed bound or term."""
        errors: List[str] = []
        n = len(self.variables)
        for idx, var in enumerate(self.variables):
            label = var.name or f"#{idx}"
            if math.isnan(var.lower) or math.isnan(var.upper):
                errors.append(f"variable {label}: bound is NaN")
            elif var.lower > var.upper:
                errors.append(f"variable {label}: lower bound {var.lower} exceeds upper bound {var.upper}")
            elif var.lower == INF or var.upper == -INF:
                errors.append(f"variable {label}: bounds leave no finite value")
        for idx, con in enumerate(self.constraints):
            label = con.name or f"#{idx}"
            if not math.isfinite(con.rhs):
                errors.append(f"constraint {label}: right-hand side must be finite")
            for var, coef in con.terms:
                if not 0 <= var < n:
                    errors.append(f"constraint {label}: references undeclared variable {var}")
                if not math.isfinite(coef):
                    errors.append(f"constraint {label}: coefficient of variable {var} is not finite")
        for var, coef in self.objective:
            if not 0 <= var < n:
                errors.append(f"objective: references undeclared variable {var}")
            if not math.isfinite(coef):
                errors.append(f"objective: coefficient of variable {var} is not finite")
        if errors:
            raise MilpValidationError(errors)
        return self

    def dense(self) -> DenseForm:
        n, m = len(self.variables), len(self.constraints)
        c = np.zeros(n)
        for var, coef in self.objective:
            c[var] += coef
        A = np.zeros((m, n))
        b = np.zeros(m)
        for i, con in enumerate(self.constraints):
            for var, coef in con.terms:
                A[i, var] += coef
            b[i] = con.rhs
        return DenseForm(
            c=c,
            A=A,
            comparators=[con.comparator for con in self.constraints],
            b=b,
            lb=np.array([v.lower for v in self.variables], dtype=float),
            ub=np.array([v.upper for v in self.variables], dtype=float),
            integral=np.array([v.is_integral for v in self.variables], dtype=bool),
            maximize=self.sense == Sense.MAX,
        )

    def objective_value(self, values: Sequence[float]) -> float:
        return float(sum(coef * values[var] for var, coef in self.objective))

    def max_violation(self, values: Sequence[float]) -> float:
        """Largest bound or row violation, each row scaled by max(1, max |coefficient|)."""
        worst = 0.0
        for idx, var in enumerate(self.variables):
            worst = max(worst, var.lower - values[idx], values[idx] - var.upper)
        for con in self.constraints:
            lhs = sum(coef * values[var] for var, coef in con.terms)
            scale = max([1.0] + [abs(coef) for _, coef in con.terms])
            if con.comparator == Comparator.LE:
                gap = lhs - con.rhs
            elif con.comparator == Comparator.GE:
                gap = con.rhs - lhs
            else:
                gap = abs(lhs - con.rhs)
            worst = max(worst, gap / scale)
        return float(worst)

    def integrality_violation(self, values: Sequence[float]) -> float:
        worst = 0.0
        for idx, var in enumerate(self.variables):
            if var.is_integral:
                worst = max(worst, abs(values[idx] - round(values[idx])))
        return float(worst)


@dataclass
class LpSolution:
    status: SolveStatus
    values: Optional[np.ndarray] = None
    objective: Optional[float] = None
    iterations: int = 0


@dataclass
class MilpSolution:
    status: SolveStatus
    values: Optional[np.ndarray] = None
    objective: Optional[float] = None
    gap: float = 0.0
    nodes_explored: int = 0
    root_bound: Optional[float] = None
    backend: str = "builtin"

    @property
    def has_incumbent(self) -> bool:
        return self.values is not None

    def value(self, var: int) -> float:
        if self.values is None:
            raise ValueError(f"solution has no values (status {self.status.value})")
        return float(self.values[var])


class SolverOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: Literal["builtin", "highs", "auto"] = "auto"
    n_grid: int = Field(default=5, ge=2)
    node_limit: int = Field(default=20000, gt=0)
    integrality_tol: float = Field(default=1e-6, gt=0)
    feasibility_tol: float = Field(default=1e-8, gt=0)
    gap_tol: float = Field(default=0.0, ge=0)
    epsilon: float = Field(default=0.999, gt=0, lt=1)
    max_builtin_integers: int = 500

    @classmethod
    def from_settings(cls, solver_settings) -> "SolverOptions":
        return cls.model_validate(solver_settings.model_dump())


# ---------------------------------------------------------------------------
# Dense two-phase simplex
# ---------------------------------------------------------------------------

def _pivot(T: np.ndarray, r: int, q: int) -> None:
    piv = T[r, q]
    if abs(piv) < 1e-12:
        raise NumericError(f"pivot element {piv:.3e} too small at row {r}, column {q}")
    row = T[r] / piv
    T -= np.outer(T[:, q], row)
    T[r] = row
    if not np.isfinite(T).all():
        raise NumericError("non-finite tableau entry after pivot")
    T[np.abs(T) < _ZERO_TOL] = 0.0
    rhs = T[:, -1]
    rhs[(rhs < 0) & (rhs > -1e-9)] = 0.0


def _simplex(T: np.ndarray, basis: List[int], cost: np.ndarray, allowed: np.ndarray, max_iter: int) -> Tuple[str, int]:
    """Maximize cost @ x over the tableau in place. Returns ("optimal" | "unbounded", iterations)."""
    ncol = T.shape[1] - 1
    degenerate = 0
    bland = False
    it = 0
    while True:
        rc = cost - cost[basis] @ T[:, :ncol] if basis else cost.copy()
        rc[~allowed] = 0.0
        rc[basis] = 0.0
        candidates = np.flatnonzero(rc > _COST_TOL)
        if candidates.size == 0:
            return "optimal", it
        q = int(candidates[0]) if bland else int(candidates[np.argmax(rc[candidates])])

        col = T[:, q]
        rows = np.flatnonzero(col > _PIVOT_TOL)
        if rows.size == 0:
            return "unbounded", it
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        r = int(min(ties, key=lambda i: basis[i]))

        degenerate = degenerate + 1 if best <= 1e-12 else 0
        if degenerate > _DEGENERATE_SWITCH and not bland:
            logger.debug(f"Switching to Bland's rule after {degenerate} degenerate pivots")
            bland = True

        _pivot(T, r, q)
        basis[r] = q
        it += 1
        if it > max_iter:
            raise NumericError(f"simplex iteration limit {max_iter} reached")


def _solve_relaxation(form: DenseForm, lb: np.ndarray, ub: np.ndarray) -> LpSolution:
    """LP relaxation of ``form`` under the given bounds."""
    n = form.c.size
    if np.any(lb > ub + 1e-12):
        return LpSolution(SolveStatus.INFEASIBLE)
    c = form.c if form.maximize else -form.c

    # x_j = offset_j + sum(sign * x'_col), x' >= 0
    offset = np.zeros(n)
    cols: List[Tuple[int, float]] = []
    col_ub: List[float] = []
    for j in range(n):
        lo, hi = lb[j], ub[j]
        if np.isfinite(lo):
            offset[j] = lo
            if np.isfinite(hi) and hi - lo <= 1e-12:
                continue
            cols.append((j, 1.0))
            col_ub.append(hi - lo)
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
            col_ub.append(INF)
        else:
            cols.append((j, 1.0))
            col_ub.append(INF)
            cols.append((j, -1.0))
            col_ub.append(INF)
    k = len(cols)

    m0 = form.A.shape[0]
    M = np.zeros((m0, k))
    cost = np.zeros(k)
    for idx, (j, s) in enumerate(cols):
        M[:, idx] = s * form.A[:, j]
        cost[idx] = s * c[j]
    rhs = form.b - form.A @ offset if m0 else np.zeros(0)
    cmps = list(form.comparators)

    bounded = [idx for idx, u in enumerate(col_ub) if np.isfinite(u)]
    if bounded:
        E = np.zeros((len(bounded), k))
        E[np.arange(len(bounded)), bounded] = 1.0
        M = np.vstack([M, E])
        rhs = np.concatenate([rhs, [col_ub[i] for i in bounded]])
        cmps += [Comparator.LE] * len(bounded)

    rows, rhs_kept, cmp_kept = [], [], []
    for i in range(M.shape[0]):
        scale = np.abs(M[i]).max() if k else 0.0
        if scale == 0.0:
            r = rhs[i]
            if (cmps[i] == Comparator.LE and r < -_PHASE1_TOL) or (cmps[i] == Comparator.GE and r > _PHASE1_TOL) or (
                cmps[i] == Comparator.EQ and abs(r) > _PHASE1_TOL
            ):
                return LpSolution(SolveStatus.INFEASIBLE)
            continue
        row, r, cmp = M[i] / scale, rhs[i] / scale, cmps[i]
        if r < 0:
            row, r = -row, -r
            cmp = {Comparator.LE: Comparator.GE, Comparator.GE: Comparator.LE}.get(cmp, cmp)
        rows.append(row)
        rhs_kept.append(r)
        cmp_kept.append(cmp)
    m = len(rows)

    n_slack = sum(1 for cmp in cmp_kept if cmp != Comparator.EQ)
    n_art = sum(1 for cmp in cmp_kept if cmp != Comparator.LE)
    total = k + n_slack + n_art
    T = np.zeros((m, total + 1))
    if m:
        T[:, :k] = np.array(rows)
        T[:, -1] = rhs_kept
    basis: List[int] = []
    si, ai = k, k + n_slack
    for i, cmp in enumerate(cmp_kept):
        if cmp == Comparator.LE:
            T[i, si] = 1.0
            basis.append(si)
            si += 1
        elif cmp == Comparator.GE:
            T[i, si] = -1.0
            si += 1
            T[i, ai] = 1.0
            basis.append(ai)
            ai += 1
        else:
            T[i, ai] = 1.0
            basis.append(ai)
            ai += 1

    max_iter = 50 * (m + total) + 1000
    allowed = np.ones(total, dtype=bool)
    iterations = 0
    if n_art:
        art = np.arange(k + n_slack, total)
        phase1 = np.zeros(total)
        phase1[art] = -1.0
        _, it = _simplex(T, basis, phase1, allowed, max_iter)
        iterations += it
        if -(phase1[basis] @ T[:, -1]) > _PHASE1_TOL:
            return LpSolution(SolveStatus.INFEASIBLE, iterations=iterations)
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= k + n_slack:
                cand = np.flatnonzero(np.abs(T[i, : k + n_slack]) > _PIVOT_TOL)
                if cand.size:
                    _pivot(T, i, int(cand[0]))
                    basis[i] = int(cand[0])
                else:
                    keep[i] = False
        T = T[keep]
        basis = [bv for bv, kept in zip(basis, keep) if kept]
        allowed[art] = False

    phase2 = np.zeros(total)
    phase2[:k] = cost
    outcome, it = _simplex(T, basis, phase2, allowed, max_iter)
    iterations += it
    if outcome == "unbounded":
        return LpSolution(SolveStatus.UNBOUNDED, iterations=iterations)

    xcol = np.zeros(total)
    if basis:
        xcol[basis] = T[:, -1]
    x = offset.copy()
    for idx, (j, s) in enumerate(cols):
        x[j] += s * xcol[idx]
    return LpSolution(SolveStatus.OPTIMAL, x, float(form.c @ x), iterations)


def solve_lp(problem: MilpProblem) -> LpSolution:
    """Solve the continuous relaxation (integrality marks are ignored)."""
    problem.validate()
    form = problem.dense()
    return _solve_relaxation(form, form.lb, form.ub)


# ---------------------------------------------------------------------------
# Branch-and-bound
# ---------------------------------------------------------------------------

def _integral_objective(form: DenseForm) -> bool:
    nz = form.c != 0
    return bool(np.all(form.integral[nz]) and np.all(form.c[nz] == np.round(form.c[nz])))


def _polish(
    form: DenseForm, lb: np.ndarray, ub: np.ndarray, x: np.ndarray, int_idx: np.ndarray, bound: float, sign: float
) -> Tuple[np.ndarray, float]:
    """Round the integer part of a near-integral vertex and re-solve the continuous part with it fixed."""
    fixed = np.round(x[int_idx])
    plb, pub = lb.copy(), ub.copy()
    plb[int_idx] = fixed
    pub[int_idx] = fixed
    lp = _solve_relaxation(form, plb, pub)
    if lp.status == SolveStatus.OPTIMAL:
        values = lp.values
        values[int_idx] = fixed
        return values, sign * float(form.c @ values)
    out = x.copy()
    out[int_idx] = fixed
    return out, bound


def solve_milp(problem: MilpProblem, options: Optional[SolverOptions] = None) -> MilpSolution:
    """Depth-first branch-and-bound over LP relaxations.

    Branches on the most fractional integer variable (lowest index on ties)
    and explores the child nearer to the relaxation value first.

    Args:
        problem: validated problem with at least one variable
        options: tolerances and node limit

    Returns:
        MilpSolution; NodeLimit and GapLimit carry the incumbent when one exists
    """
    options = options or SolverOptions()
    problem.validate()
    if problem.num_variables == 0:
        raise MilpValidationError(["problem has no variables"])

    form = problem.dense()
    sign = 1.0 if form.maximize else -1.0
    int_idx = np.flatnonzero(form.integral)
    integral_obj = _integral_objective(form)
    lb0, ub0 = form.lb.copy(), form.ub.copy()
    lb0[int_idx] = np.ceil(lb0[int_idx] - options.integrality_tol)
    ub0[int_idx] = np.floor(ub0[int_idx] + options.integrality_tol)

    root = _solve_relaxation(form, lb0, ub0)
    if root.status != SolveStatus.OPTIMAL:
        return MilpSolution(root.status, nodes_explored=1)
    root_bound = root.objective

    best_val = -INF
    incumbent: Optional[np.ndarray] = None
    stack: List[Tuple[np.ndarray, np.ndarray, float, Optional[LpSolution]]] = [(lb0, ub0, sign * root_bound, root)]
    nodes = 0
    status: Optional[SolveStatus] = None

    def prunable(bound: float) -> bool:
        if incumbent is None:
            return False
        if integral_obj:
            return math.floor(bound + 1e-6) <= best_val + 1e-9
        return bound <= best_val + 1e-9

    while stack:
        if nodes >= options.node_limit:
            status = SolveStatus.NODE_LIMIT
            break
        lb, ub, parent_bound, lp = stack.pop()
        if prunable(parent_bound):
            continue
        nodes += 1
        if lp is None:
            lp = _solve_relaxation(form, lb, ub)
        if lp.status != SolveStatus.OPTIMAL:
            continue
        bound = sign * lp.objective
        if prunable(bound):
            continue

        x = lp.values
        frac = x[int_idx] - np.floor(x[int_idx])
        dist = np.minimum(frac, 1.0 - frac)
        fractional = dist > options.integrality_tol
        if not fractional.any():
            incumbent, best_val = _polish(form, lb, ub, x, int_idx, bound, sign)
            logger.debug(f"New incumbent {sign * best_val:.6g} after {nodes} nodes")
            if options.gap_tol > 0 and stack:
                open_bound = max(b for _, _, b, _ in stack)
                if (open_bound - best_val) / max(1.0, abs(best_val)) <= options.gap_tol:
                    status = SolveStatus.GAP_LIMIT
                    break
            continue

        pick = int(np.argmax(np.where(fractional, dist, -1.0)))
        j = int(int_idx[pick])
        down_ub, up_lb = ub.copy(), lb.copy()
        down_ub[j] = math.floor(x[j])
        up_lb[j] = math.ceil(x[j])
        down = (lb, down_ub, bound, None)
        up = (up_lb, ub, bound, None)
        # last pushed is explored first
        if frac[pick] >= 0.5:
            stack.extend([down, up])
        else:
            stack.extend([up, down])

    open_bound = max([b for _, _, b, _ in stack], default=-INF)
    if status is None:
        status = SolveStatus.OPTIMAL if incumbent is not None else SolveStatus.INFEASIBLE
    if incumbent is None:
        return MilpSolution(status, nodes_explored=nodes, root_bound=root_bound)

    gap = 0.0
    if status != SolveStatus.OPTIMAL and open_bound > best_val:
        gap = (open_bound - best_val) / max(1.0, abs(best_val))
    if status == SolveStatus.NODE_LIMIT:
        logger.warning(f"Node limit {options.node_limit} reached; incumbent {sign * best_val:.6g}, gap {gap:.3g}")
    return MilpSolution(
        status=status,
        values=incumbent,
        objective=float(form.c @ incumbent),
        gap=gap,
        nodes_explored=nodes,
        root_bound=root_bound,
    )


# ---------------------------------------------------------------------------
# HiGHS backend
# ---------------------------------------------------------------------------

def solve_milp_highs(problem: MilpProblem, options: Optional[SolverOptions] = None) -> MilpSolution:
    """Solve through ``scipy.optimize.milp`` (HiGHS)."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    options = options or SolverOptions()
    problem.validate()
    if problem.num_variables == 0:
        raise MilpValidationError(["problem has no variables"])
    form = problem.dense()
    c = -form.c if form.maximize else form.c

    constraints = None
    if form.A.shape[0]:
        lo = np.where([cmp == Comparator.LE for cmp in form.comparators], -INF, form.b)
        hi = np.where([cmp == Comparator.GE for cmp in form.comparators], INF, form.b)
        constraints = LinearConstraint(form.A, lo, hi)

    res = milp(
        c,
        constraints=constraints,
        integrality=form.integral.astype(int),
        bounds=Bounds(form.lb, form.ub),
        options={"node_limit": options.node_limit, "mip_rel_gap": options.gap_tol, "disp": False},
    )
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    gap = float(getattr(res, "mip_gap", 0.0) or 0.0)
    values = None if res.x is None else np.asarray(res.x, dtype=float)
    objective = None if values is None else float(form.c @ values)

    if res.status == 0:
        status = SolveStatus.OPTIMAL if gap <= 1e-9 else SolveStatus.GAP_LIMIT
    elif res.status == 1:
        status = SolveStatus.NODE_LIMIT
    elif res.status == 2:
        status = SolveStatus.INFEASIBLE
    elif res.status == 3:
        status = SolveStatus.UNBOUNDED
    else:
        raise NumericError(f"HiGHS failed: {res.message}")
    return MilpSolution(status, values, objective, gap, nodes, None, backend="highs")


def solve(problem: MilpProblem, options: Optional[SolverOptions] = None) -> MilpSolution:
    """Dispatch to the configured backend."""
    options = options or SolverOptions()
    backend = options.backend
    if backend == "auto":
        backend = "builtin" if problem.num_integer <= options.max_builtin_integers else "highs"
    logger.debug(
        f"Solving {problem.name}: {problem.num_variables} vars ({problem.num_integer} integer), "
        f"{len(problem.constraints)} rows, backend={backend}"
    )
    if backend == "highs":
        return solve_milp_highs(problem, options)
    return solve_milp(problem, options)
