"""
Fixed-format MPS export of a ``MilpProblem`` for external-solver cross-checks.
"""

from __future__ import annotations

import logging
import math
import re
from pathlib import Path
from typing import Dict, List, Optional, Set

from .milp import Comparator, Integrality, MilpProblem, Sense

logger = logging.getLogger(__name__)

OBJECTIVE_ROW = "OBJ"
_FIELD_WIDTH = 8
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\[\]()]+$")
_ROW_TYPE = {Comparator.LE: "L", Comparator.GE: "G", Comparator.EQ: "E"}


def _num(value: float) -> str:
    text = f"{value:.12g}"
    return "0" if text == "-0" else text


def _assign_names(raw: List[Optional[str]], prefix: str, reserved: Set[str]) -> tuple[List[str], Dict[str, str]]:
    """Keep a name when it fits a fixed-format field and is unique; otherwise ``{prefix}{idx:07d}``.

    A code already taken by a kept name moves on to the next free index.
    """
    used = set(reserved)
    kept: List[Optional[str]] = []
    for name in raw:
        candidate = name.replace(" ", "_") if name else None
        if candidate and len(candidate) <= _FIELD_WIDTH and _NAME_RE.match(candidate) and candidate not in used:
            used.add(candidate)
            kept.append(candidate)
        else:
            kept.append(None)

    names: List[str] = []
    renamed: Dict[str, str] = {}
    for idx, (name, candidate) in enumerate(zip(raw, kept)):
        if candidate is None:
            code = idx
            while f"{prefix}{code:07d}" in used:
                code += 1
            candidate = f"{prefix}{code:07d}"
            used.add(candidate)
            if name:
                renamed[candidate] = name
        names.append(candidate)
    return names, renamed


def _line(first: str, second: str, value: str) -> str:
    return f"    {first:<8}  {second:<8}  {value:>12}"


def export_mps(problem: MilpProblem) -> str:
    """Render the problem as fixed-format MPS text.

    Integer and binary columns are wrapped in INTORG/INTEND markers. Names that
    do not fit an 8-character field are replaced by C#######/R####### codes and
    listed in a leading comment block.
    """
    problem.validate()
    reserved = {OBJECTIVE_ROW, "RHS", "BND", "MARKER"}
    cols, col_map = _assign_names([v.name for v in problem.variables], "C", reserved)
    rows, row_map = _assign_names([c.name for c in problem.constraints], "R", reserved | set(cols))

    # column-major entries: column -> [(row, coefficient)]
    entries: List[List[tuple[str, float]]] = [[] for _ in problem.variables]
    for var, coef in problem.objective:
        entries[var].append((OBJECTIVE_ROW, coef))
    for i, con in enumerate(problem.constraints):
        for var, coef in con.terms:
            entries[var].append((rows[i], coef))

    out: List[str] = []
    if col_map or row_map:
        out.append("* generated names")
        for code, original in {**col_map, **row_map}.items():
            out.append(f"*   {code} = {original}")
    title = re.sub(r"\s+", "_", problem.name)[:_FIELD_WIDTH] or "PROBLEM"
    out.append(f"NAME          {title}")
    if problem.sense == Sense.MAX:
        out += ["OBJSENSE", "    MAX"]
    out.append("ROWS")
    out.append(f" N  {OBJECTIVE_ROW}")
    for i, con in enumerate(problem.constraints):
        out.append(f" {_ROW_TYPE[con.comparator]}  {rows[i]}")

    out.append("COLUMNS")
    in_int = False
    for j, var in enumerate(problem.variables):
        if var.is_integral and not in_int:
            out.append("    MARKER                 'MARKER'                 'INTORG'")
            in_int = True
        elif not var.is_integral and in_int:
            out.append("    MARKER                 'MARKER'                 'INTEND'")
            in_int = False
        column = entries[j] or [(OBJECTIVE_ROW, 0.0)]
        for row, coef in column:
            out.append(_line(cols[j], row, _num(coef)))
    if in_int:
        out.append("    MARKER                 'MARKER'                 'INTEND'")

    out.append("RHS")
    for i, con in enumerate(problem.constraints):
        if con.rhs != 0.0:
            out.append(_line("RHS", rows[i], _num(con.rhs)))

    out.append("BOUNDS")
    for j, var in enumerate(problem.variables):
        out.extend(_bound_lines(cols[j], var.lower, var.upper, var.integrality))
    out.append("ENDATA")
    return "\n".join(out) + "\n"


def _bound_lines(name: str, lower: float, upper: float, integrality: Integrality) -> List[str]:
    def entry(kind: str, value: Optional[float] = None) -> str:
        text = f" {kind:<2} {'BND':<8}  {name:<8}"
        return text if value is None else f"{text}  {_num(value):>12}"

    if integrality == Integrality.BINARY and lower == 0.0 and upper == 1.0:
        return [entry("BV")]
    if lower == upper:
        return [entry("FX", lower)]
    lines: List[str] = []
    if math.isinf(lower) and math.isinf(upper):
        return [entry("FR")]
    if math.isinf(lower):
        lines.append(entry("MI"))
    elif lower != 0.0:
        lines.append(entry("LO", lower))
    if not math.isinf(upper):
        lines.append(entry("UP", upper))
    elif integrality != Integrality.CONTINUOUS:
        # some readers default marked integers to an upper bound of 1
        lines.append(entry("PL"))
    return lines


def write_mps(problem: MilpProblem, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(export_mps(problem))
    logger.info(f"Wrote MPS for {problem.name} to {path}")
    return path
