"""
Experiment-run registry (SQLite).
"""

from __future__ import annotations

import json
import os
import sqlite3
from typing import Any, Dict, List, Optional

_DB_PATH = os.getenv("OFFLOAD_RUNS_DB", "runs.db")


def set_db_path(path: str) -> None:
    global _DB_PATH
    _DB_PATH = path


def get_conn() -> sqlite3.Connection:
    conn = sqlite3.connect(_DB_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def init_db() -> None:
    conn = get_conn()
    try:
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
              id INTEGER PRIMARY KEY AUTOINCREMENT,
              name TEXT NOT NULL,
              status TEXT,
              started_at TEXT,
              finished_at TEXT,
              output_dir TEXT,
              metadata TEXT
            )
            """
        )
        conn.execute("CREATE INDEX IF NOT EXISTS idx_runs_status ON runs(status)")
        conn.commit()
    finally:
        conn.close()


def _row(row: sqlite3.Row) -> Dict[str, Any]:
    out = dict(row)
    try:
        out["metadata"] = json.loads(out["metadata"]) if out.get("metadata") else {}
    except Exception:
        out["metadata"] = {}
    return out


def create_run(name: str, output_dir: str, metadata: Optional[Dict[str, Any]] = None) -> int:
    conn = get_conn()
    try:
        cur = conn.execute(
            "INSERT INTO runs (name, status, started_at, output_dir, metadata) VALUES (?, ?, datetime('now'), ?, ?)",
            (name, "queued", output_dir, json.dumps(metadata or {})),
        )
        conn.commit()
        return int(cur.lastrowid)
    finally:
        conn.close()


def update_run(run_id: int, status: str, metadata: Optional[Dict[str, Any]] = None, finished: bool = False) -> None:
    """Set the status; ``metadata`` keys are merged into the stored object."""
    conn = get_conn()
    try:
        row = conn.execute("SELECT metadata FROM runs WHERE id=?", (run_id,)).fetchone()
        if not row:
            return
        try:
            meta = json.loads(row["metadata"]) if row["metadata"] else {}
        except Exception:
            meta = {}
        meta.update(metadata or {})
        if finished:
            conn.execute(
                "UPDATE runs SET status=?, metadata=?, finished_at=datetime('now') WHERE id=?",
                (status, json.dumps(meta), run_id),
            )
        else:
            conn.execute("UPDATE runs SET status=?, metadata=? WHERE id=?", (status, json.dumps(meta), run_id))
        conn.commit()
    finally:
        conn.close()


def get_run(run_id: int) -> Optional[Dict[str, Any]]:
    conn = get_conn()
    try:
        row = conn.execute("SELECT * FROM runs WHERE id=?", (run_id,)).fetchone()
        return _row(row) if row else None
    finally:
        conn.close()


def list_runs(limit: int = 50) -> List[Dict[str, Any]]:
    conn = get_conn()
    try:
        rows = conn.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,)).fetchall()
        return [_row(r) for r in rows]
    finally:
        conn.close()


def set_output_dir(run_id: int, output_dir: str) -> None:
    conn = get_conn()
    try:
        conn.execute("UPDATE runs SET output_dir=? WHERE id=?", (output_dir, run_id))
        conn.commit()
    finally:
        conn.close()
