"""SQLite registry of completed policy runs."""

from __future__ import annotations

import logging
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

DB_NAME = "registry.db"
DB_DIR = Path("out")
DB_PATH = DB_DIR / DB_NAME

_CREATE_TABLE = """
CREATE TABLE IF NOT EXISTS runs (
    id              INTEGER PRIMARY KEY AUTOINCREMENT,
    timestamp       TEXT    NOT NULL,
    config_hash     TEXT    NOT NULL,
    scenario_hash   TEXT    NOT NULL,
    seed            INTEGER NOT NULL,
    policy          TEXT    NOT NULL,
    policy_kind     TEXT    NOT NULL,
    trace_path      TEXT,
    summary_path    TEXT,
    flops_total     INTEGER,
    token_forwards  INTEGER,
    mse_vs_vanilla  REAL,
    seconds         REAL
);
"""

_COLUMNS = (
    "id",
    "timestamp",
    "config_hash",
    "scenario_hash",
    "seed",
    "policy",
    "policy_kind",
    "trace_path",
    "summary_path",
    "flops_total",
    "token_forwards",
    "mse_vs_vanilla",
    "seconds",
)


def _resolve(db_path: Path | None) -> Path:
    return Path(db_path) if db_path is not None else DB_PATH


def init_db(db_path: Path | None = None) -> None:
    """Create the registry directory and table if they do not exist."""
    path = _resolve(db_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with sqlite3.connect(path) as conn:
        conn.execute(_CREATE_TABLE)
        existing = {row[1] for row in conn.execute("PRAGMA table_info(runs)")}
        if "seconds" not in existing:
            conn.execute("ALTER TABLE runs ADD COLUMN seconds REAL")
        conn.commit()


def record_run(
    config_hash: str,
    scenario_hash: str,
    seed: int,
    policy: str,
    policy_kind: str,
    trace_path: str | None,
    summary_path: str | None,
    flops_total: int,
    token_forwards: int,
    mse_vs_vanilla: float | None,
    seconds: float | None = None,
    db_path: Path | None = None,
) -> bool:
    """Insert one run row. Returns True on success.

    ``mse_vs_vanilla`` is ``None`` for the vanilla run itself.  ``seconds``
    is the wall-clock time of the denoising loop.
    """
    try:
        init_db(db_path)
        timestamp = datetime.now(timezone.utc).isoformat()
        with sqlite3.connect(_resolve(db_path)) as conn:
            conn.execute(
                """
                INSERT INTO runs (
                    timestamp, config_hash, scenario_hash, seed, policy,
                    policy_kind, trace_path, summary_path, flops_total,
                    token_forwards, mse_vs_vanilla, seconds
                ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    timestamp,
                    config_hash,
                    scenario_hash,
                    seed,
                    policy,
                    policy_kind,
                    trace_path,
                    summary_path,
                    flops_total,
                    token_forwards,
                    mse_vs_vanilla,
                    seconds,
                ),
            )
            conn.commit()
        return True
    except sqlite3.Error as exc:
        logger.warning("[record_run] registry write failed: %s", exc)
        return False


def lookup_run(
    config_hash: str,
    policy: str,
    seed: int,
    db_path: Path | None = None,
) -> dict | None:
    """Return the most recent row for (config_hash, policy, seed), or None."""
    try:
        init_db(db_path)
        with sqlite3.connect(_resolve(db_path)) as conn:
            conn.row_factory = sqlite3.Row
            row = conn.execute(
                """
                SELECT *
                FROM runs
                WHERE config_hash = ? AND policy = ? AND seed = ?
                ORDER BY id DESC LIMIT 1
                """,
                (config_hash, policy, seed),
            ).fetchone()
    except sqlite3.Error as exc:
        logger.warning("[lookup_run] registry read failed: %s", exc)
        return None

    if row is None:
        return None
    return {name: row[name] for name in _COLUMNS}


def list_runs(limit: int = 20, db_path: Path | None = None) -> list[dict]:
    """Most recent runs first; an unreadable registry yields an empty list."""
    try:
        init_db(db_path)
        with sqlite3.connect(_resolve(db_path)) as conn:
            conn.row_factory = sqlite3.Row
            rows = conn.execute(
                "SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,)
            ).fetchall()
    except sqlite3.Error as exc:
        logger.warning("[list_runs] registry read failed: %s", exc)
        return []
    return [{name: row[name] for name in _COLUMNS} for row in rows]
