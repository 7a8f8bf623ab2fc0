"""Read-only SQL execution against SQLite files with a wall-clock timeout.

Databases are opened with mode=ro plus PRAGMA query_only, so generated SQL can
never modify a benchmark file; any write attempt surfaces as an execution
error. Result values are normalized so integral-valued REALs compare equal to
INTEGERs while text stays exact and NULL stays distinct from the empty string.
"""

from __future__ import annotations

import sqlite3
import time
from pathlib import Path
from typing import Any

# Virtual-machine instructions between progress-handler deadline checks.
_PROGRESS_GRANULARITY = 2000

TIMEOUT_MESSAGE = "query timed out"


class SqlExecutionError(Exception):
    """The statement failed to compile or run; message is the engine's."""


class SqlTimeoutError(SqlExecutionError):
    def __init__(self) -> None:
        super().__init__(TIMEOUT_MESSAGE)


def normalize_value(value: Any) -> Any:
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def normalize_row(row: tuple) -> tuple:
    return tuple(normalize_value(v) for v in row)


def execute_readonly(
    db_path: Path | str,
    sql: str,
    timeout_ms: int = 30_000,
) -> list[tuple]:
    """Run one statement read-only and return all normalized rows in order."""
    if timeout_ms <= 0:
        raise ValueError("timeout_ms must be positive")
    path = Path(db_path)
    if not path.is_file():
        raise SqlExecutionError(f"database file not found: {path}")
    uri = path.resolve().as_uri() + "?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True)
    except sqlite3.Error as exc:
        raise SqlExecutionError(f"cannot open {path}: {exc}") from exc

    deadline = time.monotonic() + timeout_ms / 1000.0
    timed_out = False

    def check_deadline() -> int:
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1  # nonzero aborts the statement
        return 0

    try:
        conn.execute("PRAGMA query_only = ON")
        conn.set_progress_handler(check_deadline, _PROGRESS_GRANULARITY)
        try:
            cursor = conn.execute(sql)
            rows = cursor.fetchall()
        except sqlite3.Error as exc:
            if timed_out:
                raise SqlTimeoutError() from exc
            raise SqlExecutionError(str(exc)) from exc
        except sqlite3.Warning as exc:
            # e.g. multiple statements in one string
            raise SqlExecutionError(str(exc)) from exc
        return [normalize_row(row) for row in rows]
    finally:
        conn.close()
