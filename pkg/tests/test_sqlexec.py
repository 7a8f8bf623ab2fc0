from __future__ import annotations

import hashlib
import sqlite3
from pathlib import Path

import pytest

from text2sql.sqlexec import (
    SqlExecutionError,
    SqlTimeoutError,
    TIMEOUT_MESSAGE,
    execute_readonly,
    normalize_row,
)


def _db_path(catalogs, db_id: str) -> Path:
    return Path(catalogs[db_id].file_path)


def _checksum(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_select_one(catalogs):
    assert execute_readonly(_db_path(catalogs, "cbsa"), "SELECT 1") == [(1,)]


def test_no_such_column_message(catalogs):
    with pytest.raises(SqlExecutionError, match="no such column"):
        execute_readonly(_db_path(catalogs, "cbsa"), "SELECT noexist FROM CBSA")


def test_rows_match_direct_connection_oracle(catalogs):
    path = _db_path(catalogs, "t_library")
    got = execute_readonly(path, "SELECT * FROM books")
    conn = sqlite3.connect(path)
    try:
        expected = [normalize_row(row) for row in conn.execute("SELECT * FROM books")]
    finally:
        conn.close()
    assert got == expected
    assert len(got) == 3


def test_numeric_normalization(catalogs):
    rows = execute_readonly(
        _db_path(catalogs, "shop"), "SELECT price FROM products WHERE name = 'Widget'"
    )
    assert rows == [(2,)]
    assert isinstance(rows[0][0], int)
    rows = execute_readonly(
        _db_path(catalogs, "shop"), "SELECT price FROM products WHERE name = 'Gadget'"
    )
    assert rows == [(3.5,)]


def test_null_distinct_from_empty_string(catalogs):
    path = _db_path(catalogs, "cbsa")
    assert execute_readonly(path, "SELECT NULL") == [(None,)]
    assert execute_readonly(path, "SELECT ''") == [("",)]
    assert execute_readonly(path, "SELECT NULL") != execute_readonly(path, "SELECT ''")


def test_empty_result_is_not_an_error(catalogs):
    assert execute_readonly(_db_path(catalogs, "shop"), "SELECT * FROM empty_log") == []


@pytest.mark.parametrize(
    "sql",
    [
        "INSERT INTO empty_log VALUES (1, 'x')",
        "UPDATE products SET price = 0",
        "DELETE FROM orders",
        "DROP TABLE products",
        "CREATE TABLE intruder (a INT)",
    ],
)
def test_writes_rejected_and_file_untouched(catalogs, sql):
    path = _db_path(catalogs, "shop")
    before = _checksum(path)
    with pytest.raises(SqlExecutionError):
        execute_readonly(path, sql)
    assert _checksum(path) == before


def test_multiple_statements_rejected(catalogs):
    with pytest.raises(SqlExecutionError):
        execute_readonly(
            _db_path(catalogs, "shop"), "SELECT 1; DELETE FROM orders"
        )


def test_timeout(catalogs):
    slow = (
        "WITH RECURSIVE cnt(x) AS "
        "(SELECT 1 UNION ALL SELECT x + 1 FROM cnt LIMIT 100000000) "
        "SELECT count(*) FROM cnt"
    )
    with pytest.raises(SqlTimeoutError, match=TIMEOUT_MESSAGE):
        execute_readonly(_db_path(catalogs, "cbsa"), slow, timeout_ms=50)


def test_missing_database(tmp_path):
    with pytest.raises(SqlExecutionError, match="not found"):
        execute_readonly(tmp_path / "nope.sqlite", "SELECT 1")


def test_invalid_timeout(catalogs):
    with pytest.raises(ValueError):
        execute_readonly(_db_path(catalogs, "cbsa"), "SELECT 1", timeout_ms=0)
