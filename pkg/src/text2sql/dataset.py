"""BIRD-format benchmark ingestion: question splits and SQLite schema catalogs.

Expected directory layout:

    <root>/<split>.json
    <root>/<split>_databases/<db_id>/<db_id>.sqlite
    <root>/<split>_databases/<db_id>/database_description/<table>.csv

Description CSVs carry columns original_column_name, column_name,
column_description, data_format, value_description. They are decoded
permissively; a broken description file is dropped with a warning, never fatal.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import re
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

logger = logging.getLogger(__name__)

SAMPLE_ROW_LIMIT = 5
EXAMPLE_VALUE_LIMIT = 5
# Bound on rows scanned while collecting distinct per-column example values.
EXAMPLE_SCAN_LIMIT = 200


class DatasetError(Exception):
    """Base class for ingestion failures."""


class MissingFileError(DatasetError):
    pass


class MalformedRecordError(DatasetError):
    """A split record is unusable; message names the record index and field."""


class CannotOpenDatabaseError(DatasetError):
    pass


@dataclass(frozen=True)
class Question:
    """One benchmark item: a natural-language question over one database."""

    id: int
    db_id: str
    text: str
    evidence: Optional[str] = None
    gold_sql: Optional[str] = None
    difficulty: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"question {self.id}: text must be non-empty")


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    sql_type: str
    description: Optional[str] = None
    example_values: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("column name must be non-empty")
        if len(self.example_values) > EXAMPLE_VALUE_LIMIT:
            raise ValueError(
                f"column {self.name}: at most {EXAMPLE_VALUE_LIMIT} example values"
            )


@dataclass(frozen=True)
class ForeignKey:
    local_columns: tuple[str, ...]
    referenced_table: str
    referenced_columns: tuple[str, ...]


@dataclass(frozen=True)
class TableInfo:
    name: str
    columns: tuple[ColumnInfo, ...]
    foreign_keys: tuple[ForeignKey, ...] = ()
    sample_rows: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self) -> None:
        names = {c.name for c in self.columns}
        for fk in self.foreign_keys:
            for col in fk.local_columns:
                if col not in names:
                    raise ValueError(
                        f"table {self.name}: foreign-key column {col!r} not in columns"
                    )
        for row in self.sample_rows:
            if len(row) != len(self.columns):
                raise ValueError(
                    f"table {self.name}: sample row width {len(row)} != "
                    f"{len(self.columns)} columns"
                )

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)


@dataclass(frozen=True)
class DatabaseCatalog:
    db_id: str
    tables: tuple[TableInfo, ...]
    file_path: str

    def __post_init__(self) -> None:
        names = [t.name for t in self.tables]
        if len(names) != len(set(names)):
            raise ValueError(f"catalog {self.db_id}: duplicate table names")

    def table(self, name: str) -> TableInfo:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(f"{self.db_id}: no table {name!r}")


# ---------------------------------------------------------------------------
# Split loading
# ---------------------------------------------------------------------------

def load_split(root_dir: Path | str, split_name: str) -> list[Question]:
    """Load `<root>/<split_name>.json` into Questions, preserving file order.

    Missing `evidence` (or an empty string) becomes None; missing `SQL` is
    allowed so blind test splits load cleanly; a record without `question_id`
    (train-style files) gets its list index as the id.
    """
    path = Path(root_dir) / f"{split_name}.json"
    if not path.is_file():
        raise MissingFileError(f"split file not found: {path}")
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise MalformedRecordError(f"{path}: top-level JSON must be a list")

    questions: list[Question] = []
    seen_ids: set[int] = set()
    for i, record in enumerate(raw):
        if not isinstance(record, dict):
            raise MalformedRecordError(f"record {i}: not an object")
        for required in ("db_id", "question"):
            if required not in record:
                raise MalformedRecordError(f"record {i}: missing field {required!r}")
        # Train-style files ship without question_id; the list index stands in.
        qid = record.get("question_id", i)
        if not isinstance(qid, int):
            raise MalformedRecordError(f"record {i}: question_id must be an integer")
        if qid in seen_ids:
            raise MalformedRecordError(f"record {i}: duplicate question_id {qid}")
        seen_ids.add(qid)
        text = record["question"]
        if not isinstance(text, str) or not text:
            raise MalformedRecordError(
                f"record {i}: field 'question' must be a non-empty string"
            )
        evidence = record.get("evidence") or None
        gold_sql = record.get("SQL") or None
        questions.append(
            Question(
                id=qid,
                db_id=str(record["db_id"]),
                text=text,
                evidence=evidence,
                gold_sql=gold_sql,
                difficulty=record.get("difficulty") or None,
            )
        )
    return questions


def save_split(questions: Sequence[Question], path: Path | str) -> None:
    """Write Questions back to the split JSON layout (round-trips load_split)."""
    records = []
    for q in questions:
        record: dict[str, Any] = {
            "question_id": q.id,
            "db_id": q.db_id,
            "question": q.text,
        }
        if q.evidence is not None:
            record["evidence"] = q.evidence
        if q.gold_sql is not None:
            record["SQL"] = q.gold_sql
        if q.difficulty is not None:
            record["difficulty"] = q.difficulty
        records.append(record)
    Path(path).write_text(
        json.dumps(records, indent=2, ensure_ascii=False), encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Value rendering (shared by sample rows and example values)
# ---------------------------------------------------------------------------

def render_sql_literal(value: Any) -> str:
    """Render a Python value from SQLite as a SQL literal string."""
    if value is None:
        return "NULL"
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    if isinstance(value, bytes):
        return "X'" + value.hex() + "'"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PLAIN_IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


def quote_identifier(name: str) -> str:
    """Quote an identifier only when it is not a plain SQL name."""
    if _PLAIN_IDENTIFIER.match(name):
        return name
    return '"' + name.replace('"', '""') + '"'


# ---------------------------------------------------------------------------
# SQLite introspection
# ---------------------------------------------------------------------------

def introspect(
    db_path: Path | str,
    description_dir: Optional[Path | str] = None,
    *,
    example_scan_limit: int = EXAMPLE_SCAN_LIMIT,
) -> DatabaseCatalog:
    """Introspect a SQLite file into a DatabaseCatalog.

    Tables come back in stored (creation) order; sample_rows are the first
    SAMPLE_ROW_LIMIT rows in natural storage order; example_values are the
    first-seen distinct non-NULL values per column, capped at
    EXAMPLE_VALUE_LIMIT, from a bounded prefix scan of the table.
    """
    path = Path(db_path)
    if not path.is_file():
        raise CannotOpenDatabaseError(f"database file not found: {path}")
    try:
        uri = path.resolve().as_uri() + "?mode=ro"
        conn = sqlite3.connect(uri, uri=True)
    except sqlite3.Error as exc:
        raise CannotOpenDatabaseError(f"cannot open {path}: {exc}") from exc

    descriptions = _load_descriptions(description_dir)
    try:
        cur = conn.execute(
            "SELECT name FROM sqlite_master "
            "WHERE type = 'table' AND name NOT LIKE 'sqlite_%'"
        )
        table_names = [row[0] for row in cur.fetchall()]
        pk_cache: dict[str, tuple[str, ...]] = {}
        tables = tuple(
            _introspect_table(
                conn,
                name,
                descriptions.get(name.lower(), {}),
                pk_cache,
                example_scan_limit,
            )
            for name in table_names
        )
    except sqlite3.Error as exc:
        raise CannotOpenDatabaseError(f"cannot read schema of {path}: {exc}") from exc
    finally:
        conn.close()

    return DatabaseCatalog(db_id=path.stem, tables=tables, file_path=str(path))


def _table_primary_key(
    conn: sqlite3.Connection, table: str, cache: dict[str, tuple[str, ...]]
) -> tuple[str, ...]:
    if table not in cache:
        try:
            rows = conn.execute(
                f"PRAGMA table_info({quote_identifier(table)})"
            ).fetchall()
        except sqlite3.Error:
            rows = []
        pk_cols = [(row[5], row[1]) for row in rows if row[5] > 0]
        cache[table] = tuple(name for _, name in sorted(pk_cols))
    return cache[table]


def _introspect_table(
    conn: sqlite3.Connection,
    name: str,
    column_descriptions: Mapping[str, str],
    pk_cache: dict[str, tuple[str, ...]],
    example_scan_limit: int,
) -> TableInfo:
    quoted = quote_identifier(name)
    col_rows = conn.execute(f"PRAGMA table_info({quoted})").fetchall()
    col_names = [row[1] for row in col_rows]
    col_types = [row[2] for row in col_rows]

    # Foreign keys: PRAGMA rows share an id per constraint; seq orders the pair
    # list, so composite keys are grouped before emission.
    fk_groups: dict[int, list[tuple[int, str, str, Optional[str]]]] = {}
    for row in conn.execute(f"PRAGMA foreign_key_list({quoted})").fetchall():
        fk_id, seq, ref_table, local_col, ref_col = row[0], row[1], row[2], row[3], row[4]
        fk_groups.setdefault(fk_id, []).append((seq, ref_table, local_col, ref_col))
    foreign_keys = []
    # PRAGMA ids run from the last-declared constraint to the first; walk them
    # in reverse to recover declaration order.
    for fk_id in sorted(fk_groups, reverse=True):
        pairs = sorted(fk_groups[fk_id])
        ref_table = pairs[0][1]
        local_cols = tuple(p[2] for p in pairs)
        ref_cols = tuple(p[3] for p in pairs if p[3] is not None)
        if len(ref_cols) != len(local_cols):
            # Implicit reference to the target's primary key.
            ref_cols = _table_primary_key(conn, ref_table, pk_cache)
        foreign_keys.append(
            ForeignKey(
                local_columns=local_cols,
                referenced_table=ref_table,
                referenced_columns=ref_cols,
            )
        )

    sample_rows: list[tuple[str, ...]] = []
    example_values: list[list[str]] = [[] for _ in col_names]
    seen_values: list[set[str]] = [set() for _ in col_names]
    if col_names:
        cur = conn.execute(f"SELECT * FROM {quoted}")
        scanned = 0
        while scanned < example_scan_limit:
            row = cur.fetchone()
            if row is None:
                break
            rendered = tuple(render_sql_literal(v) for v in row)
            if scanned < SAMPLE_ROW_LIMIT:
                sample_rows.append(rendered)
            for i, (raw, literal) in enumerate(zip(row, rendered)):
                if raw is None or len(example_values[i]) >= EXAMPLE_VALUE_LIMIT:
                    continue
                if literal not in seen_values[i]:
                    seen_values[i].add(literal)
                    example_values[i].append(literal)
            scanned += 1
            if scanned >= SAMPLE_ROW_LIMIT and all(
                len(vals) >= EXAMPLE_VALUE_LIMIT for vals in example_values
            ):
                break
        cur.close()

    columns = tuple(
        ColumnInfo(
            name=col,
            sql_type=col_types[i] or "",
            description=column_descriptions.get(col.lower()),
            example_values=tuple(example_values[i]),
        )
        for i, col in enumerate(col_names)
    )
    return TableInfo(
        name=name,
        columns=columns,
        foreign_keys=tuple(foreign_keys),
        sample_rows=tuple(sample_rows),
    )


def _load_descriptions(
    description_dir: Optional[Path | str],
) -> dict[str, dict[str, str]]:
    """Map lowercase table name -> lowercase column name -> description text."""
    if description_dir is None:
        return {}
    dir_path = Path(description_dir)
    if not dir_path.is_dir():
        return {}
    result: dict[str, dict[str, str]] = {}
    for csv_path in sorted(dir_path.glob("*.csv")):
        table = csv_path.stem.lower()
        try:
            # BIRD description files have mixed encodings; replace bad bytes
            # rather than aborting the run.
            text = csv_path.read_bytes().decode("utf-8-sig", errors="replace")
            reader = csv.DictReader(io.StringIO(text))
            per_column: dict[str, str] = {}
            for row in reader:
                original = (row.get("original_column_name") or "").strip()
                if not original:
                    continue
                description = (row.get("column_description") or "").strip()
                if not description:
                    description = (row.get("value_description") or "").strip()
                if description:
                    per_column[original.lower()] = description
            if per_column:
                result[table] = per_column
        except (csv.Error, OSError, UnicodeError) as exc:
            logger.warning("dropping unreadable description file %s: %s", csv_path, exc)
    return result


# ---------------------------------------------------------------------------
# Constraint stripping
# ---------------------------------------------------------------------------

_CONSTRAINT_RE = re.compile(
    r"""\s+(?:
        PRIMARY\s+KEY(?:\s+(?:ASC|DESC))?(?:\s+AUTOINCREMENT)?
      | NOT\s+NULL
      | UNIQUE
      | DEFAULT\s+(?:\([^)]*\)|'(?:[^']|'')*'|\S+)
      | CHECK\s*\([^)]*\)
      | COLLATE\s+\S+
      | REFERENCES\s+\S+(?:\s*\([^)]*\))?
    )""",
    re.IGNORECASE | re.VERBOSE,
)


def strip_constraints(table: TableInfo) -> TableInfo:
    """Drop constraint clauses from declared column types.

    Keeps column names, order, declared base types, and foreign keys; removes
    primary-key markers, NOT NULL, UNIQUE, DEFAULT, and CHECK from the type
    text used for rendering.
    """
    columns = tuple(
        dataclasses.replace(
            col, sql_type=_CONSTRAINT_RE.sub("", " " + col.sql_type).strip()
        )
        if col.sql_type
        else col
        for col in table.columns
    )
    return dataclasses.replace(table, columns=columns)


def strip_catalog(catalog: DatabaseCatalog) -> DatabaseCatalog:
    return dataclasses.replace(
        catalog, tables=tuple(strip_constraints(t) for t in catalog.tables)
    )


# ---------------------------------------------------------------------------
# Catalog (de)serialization and cached corpus loading
# ---------------------------------------------------------------------------

def catalog_to_dict(catalog: DatabaseCatalog) -> dict[str, Any]:
    return {
        "db_id": catalog.db_id,
        "file_path": catalog.file_path,
        "tables": [
            {
                "name": t.name,
                "columns": [
                    {
                        "name": c.name,
                        "sql_type": c.sql_type,
                        "description": c.description,
                        "example_values": list(c.example_values),
                    }
                    for c in t.columns
                ],
                "foreign_keys": [
                    {
                        "local_columns": list(fk.local_columns),
                        "referenced_table": fk.referenced_table,
                        "referenced_columns": list(fk.referenced_columns),
                    }
                    for fk in t.foreign_keys
                ],
                "sample_rows": [list(row) for row in t.sample_rows],
            }
            for t in catalog.tables
        ],
    }


def catalog_from_dict(data: Mapping[str, Any]) -> DatabaseCatalog:
    tables = tuple(
        TableInfo(
            name=t["name"],
            columns=tuple(
                ColumnInfo(
                    name=c["name"],
                    sql_type=c["sql_type"],
                    description=c.get("description"),
                    example_values=tuple(c.get("example_values", ())),
                )
                for c in t["columns"]
            ),
            foreign_keys=tuple(
                ForeignKey(
                    local_columns=tuple(fk["local_columns"]),
                    referenced_table=fk["referenced_table"],
                    referenced_columns=tuple(fk["referenced_columns"]),
                )
                for fk in t.get("foreign_keys", ())
            ),
            sample_rows=tuple(tuple(row) for row in t.get("sample_rows", ())),
        )
        for t in data["tables"]
    )
    return DatabaseCatalog(
        db_id=data["db_id"], tables=tables, file_path=data["file_path"]
    )


def discover_database_dirs(root_dir: Path | str) -> dict[str, Path]:
    """Map db_id -> database directory across every `<split>_databases` dir."""
    root = Path(root_dir)
    found: dict[str, Path] = {}
    for databases_dir in sorted(root.glob("*_databases")):
        if not databases_dir.is_dir():
            continue
        for db_dir in sorted(databases_dir.iterdir()):
            sqlite_path = db_dir / f"{db_dir.name}.sqlite"
            if sqlite_path.is_file():
                found[db_dir.name] = db_dir
    return found


def _source_fingerprint(sqlite_path: Path) -> str:
    stat = sqlite_path.stat()
    return hashlib.sha256(
        f"{sqlite_path.resolve()}:{stat.st_size}:{stat.st_mtime_ns}".encode()
    ).hexdigest()


def load_catalogs(
    root_dir: Path | str,
    cache_dir: Optional[Path | str] = None,
) -> tuple[dict[str, DatabaseCatalog], dict[str, bool]]:
    """Introspect every database under root_dir, reusing a JSON cache.

    Returns (catalogs by db_id, cache-hit flag by db_id). A cache entry is
    reused only when the source file path, size, and mtime all match.
    """
    catalogs: dict[str, DatabaseCatalog] = {}
    cache_hits: dict[str, bool] = {}
    cache_path = Path(cache_dir) if cache_dir is not None else None
    if cache_path is not None:
        cache_path.mkdir(parents=True, exist_ok=True)

    for db_id, db_dir in discover_database_dirs(root_dir).items():
        sqlite_path = db_dir / f"{db_id}.sqlite"
        fingerprint = _source_fingerprint(sqlite_path)
        entry_path = cache_path / f"{db_id}.json" if cache_path is not None else None
        if entry_path is not None and entry_path.is_file():
            try:
                cached = json.loads(entry_path.read_text(encoding="utf-8"))
                if cached.get("fingerprint") == fingerprint:
                    catalogs[db_id] = catalog_from_dict(cached["catalog"])
                    cache_hits[db_id] = True
                    continue
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                logger.warning("ignoring corrupt catalog cache %s: %s", entry_path, exc)
        description_dir = db_dir / "database_description"
        catalog = introspect(
            sqlite_path,
            description_dir if description_dir.is_dir() else None,
        )
        catalogs[db_id] = catalog
        cache_hits[db_id] = False
        if entry_path is not None:
            entry_path.write_text(
                json.dumps(
                    {"fingerprint": fingerprint, "catalog": catalog_to_dict(catalog)},
                    ensure_ascii=False,
                ),
                encoding="utf-8",
            )
    return catalogs, cache_hits
