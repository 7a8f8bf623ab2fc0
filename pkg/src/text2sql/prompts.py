"""Prompt rendering, response parsing, and fine-tune file emission.

Two prompt families are supported:

* the compact single-message format whose schema section lists each table as a
  one-line header followed by an INSERT block of sample rows ("v1"), and
* the conversation format whose schema lists one column per line with optional
  description and example values, driven by a system prompt and few-shot
  question/answer turns ("v2").
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .dataset import DatabaseCatalog, Question, TableInfo, quote_identifier
from .tokens import DEFAULT_TOKENIZER_ID, get_counter

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
_ROLES = (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT)


class PromptError(Exception):
    pass


class BudgetUnsatisfiableError(PromptError):
    """Even a zero-sample-row rendering exceeds the token budget."""


class ParseFailure(PromptError):
    """A model response could not be turned into SQL."""


class NoJsonFoundError(ParseFailure):
    pass


class MissingSqlFieldError(ParseFailure):
    pass


class MissingGoldSqlError(PromptError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"invalid role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class RenderBudget:
    max_tokens: int
    tokenizer_id: str = DEFAULT_TOKENIZER_ID

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class SqlAnswer:
    sql: str
    raw_response: str


SYSTEM_PROMPT_V2 = (
    "You are a principal data engineer. Help users write SQL queries for a "
    "SQLite database to answer their questions.\n"
    "\n"
    "For every user question, you'll be provided with context about their "
    "database in the following format:\n"
    "<table> (\n"
    "    <column> <data_type> -- <column_description> -- <example_value>, "
    "<example_value>, ...\n"
    "    ...\n"
    "    <column> <data_type> -- <column_description> -- <example_value>, "
    "<example_value>, ...\n"
    "    FOREIGN KEY (<column>) REFERENCES <table> (<column>)\n"
    ")\n"
    "\n"
    "Not all columns have descriptions or example values. Not all tables have "
    "foreign keys.\n"
    "\n"
    "You should only respond in this JSON format:\n"
    "{\n"
    '    "sql": "the sql that answers the user\'s question"\n'
    "}"
)

# Ablation variant: same prompt with the JSON-output paragraph swapped for a
# direct-SQL instruction.
_PLAIN_OUTPUT_INSTRUCTION = (
    "You should only respond with the SQL that answers the user's question. "
    "State the SQL directly, without any introduction, explanation, or "
    "surrounding formatting such as JSON or a code block."
)

_JSON_OUTPUT_PARAGRAPH = SYSTEM_PROMPT_V2[SYSTEM_PROMPT_V2.index("You should only respond") :]

CORRECTION_TEMPLATE = (
    'That SQL produced this error message: \\"{error_message}\\". Write a new '
    "query. If you received a 'no such column' error, consider whether you "
    "pulled the column from the correct table. Don't apologize. Respond only "
    "with SQL."
)


def system_prompt_v2(json_output: bool = True) -> str:
    if json_output:
        return SYSTEM_PROMPT_V2
    return SYSTEM_PROMPT_V2.replace(_JSON_OUTPUT_PARAGRAPH, _PLAIN_OUTPUT_INSTRUCTION)


# ---------------------------------------------------------------------------
# v1 rendering
# ---------------------------------------------------------------------------

def _render_fk_v1(fk) -> str:
    text = f"FOREIGN KEY {', '.join(fk.local_columns)} REFERENCES {quote_identifier(fk.referenced_table)}"
    if fk.referenced_columns:
        text += f" {', '.join(fk.referenced_columns)}"
    return text


def _render_table_v1(table: TableInfo, rows: int) -> str:
    parts = [f"{col.name} {col.sql_type}".rstrip() for col in table.columns]
    parts.extend(_render_fk_v1(fk) for fk in table.foreign_keys)
    lines = [f"{quote_identifier(table.name)} ({', '.join(parts)});"]
    sample = table.sample_rows[:rows]
    if sample:
        lines.append(f"INSERT INTO {quote_identifier(table.name)} VALUES")
        for i, row in enumerate(sample):
            terminator = ";" if i == len(sample) - 1 else ""
            lines.append(f"({', '.join(row)}){terminator}")
    return "\n".join(lines)


def render_schema_v1(catalog: DatabaseCatalog, budget: Optional[RenderBudget] = None) -> str:
    """Render every table as a header line plus an INSERT block of sample rows.

    When a budget is given and the text exceeds it, the per-table row count is
    reduced uniformly (5, 4, ... 0) until the rendering fits.
    """
    if budget is None:
        return "\n".join(_render_table_v1(t, len(t.sample_rows)) for t in catalog.tables)
    counter = get_counter(budget.tokenizer_id)
    for rows in range(5, -1, -1):
        text = "\n".join(_render_table_v1(t, rows) for t in catalog.tables)
        if counter(text) <= budget.max_tokens:
            return text
    raise BudgetUnsatisfiableError(
        f"schema for {catalog.db_id} exceeds {budget.max_tokens} tokens even "
        "with all sample rows removed"
    )


def render_user_prompt_v1(schema_text: str, question: Question) -> str:
    """Schema, blank line, the question header, and an optional evidence note."""
    prompt = f"{schema_text}\n\n## The user has asked:\n{question.text}"
    if question.evidence:
        prompt += f"\nNote: {question.evidence}"
    return prompt


# ---------------------------------------------------------------------------
# v2 rendering
# ---------------------------------------------------------------------------

def _render_table_v2(table: TableInfo) -> str:
    lines = [f"{quote_identifier(table.name)} ("]
    for col in table.columns:
        line = f"    {col.name} {col.sql_type}".rstrip()
        if col.description:
            line += f" -- {col.description}"
        if col.example_values:
            line += f" -- {', '.join(col.example_values)}"
        lines.append(line)
    for fk in table.foreign_keys:
        line = f"    FOREIGN KEY ({', '.join(fk.local_columns)}) REFERENCES {quote_identifier(fk.referenced_table)}"
        if fk.referenced_columns:
            line += f" ({', '.join(fk.referenced_columns)})"
        lines.append(line)
    lines.append(")")
    return "\n".join(lines)


def render_schema_v2(catalog: DatabaseCatalog) -> str:
    """One line per column with optional description and example values."""
    return "\n".join(_render_table_v2(t) for t in catalog.tables)


def render_answer_json(sql: str) -> str:
    return json.dumps({"sql": sql}, indent=4, ensure_ascii=False)


def assemble_v2_conversation(
    system_prompt: str,
    shots: Sequence[tuple[Question, str, str]],
    target: tuple[Question, str],
    *,
    json_answers: bool = True,
) -> list[ChatMessage]:
    """Build [system] + per-shot user/assistant turns + the target user message.

    Shots are (question, gold_sql, schema_text) in the order they should
    appear; every user message uses the same template as the target so the
    model sees format-identical turns.
    """
    messages = [ChatMessage(ROLE_SYSTEM, system_prompt)]
    for question, gold_sql, schema_text in shots:
        messages.append(
            ChatMessage(ROLE_USER, render_user_prompt_v1(schema_text, question))
        )
        answer = render_answer_json(gold_sql) if json_answers else gold_sql
        messages.append(ChatMessage(ROLE_ASSISTANT, answer))
    target_question, target_schema = target
    messages.append(
        ChatMessage(ROLE_USER, render_user_prompt_v1(target_schema, target_question))
    )
    return messages


def render_correction_prompt(error_message: str) -> str:
    return CORRECTION_TEMPLATE.replace("{error_message}", error_message)


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

def _json_candidates(raw: str) -> Iterable[str]:
    """Yield balanced {...} spans, outermost first, respecting string literals.

    Quote tracking only applies inside a span; stray quotes in surrounding
    prose must not hide a following object.
    """
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(raw):
        if depth == 0:
            if ch == "{":
                start = i
                depth = 1
                in_string = False
                escaped = False
            continue
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                yield raw[start : i + 1]
    return


def parse_json_answer(raw: str) -> SqlAnswer:
    """Extract the `sql` field from a model response.

    Tolerates code fences and surrounding prose by scanning for the outermost
    JSON object. Raises NoJsonFoundError when no object parses, and
    MissingSqlFieldError when an object parses but carries no usable `sql`.
    """
    found_object = False
    for candidate in _json_candidates(raw):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict):
            continue
        found_object = True
        sql = obj.get("sql")
        if isinstance(sql, str) and sql.strip():
            return SqlAnswer(sql=sql.strip(), raw_response=raw)
    if found_object:
        raise MissingSqlFieldError("JSON object has no non-empty 'sql' field")
    raise NoJsonFoundError("no JSON object found in response")


def parse_raw_answer(raw: str) -> SqlAnswer:
    """Treat the whole response as SQL (fine-tuned direct-output mode)."""
    sql = raw.strip()
    if sql.startswith("```"):
        # Defensive: strip a fenced block if a model adds one anyway.
        lines = sql.splitlines()
        if lines and lines[0].startswith("```"):
            lines = lines[1:]
        if lines and lines[-1].strip() == "```":
            lines = lines[:-1]
        sql = "\n".join(lines).strip()
    if not sql:
        raise ParseFailure("empty response")
    return SqlAnswer(sql=sql, raw_response=raw)


# ---------------------------------------------------------------------------
# Fine-tune training file
# ---------------------------------------------------------------------------

def emit_finetune_file(
    examples: Sequence[tuple[Question, str, str]],
    out: Path | str,
) -> int:
    """Write one JSONL training record per (question, schema_text, gold_sql).

    Each line is {"messages": [user prompt, assistant gold SQL]}; the
    assistant content is the bare SQL with no code fence or JSON wrapper.
    Returns the number of lines written.
    """
    out_path = Path(out)
    count = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for question, schema_text, gold_sql in examples:
            if not gold_sql:
                raise MissingGoldSqlError(
                    f"question {question.id} has no gold SQL; cannot emit training file"
                )
            record = {
                "messages": [
                    {
                        "role": ROLE_USER,
                        "content": render_user_prompt_v1(schema_text, question),
                    },
                    {"role": ROLE_ASSISTANT, "content": gold_sql},
                ]
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count
