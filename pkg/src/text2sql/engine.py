"""Per-question pipeline orchestration and split-level runs.

A question flows through: prompt assembly (single-message v1 or few-shot
conversation v2) -> chat completion -> answer parsing -> read-only execution
-> optional error-correction turns appended to the same conversation.
Split runs parallelize over questions, checkpoint each finished question, and
emit results ordered by question id.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from . import __version__
from .dataset import DatabaseCatalog, Question, strip_catalog
from .llm import (
    ChatRequest,
    LlmClient,
    LlmError,
    MockBackend,
    RESPONSE_FORMAT_JSON,
    RESPONSE_FORMAT_TEXT,
)
from .prompts import (
    ChatMessage,
    ParseFailure,
    PromptError,
    ROLE_ASSISTANT,
    ROLE_USER,
    RenderBudget,
    assemble_v2_conversation,
    parse_json_answer,
    parse_raw_answer,
    render_answer_json,
    render_correction_prompt,
    render_schema_v1,
    render_schema_v2,
    render_user_prompt_v1,
    system_prompt_v2,
)
from .retrieval import Embedder, EmbeddingIndex, RetrievalError, select_diverse
from .sqlexec import SqlExecutionError, execute_readonly
from .tokens import DEFAULT_TOKENIZER_ID, count_tokens

logger = logging.getLogger(__name__)

METHOD_V1 = "v1"
METHOD_V2 = "v2"

V1_DEFAULT_MAX_TOKENS = 1000
V1_DEFAULT_CONTEXT_TOKENS = 4096
V2_DEFAULT_CONTEXT_TOKENS = 128_000


class EngineError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one run; method-dependent defaults are filled in
    at construction so the echoed config is complete."""

    method: str = METHOD_V2
    model_id: str = "gpt-4-0125-preview"
    temperature: float = 0.0
    seed: Optional[int] = None
    shots_k: int = 4
    diverse: bool = True
    json_output: Optional[bool] = None
    error_correction: bool = True
    max_corrections: int = 1
    max_tokens: Optional[int] = None
    sql_timeout_ms: int = 30_000
    context_tokens: Optional[int] = None
    tokenizer_id: str = DEFAULT_TOKENIZER_ID

    def __post_init__(self) -> None:
        if self.method not in (METHOD_V1, METHOD_V2):
            raise ValueError(f"unknown method {self.method!r}")
        if self.shots_k < 0:
            raise ValueError("shots_k must be >= 0")
        if self.max_corrections < 0:
            raise ValueError("max_corrections must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.sql_timeout_ms <= 0:
            raise ValueError("sql_timeout_ms must be positive")
        if self.json_output is None:
            self.json_output = self.method == METHOD_V2
        if self.max_tokens is None and self.method == METHOD_V1:
            self.max_tokens = V1_DEFAULT_MAX_TOKENS
        if self.context_tokens is None:
            self.context_tokens = (
                V1_DEFAULT_CONTEXT_TOKENS
                if self.method == METHOD_V1
                else V2_DEFAULT_CONTEXT_TOKENS
            )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Attempt:
    sql: str
    execution_error: Optional[str] = None


@dataclass
class QuestionResult:
    question_id: int
    predicted_sql: str
    attempts: list[Attempt]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    parse_failures: int = 0
    failure: Optional[str] = None

    @property
    def correction_triggered(self) -> bool:
        return len(self.attempts) > 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "predicted_sql": self.predicted_sql,
            "attempts": [
                {"sql": a.sql, "execution_error": a.execution_error}
                for a in self.attempts
            ],
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency_ms": self.latency_ms,
            "parse_failures": self.parse_failures,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QuestionResult":
        return cls(
            question_id=data["question_id"],
            predicted_sql=data["predicted_sql"],
            attempts=[
                Attempt(sql=a["sql"], execution_error=a.get("execution_error"))
                for a in data.get("attempts", [])
            ],
            prompt_tokens=data.get("prompt_tokens", 0),
            completion_tokens=data.get("completion_tokens", 0),
            latency_ms=data.get("latency_ms", 0),
            parse_failures=data.get("parse_failures", 0),
            failure=data.get("failure"),
        )


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------

class _SchemaCache:
    """Pure renderings memoized per database; safe under concurrent use."""

    def __init__(self) -> None:
        self._v2: dict[str, str] = {}
        self._stripped: dict[str, DatabaseCatalog] = {}

    def v2_schema(self, catalog: DatabaseCatalog) -> str:
        if catalog.db_id not in self._v2:
            self._v2[catalog.db_id] = render_schema_v2(catalog)
        return self._v2[catalog.db_id]

    def stripped(self, catalog: DatabaseCatalog) -> DatabaseCatalog:
        if catalog.db_id not in self._stripped:
            self._stripped[catalog.db_id] = strip_catalog(catalog)
        return self._stripped[catalog.db_id]


def _build_v1_messages(
    q: Question, catalog: DatabaseCatalog, cfg: RunConfig, cache: _SchemaCache
) -> list[ChatMessage]:
    schema_text = v1_schema_for_question(q, catalog, cfg, cache)
    return [ChatMessage(ROLE_USER, render_user_prompt_v1(schema_text, q))]


def _build_v2_messages(
    q: Question,
    catalog: DatabaseCatalog,
    index: Optional[EmbeddingIndex],
    cfg: RunConfig,
    cache: _SchemaCache,
    catalogs: Mapping[str, DatabaseCatalog],
    embedder: Optional[Embedder],
) -> list[ChatMessage]:
    shots: list[tuple[Question, str, str]] = []
    if cfg.shots_k > 0:
        if index is None:
            raise EngineError("an embedding index is required when shots_k > 0")
        if embedder is None:
            raise EngineError("an embedder is required when shots_k > 0")
        query_embedding = embedder.embed([q.text])[0]
        for shot in select_diverse(
            index,
            query_embedding,
            cfg.shots_k,
            exclude_db=q.db_id,
            diverse=cfg.diverse,
        ):
            shot_catalog = catalogs.get(shot.db_id)
            if shot_catalog is None:
                logger.warning(
                    "dropping few-shot example %s: no catalog for database %r",
                    shot.question_id,
                    shot.db_id,
                )
                continue
            shots.append(
                (shot.as_question(), shot.gold_sql, cache.v2_schema(shot_catalog))
            )
    return assemble_v2_conversation(
        system_prompt_v2(bool(cfg.json_output)),
        shots,
        (q, cache.v2_schema(catalog)),
        json_answers=bool(cfg.json_output),
    )


def v1_schema_for_question(
    q: Question,
    catalog: DatabaseCatalog,
    cfg: RunConfig,
    cache: Optional[_SchemaCache] = None,
) -> str:
    """The budgeted, constraint-stripped schema text for one question."""
    cache = cache or _SchemaCache()
    overhead = count_tokens(render_user_prompt_v1("", q), cfg.tokenizer_id)
    budget_tokens = cfg.context_tokens - (cfg.max_tokens or 0) - overhead
    if budget_tokens <= 0:
        raise PromptError(
            f"question {q.id}: no token budget left for the schema "
            f"(context={cfg.context_tokens}, reserved={cfg.max_tokens})"
        )
    return render_schema_v1(
        cache.stripped(catalog),
        RenderBudget(max_tokens=budget_tokens, tokenizer_id=cfg.tokenizer_id),
    )


_QUESTION_MARKER = "\n\n## The user has asked:\n"
_NOTE_MARKER = "\nNote: "


def make_gold_echo_backend(questions: Sequence[Question]):
    """A scripted backend answering every prompt with that question's gold SQL.

    The target question is recovered from the final user message; JSON-mode
    requests get the JSON-wrapped answer, text-mode requests the bare SQL.
    Used for offline harness runs and for capturing replay transcripts.
    """
    gold_by_text = {q.text: (q.gold_sql or "") for q in questions}

    def script(request: ChatRequest) -> str:
        content = request.messages[-1].content
        marker_at = content.rfind(_QUESTION_MARKER)
        if marker_at < 0:
            raise ValueError("gold-echo backend: prompt has no question section")
        tail = content[marker_at + len(_QUESTION_MARKER) :]
        text = tail.split(_NOTE_MARKER, 1)[0]
        if text not in gold_by_text:
            raise ValueError(f"gold-echo backend: unknown question {text[:80]!r}")
        sql = gold_by_text[text]
        if request.response_format == RESPONSE_FORMAT_JSON:
            return render_answer_json(sql)
        return sql

    return MockBackend(script)


# ---------------------------------------------------------------------------
# Per-question pipeline
# ---------------------------------------------------------------------------

def run_question(
    q: Question,
    catalog: DatabaseCatalog,
    index: Optional[EmbeddingIndex],
    cfg: RunConfig,
    client: LlmClient,
    *,
    embedder: Optional[Embedder] = None,
    catalogs: Optional[Mapping[str, DatabaseCatalog]] = None,
    schema_cache: Optional[_SchemaCache] = None,
) -> QuestionResult:
    """Run one question end to end and always return a result; pipeline-level
    failures are captured in the result rather than raised."""
    cache = schema_cache or _SchemaCache()
    shot_catalogs = catalogs if catalogs is not None else {catalog.db_id: catalog}
    started = time.monotonic()

    attempts: list[Attempt] = []
    prompt_tokens = 0
    completion_tokens = 0
    parse_failures = 0
    failure: Optional[str] = None

    try:
        if cfg.method == METHOD_V1:
            conversation = _build_v1_messages(q, catalog, cfg, cache)
        else:
            conversation = _build_v2_messages(
                q, catalog, index, cfg, cache, shot_catalogs, embedder
            )
    except (PromptError, EngineError, RetrievalError) as exc:
        return QuestionResult(
            question_id=q.id,
            predicted_sql="",
            attempts=[],
            failure=f"prompt assembly failed: {exc}",
        )

    response_format = RESPONSE_FORMAT_JSON if cfg.json_output else RESPONSE_FORMAT_TEXT
    max_calls = 1 + (cfg.max_corrections if cfg.error_correction else 0)

    for call_index in range(max_calls):
        request = ChatRequest(
            model=cfg.model_id,
            messages=tuple(conversation),
            temperature=cfg.temperature,
            seed=cfg.seed,
            max_tokens=cfg.max_tokens,
            response_format=response_format,
        )
        try:
            response = client.complete(request)
        except LlmError as exc:
            failure = f"llm transport failure: {exc}"
            break
        prompt_tokens += response.prompt_tokens
        completion_tokens += response.completion_tokens

        error: Optional[str]
        try:
            parsed = (
                parse_json_answer(response.content)
                if cfg.json_output
                else parse_raw_answer(response.content)
            )
            sql = parsed.sql
            error = None
        except ParseFailure as exc:
            sql = ""
            error = f"response parse failure: {exc}"
            parse_failures += 1

        if error is None:
            try:
                execute_readonly(catalog.file_path, sql, cfg.sql_timeout_ms)
            except SqlExecutionError as exc:
                error = str(exc)

        attempts.append(Attempt(sql=sql, execution_error=error))
        if error is None:
            break
        if call_index + 1 < max_calls:
            # The failed assistant turn plus one correction request extend the
            # same conversation.
            conversation.append(
                ChatMessage(ROLE_ASSISTANT, response.content or " ")
            )
            conversation.append(
                ChatMessage(ROLE_USER, render_correction_prompt(error))
            )

    latency_ms = 0 if client.deterministic else int((time.monotonic() - started) * 1000)
    return QuestionResult(
        question_id=q.id,
        predicted_sql=attempts[-1].sql if attempts else "",
        attempts=attempts,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
        latency_ms=latency_ms,
        parse_failures=parse_failures,
        failure=failure,
    )


# ---------------------------------------------------------------------------
# Split runs with checkpointing
# ---------------------------------------------------------------------------

class _Checkpoint:
    """Append-only per-question results plus a header binding the config."""

    def __init__(self, directory: Path, cfg: RunConfig):
        self.directory = directory
        self.partial_path = directory / "partial.jsonl"
        self.header_path = directory / "header.json"
        self._lock = threading.Lock()
        directory.mkdir(parents=True, exist_ok=True)
        digest = config_digest(cfg)
        if self.header_path.is_file():
            existing = json.loads(self.header_path.read_text(encoding="utf-8"))
            if existing.get("config_digest") != digest:
                raise EngineError(
                    f"checkpoint at {directory} belongs to a different run config"
                )
        else:
            self.header_path.write_text(
                json.dumps({"config_digest": digest, "config": cfg.to_dict()}),
                encoding="utf-8",
            )

    def load(self) -> dict[int, QuestionResult]:
        done: dict[int, QuestionResult] = {}
        if not self.partial_path.is_file():
            return done
        with open(self.partial_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    result = QuestionResult.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError):
                    # A crash mid-write can truncate the final line; that
                    # question simply reruns.
                    continue
                done[result.question_id] = result
        return done

    def append(self, result: QuestionResult) -> None:
        line = json.dumps(result.to_dict(), sort_keys=True, ensure_ascii=False)
        with self._lock:
            with open(self.partial_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


def run_split(
    questions: Sequence[Question],
    catalogs: Mapping[str, DatabaseCatalog],
    index: Optional[EmbeddingIndex],
    cfg: RunConfig,
    client: LlmClient,
    *,
    embedder: Optional[Embedder] = None,
    workers: int = 4,
    checkpoint_dir: Optional[Path | str] = None,
) -> list[QuestionResult]:
    """Run every question with bounded parallelism.

    Output is ordered by question id regardless of completion order. With a
    checkpoint directory, finished questions are persisted as they complete
    and an interrupted run resumes without repeating them.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if cfg.method == METHOD_V2 and cfg.shots_k > 0:
        if index is None:
            raise EngineError("method v2 with shots_k > 0 requires an index")
        if embedder is None:
            raise EngineError("method v2 with shots_k > 0 requires an embedder")
        if embedder.embedder_id != index.embedder_id:
            raise EngineError(
                f"embedder {embedder.embedder_id!r} does not match index "
                f"embedder {index.embedder_id!r}; rebuild the index"
            )

    checkpoint = (
        _Checkpoint(Path(checkpoint_dir), cfg) if checkpoint_dir is not None else None
    )
    done = checkpoint.load() if checkpoint is not None else {}
    pending = [q for q in questions if q.id not in done]
    cache = _SchemaCache()

    def work(q: Question) -> QuestionResult:
        catalog = catalogs.get(q.db_id)
        if catalog is None:
            logger.warning("question %s: no catalog for database %r", q.id, q.db_id)
            return QuestionResult(
                question_id=q.id,
                predicted_sql="",
                attempts=[],
                failure=f"no catalog for database {q.db_id!r}",
            )
        return run_question(
            q,
            catalog,
            index,
            cfg,
            client,
            embedder=embedder,
            catalogs=catalogs,
            schema_cache=cache,
        )

    results: dict[int, QuestionResult] = dict(done)
    if pending:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(work, q): q for q in pending}
            for future in as_completed(futures):
                result = future.result()
                results[result.question_id] = result
                if checkpoint is not None:
                    checkpoint.append(result)
    # A checkpoint may hold more questions than this invocation asked for;
    # the output covers exactly the input.
    wanted = {q.id for q in questions}
    return [results[qid] for qid in sorted(results) if qid in wanted]


# ---------------------------------------------------------------------------
# Results files
# ---------------------------------------------------------------------------

RESULTS_FORMAT = "text2sql-results-v1"


def make_run_header(
    cfg: RunConfig, n_questions: int, *, deterministic: bool
) -> dict[str, Any]:
    header: dict[str, Any] = {
        "format": RESULTS_FORMAT,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_digest": config_digest(cfg),
        "n_questions": n_questions,
    }
    # Wall-clock stamps would break byte-identical replay artifacts.
    header["created_at"] = (
        None if deterministic else datetime.now(timezone.utc).isoformat()
    )
    return header


def write_results_jsonl(
    path: Path | str,
    cfg: RunConfig,
    results: Sequence[QuestionResult],
    *,
    deterministic: bool,
) -> None:
    ordered = sorted(results, key=lambda r: r.question_id)
    header = make_run_header(cfg, len(ordered), deterministic=deterministic)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"run_header": header}, sort_keys=True) + "\n")
        for result in ordered:
            f.write(
                json.dumps(result.to_dict(), sort_keys=True, ensure_ascii=False) + "\n"
            )


def read_results_jsonl(
    path: Path | str,
) -> tuple[dict[str, Any], list[QuestionResult]]:
    header: dict[str, Any] = {}
    results: list[QuestionResult] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "run_header" in record:
                header = record["run_header"]
            else:
                results.append(QuestionResult.from_dict(record))
    return header, results


# ---------------------------------------------------------------------------
# Reproducible sampling
# ---------------------------------------------------------------------------

def sample_questions(
    questions: Sequence[Question], sample_size: int, sample_seed: int
) -> list[Question]:
    """Seeded sample over sorted question ids; stable across machines."""
    by_id = sorted(questions, key=lambda q: q.id)
    if sample_size >= len(by_id):
        return by_id
    rng = random.Random(sample_seed)
    chosen = set(rng.sample([q.id for q in by_id], sample_size))
    return [q for q in by_id if q.id in chosen]
