"""Execution-accuracy evaluation, run reports, and experiment harnesses.

A prediction is correct when executing it returns the same result set as the
gold SQL against the same database: row order and duplicate multiplicity are
ignored, column order within a row matters. Reports aggregate accuracy, token
and cost percentiles (nearest-rank), and the correction trigger rate.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .dataset import DatabaseCatalog, Question
from .engine import (
    QuestionResult,
    RunConfig,
    run_split,
)
from .llm import LlmClient, PricingTable, UnknownModelError, inference_cost
from .retrieval import Embedder, EmbeddingIndex
from .sqlexec import SqlExecutionError, execute_readonly, normalize_row

logger = logging.getLogger(__name__)

VERDICT_CORRECT = "correct"
VERDICT_INCORRECT = "incorrect"
VERDICT_GOLD_ERROR = "gold_error"
VERDICT_PRED_ERROR = "pred_error"
VERDICT_PRED_MISSING = "pred_missing"

VERDICTS = (
    VERDICT_CORRECT,
    VERDICT_INCORRECT,
    VERDICT_GOLD_ERROR,
    VERDICT_PRED_ERROR,
    VERDICT_PRED_MISSING,
)


class EvaluationError(Exception):
    pass


class MissingGoldError(EvaluationError):
    pass


@dataclass(frozen=True)
class EvalOutcome:
    question_id: int
    verdict: str
    gold_rows: int = 0
    pred_rows: int = 0


@dataclass
class RunReport:
    ex_percent: float
    n_questions: int
    n_correct: int
    verdict_histogram: dict[str, int]
    token_stats: dict[str, dict[str, int]]
    cost_stats: Optional[dict[str, float]]
    correction_trigger_rate: float
    config_echo: Optional[dict[str, Any]] = None

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunReport":
        return cls(
            ex_percent=data["ex_percent"],
            n_questions=data["n_questions"],
            n_correct=data["n_correct"],
            verdict_histogram=dict(data["verdict_histogram"]),
            token_stats={k: dict(v) for k, v in data["token_stats"].items()},
            cost_stats=dict(data["cost_stats"]) if data.get("cost_stats") else None,
            correction_trigger_rate=data["correction_trigger_rate"],
            config_echo=data.get("config_echo"),
        )


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def execute_sql(
    db: DatabaseCatalog, sql: str, timeout_ms: int = 30_000
) -> list[tuple]:
    """Execute against the catalog's database file, read-only with a timeout.

    Returns the full ordered row list with normalized values; raises
    SqlExecutionError (message preserved) or SqlTimeoutError.
    """
    return execute_readonly(db.file_path, sql, timeout_ms)


def ex_match(gold_rows: Iterable[tuple], pred_rows: Iterable[tuple]) -> bool:
    """Set comparison: order and duplicates ignored, column order significant."""
    gold = {normalize_row(tuple(row)) for row in gold_rows}
    pred = {normalize_row(tuple(row)) for row in pred_rows}
    return gold == pred


def judge_question(
    result: QuestionResult,
    question: Question,
    catalog: DatabaseCatalog,
    timeout_ms: int,
) -> EvalOutcome:
    if not question.gold_sql:
        raise MissingGoldError(f"question {question.id} has no gold SQL")
    try:
        gold_rows = execute_sql(catalog, question.gold_sql, timeout_ms)
    except SqlExecutionError as exc:
        logger.warning("gold SQL failed for question %s: %s", question.id, exc)
        return EvalOutcome(question.id, VERDICT_GOLD_ERROR)

    predicted = (result.predicted_sql or "").strip()
    if not predicted:
        return EvalOutcome(question.id, VERDICT_PRED_MISSING, gold_rows=len(gold_rows))
    try:
        pred_rows = execute_sql(catalog, predicted, timeout_ms)
    except SqlExecutionError:
        return EvalOutcome(question.id, VERDICT_PRED_ERROR, gold_rows=len(gold_rows))

    verdict = VERDICT_CORRECT if ex_match(gold_rows, pred_rows) else VERDICT_INCORRECT
    return EvalOutcome(
        question.id, verdict, gold_rows=len(gold_rows), pred_rows=len(pred_rows)
    )


# ---------------------------------------------------------------------------
# Percentiles (nearest-rank) and aggregation
# ---------------------------------------------------------------------------

def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """The ceil(p/100 * n)-th order statistic; median is percentile 50."""
    if not values:
        return 0
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return ordered[min(rank, len(ordered)) - 1]


def _token_stats(results: Sequence[QuestionResult]) -> dict[str, dict[str, int]]:
    series = {
        "prompt": [r.prompt_tokens for r in results],
        "completion": [r.completion_tokens for r in results],
        "total": [r.prompt_tokens + r.completion_tokens for r in results],
    }
    return {
        name: {
            "median": int(nearest_rank(values, 50)),
            "p95": int(nearest_rank(values, 95)),
        }
        for name, values in series.items()
    }


def _cost_stats(
    results: Sequence[QuestionResult],
    model_id: Optional[str],
    prices: Optional[PricingTable],
) -> Optional[dict[str, float]]:
    if prices is None or model_id is None:
        return None
    try:
        costs = [
            inference_cost(r.prompt_tokens, r.completion_tokens, model_id, prices)
            for r in results
        ]
    except UnknownModelError:
        logger.warning("no pricing for model %r; cost stats omitted", model_id)
        return None
    return {
        "median": nearest_rank(costs, 50),
        "p95": nearest_rank(costs, 95),
        "total": sum(costs),
    }


def evaluate(
    results: Sequence[QuestionResult],
    questions: Sequence[Question],
    catalogs: Mapping[str, DatabaseCatalog],
    *,
    timeout_ms: int = 30_000,
    cfg: Optional[RunConfig] = None,
    prices: Optional[PricingTable] = None,
    exclude_gold_errors: bool = False,
    workers: int = 1,
) -> tuple[list[EvalOutcome], RunReport]:
    """Judge every result and aggregate a report.

    Gold-SQL execution failures are flagged loudly and scored incorrect by
    default so accuracy never silently inflates; set exclude_gold_errors to
    drop them from the denominator instead. Judging parallelizes over
    questions; the aggregation below stays single-threaded and ordered.
    """
    by_id = {q.id: q for q in questions}

    def judge(result: QuestionResult) -> EvalOutcome:
        question = by_id.get(result.question_id)
        if question is None:
            raise EvaluationError(
                f"result for unknown question id {result.question_id}"
            )
        catalog = catalogs.get(question.db_id)
        if catalog is None:
            raise EvaluationError(
                f"question {question.id}: no catalog for database {question.db_id!r}"
            )
        return judge_question(result, question, catalog, timeout_ms)

    if workers > 1 and len(results) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(judge, results))
    else:
        outcomes = [judge(result) for result in results]

    histogram = {verdict: 0 for verdict in VERDICTS}
    for outcome in outcomes:
        histogram[outcome.verdict] += 1
    n_correct = histogram[VERDICT_CORRECT]
    denominator = len(outcomes)
    if exclude_gold_errors:
        denominator -= histogram[VERDICT_GOLD_ERROR]
    ex_percent = 100.0 * n_correct / denominator if denominator else 0.0
    corrections = sum(1 for r in results if r.correction_triggered)

    report = RunReport(
        ex_percent=ex_percent,
        n_questions=denominator,
        n_correct=n_correct,
        verdict_histogram=histogram,
        token_stats=_token_stats(results),
        cost_stats=_cost_stats(results, cfg.model_id if cfg else None, prices),
        correction_trigger_rate=corrections / len(results) if results else 0.0,
        config_echo=cfg.to_dict() if cfg else None,
    )
    return outcomes, report


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def render_report_text(report: RunReport) -> str:
    lines = [
        f"EX {report.ex_percent:.2f}% ({report.n_correct}/{report.n_questions})",
        "verdicts          : "
        + " ".join(
            f"{name}={count}"
            for name, count in report.verdict_histogram.items()
            if count or name in (VERDICT_CORRECT, VERDICT_INCORRECT)
        ),
    ]
    for series in ("prompt", "completion", "total"):
        stats = report.token_stats[series]
        lines.append(
            f"tokens {series:<10} : median={stats['median']} p95={stats['p95']}"
        )
    if report.cost_stats is not None:
        p95 = report.cost_stats["p95"]
        lines.append(
            "cost/question     : "
            f"median=${report.cost_stats['median']:.6f} "
            f"p95=${p95:.6f} (≈ ${p95:.2f} rounded) "
            f"total=${report.cost_stats['total']:.4f}"
        )
    lines.append(
        f"correction rate   : {100.0 * report.correction_trigger_rate:.2f}%"
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Ablations, shot sweeps, seed variance
# ---------------------------------------------------------------------------

DEFAULT_TOGGLES: list[tuple[str, dict[str, Any]]] = [
    ("w/o error correction", {"error_correction": False}),
    ("w/o JSON output", {"json_output": False}),
    ("w/ non-diverse RAG", {"diverse": False}),
]

BASELINE_NAME = "baseline"


@dataclass(frozen=True)
class AblationRow:
    name: str
    ex_percent: float
    delta: Optional[float] = None  # None for the baseline row


def _apply_toggle(cfg: RunConfig, delta: Mapping[str, Any]) -> RunConfig:
    return RunConfig(**{**cfg.to_dict(), **delta})


def _run_and_score(
    cfg: RunConfig,
    questions: Sequence[Question],
    catalogs: Mapping[str, DatabaseCatalog],
    index: Optional[EmbeddingIndex],
    client: LlmClient,
    embedder: Optional[Embedder],
    workers: int,
    timeout_ms: int,
) -> float:
    results = run_split(
        questions, catalogs, index, cfg, client, embedder=embedder, workers=workers
    )
    _, report = evaluate(
        results, questions, catalogs, timeout_ms=timeout_ms, cfg=cfg
    )
    return report.ex_percent


def ablate(
    base_cfg: RunConfig,
    toggles: Sequence[tuple[str, Mapping[str, Any]]],
    questions: Sequence[Question],
    catalogs: Mapping[str, DatabaseCatalog],
    index: Optional[EmbeddingIndex],
    client: LlmClient,
    *,
    embedder: Optional[Embedder] = None,
    workers: int = 4,
    timeout_ms: int = 30_000,
) -> list[AblationRow]:
    """Run the baseline then each single-toggle variant on the same sample and
    report per-toggle deltas against the baseline."""
    baseline_ex = _run_and_score(
        base_cfg, questions, catalogs, index, client, embedder, workers, timeout_ms
    )
    rows = [AblationRow(BASELINE_NAME, baseline_ex)]
    for name, delta in toggles:
        variant_cfg = _apply_toggle(base_cfg, delta)
        variant_ex = _run_and_score(
            variant_cfg, questions, catalogs, index, client, embedder, workers, timeout_ms
        )
        rows.append(AblationRow(name, variant_ex, delta=variant_ex - baseline_ex))
    return rows


def render_ablation_table(rows: Sequence[AblationRow]) -> str:
    width = max(len(row.name) for row in rows) + 2
    lines = [f"{'configuration':<{width}}  EX (%)   delta"]
    for row in rows:
        delta = "--" if row.delta is None else f"{row.delta:+.1f}"
        lines.append(f"{row.name:<{width}}  {row.ex_percent:5.1f}    {delta}")
    return "\n".join(lines)


def shots_sweep(
    base_cfg: RunConfig,
    ks: Sequence[int],
    questions: Sequence[Question],
    catalogs: Mapping[str, DatabaseCatalog],
    index: Optional[EmbeddingIndex],
    client: LlmClient,
    *,
    embedder: Optional[Embedder] = None,
    workers: int = 4,
    timeout_ms: int = 30_000,
) -> list[tuple[int, float]]:
    """EX as a function of the few-shot count k."""
    curve = []
    for k in ks:
        cfg = _apply_toggle(base_cfg, {"shots_k": k})
        curve.append(
            (
                k,
                _run_and_score(
                    cfg, questions, catalogs, index, client, embedder, workers, timeout_ms
                ),
            )
        )
    return curve


def write_sweep_csv(curve: Sequence[tuple[int, float]], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("k,ex_percent\n")
        for k, ex in curve:
            f.write(f"{k},{ex:.2f}\n")


@dataclass(frozen=True)
class VarianceReport:
    seeds: tuple[int, ...]
    ex_percents: tuple[float, ...]

    @property
    def spread(self) -> float:
        if not self.ex_percents:
            return 0.0
        return max(self.ex_percents) - min(self.ex_percents)


def seed_variance(
    base_cfg: RunConfig,
    seeds: Sequence[int],
    questions: Sequence[Question],
    catalogs: Mapping[str, DatabaseCatalog],
    index: Optional[EmbeddingIndex],
    client: LlmClient,
    *,
    embedder: Optional[Embedder] = None,
    workers: int = 4,
    timeout_ms: int = 30_000,
) -> VarianceReport:
    """Repeat the same run once per seed and report the EX spread.

    Offline deterministic backends always yield spread 0; live providers keep
    residual run-to-run variance even at temperature 0 with a fixed seed.
    """
    ex_values = []
    for seed in seeds:
        cfg = _apply_toggle(base_cfg, {"seed": seed})
        ex_values.append(
            _run_and_score(
                cfg, questions, catalogs, index, client, embedder, workers, timeout_ms
            )
        )
    return VarianceReport(seeds=tuple(seeds), ex_percents=tuple(ex_values))
