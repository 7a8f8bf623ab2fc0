"""Command-line driver: ingest, index, finetune-file, run, eval, ablate, report.

Configuration precedence is flags > environment > config file > defaults.
Environment variables: TEXT2SQL_API_KEY (or OPENAI_API_KEY) for the
credential, TEXT2SQL_BASE_URL for the endpoint. Exit codes: 0 success,
1 pipeline/evaluation failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .dataset import DatasetError, Question, load_catalogs, load_split
from .engine import (
    EngineError,
    METHOD_V1,
    METHOD_V2,
    RunConfig,
    read_results_jsonl,
    run_split,
    sample_questions,
    v1_schema_for_question,
    make_gold_echo_backend,
    write_results_jsonl,
)
from .evaluator import (
    DEFAULT_TOGGLES,
    EvaluationError,
    RunReport,
    ablate,
    evaluate,
    render_ablation_table,
    render_report_text,
    shots_sweep,
    write_sweep_csv,
)
from .llm import (
    DEFAULT_BASE_URL,
    HttpBackend,
    LlmClient,
    LlmError,
    PricingTable,
    ReplayBackend,
)
from .prompts import PromptError, emit_finetune_file
from .retrieval import (
    HashEmbedder,
    HttpEmbedder,
    RetrievalError,
    build_index,
    load_index,
    save_index,
)

DEFAULT_CACHE_DIRNAME = ".catalog_cache"


class CliConfigError(Exception):
    """Bad flags, config file, or input layout; maps to exit code 2."""


_CONFIG_ERRORS = (
    CliConfigError,
    DatasetError,
    EngineError,
    PromptError,
    RetrievalError,
    ValueError,
    FileNotFoundError,
)


def _env_api_key() -> Optional[str]:
    return os.environ.get("TEXT2SQL_API_KEY") or os.environ.get("OPENAI_API_KEY")


def _resolve_base_url(flag_value: Optional[str], file_cfg: dict[str, Any]) -> str:
    return (
        flag_value
        or os.environ.get("TEXT2SQL_BASE_URL")
        or file_cfg.get("base_url")
        or DEFAULT_BASE_URL
    )


def _load_file_config(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        raise CliConfigError(f"config file not found: {config_path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"config file {config_path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise CliConfigError(f"config file {config_path} must hold a JSON object")
    return data


_RUN_CONFIG_FLAGS = (
    ("method", "method"),
    ("model", "model_id"),
    ("temperature", "temperature"),
    ("seed", "seed"),
    ("shots", "shots_k"),
    ("max_corrections", "max_corrections"),
    ("max_tokens", "max_tokens"),
    ("sql_timeout_ms", "sql_timeout_ms"),
)


def _build_run_config(args: argparse.Namespace, file_cfg: dict[str, Any]) -> RunConfig:
    values: dict[str, Any] = {
        key: value
        for key, value in file_cfg.items()
        if key not in ("base_url", "workers")
    }
    for flag, field in _RUN_CONFIG_FLAGS:
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[field] = flag_value
    if getattr(args, "no_diverse", False):
        values["diverse"] = False
    if getattr(args, "no_json", False):
        values["json_output"] = False
    if getattr(args, "no_correction", False):
        values["error_correction"] = False
    try:
        return RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliConfigError(f"invalid run configuration: {exc}")


def _load_corpus(root: str, cache_dir: Optional[str]):
    root_path = Path(root)
    if not root_path.is_dir():
        raise CliConfigError(f"corpus root is not a directory: {root_path}")
    cache = Path(cache_dir) if cache_dir else root_path / DEFAULT_CACHE_DIRNAME
    return load_catalogs(root_path, cache_dir=cache)


def _load_questions(root: str, split: str) -> list[Question]:
    return load_split(Path(root), split)


def _make_embedder(args: argparse.Namespace, file_cfg: dict[str, Any]):
    kind = getattr(args, "embedder", None) or "hash"
    if kind == "hash":
        return HashEmbedder(dimension=getattr(args, "dim", None) or 64)
    if kind == "http":
        model = getattr(args, "embedding_model", None)
        if not model:
            raise CliConfigError("--embedding-model is required with --embedder http")
        return HttpEmbedder(
            model,
            base_url=_resolve_base_url(getattr(args, "base_url", None), file_cfg),
            api_key=_env_api_key(),
        )
    raise CliConfigError(f"unknown embedder {kind!r}")


def _embedder_for_index(index, args: argparse.Namespace, file_cfg: dict[str, Any]):
    """Reconstruct the embedder an index was built with from its recorded id."""
    embedder_id = index.embedder_id
    if embedder_id.startswith("hash-"):
        return HashEmbedder(dimension=int(embedder_id.split("-", 1)[1]))
    if embedder_id.startswith("openai:"):
        return HttpEmbedder(
            embedder_id.split(":", 1)[1],
            base_url=_resolve_base_url(getattr(args, "base_url", None), file_cfg),
            api_key=_env_api_key(),
        )
    raise CliConfigError(f"index built with unknown embedder {embedder_id!r}")


def _make_client(
    args: argparse.Namespace,
    file_cfg: dict[str, Any],
    questions: Sequence[Question],
) -> LlmClient:
    backend_name = getattr(args, "backend", "mock")
    transcript = getattr(args, "transcript", None)
    if backend_name == "live":
        backend = HttpBackend(
            base_url=_resolve_base_url(getattr(args, "base_url", None), file_cfg),
            api_key=_env_api_key(),
        )
        capture = transcript
    elif backend_name == "replay":
        if not transcript:
            raise CliConfigError("--backend replay requires --transcript")
        if not Path(transcript).is_file():
            raise CliConfigError(f"transcript not found: {transcript}")
        backend = ReplayBackend.from_transcript(transcript)
        capture = None  # replaying must not grow its own source file
    elif backend_name == "mock":
        backend = make_gold_echo_backend(questions)
        capture = transcript
    else:
        raise CliConfigError(f"unknown backend {backend_name!r}")
    return LlmClient(backend, transcript_path=capture)


def _select_sample(args: argparse.Namespace, questions: list[Question]) -> list[Question]:
    sample = getattr(args, "sample", None)
    if sample is None:
        return sorted(questions, key=lambda q: q.id)
    seed = getattr(args, "sample_seed", None)
    if seed is None:
        raise CliConfigError("--sample requires --sample-seed for reproducibility")
    return sample_questions(questions, sample, seed)


def _load_index_and_embedder(args, file_cfg, cfg: RunConfig):
    if cfg.method != METHOD_V2 or cfg.shots_k == 0:
        return None, None
    index_path = getattr(args, "index", None)
    if not index_path:
        raise CliConfigError("method v2 with shots > 0 requires --index")
    if not Path(index_path).is_file():
        raise CliConfigError(f"index file not found: {index_path}")
    index = load_index(index_path)
    return index, _embedder_for_index(index, args, file_cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise CliConfigError(f"corpus root is not a directory: {root}")
    splits = sorted(
        d.name[: -len("_databases")] for d in root.glob("*_databases") if d.is_dir()
    )
    if not splits:
        raise CliConfigError(f"no <split>_databases directories under {root}")
    total_questions = 0
    for split in splits:
        split_file = root / f"{split}.json"
        if not split_file.is_file():
            raise CliConfigError(f"missing split file: {split_file}")
        total_questions += len(load_split(root, split))
    catalogs, cache_hits = _load_corpus(args.root, args.cache_dir)
    total_tables = sum(len(c.tables) for c in catalogs.values())
    suffix = " (all catalogs cached)" if cache_hits and all(cache_hits.values()) else ""
    print(
        f"{len(catalogs)} databases, {total_tables} tables, "
        f"{total_questions} questions{suffix}"
    )
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    file_cfg = _load_file_config(args.config)
    questions = _load_questions(args.root, args.split)
    missing_gold = [q.id for q in questions if not q.gold_sql]
    if missing_gold:
        raise CliConfigError(
            f"split {args.split!r} has questions without gold SQL: {missing_gold[:5]}"
        )
    embedder = _make_embedder(args, file_cfg)
    out = Path(args.out)
    if out.is_file() and not args.force:
        existing = load_index(out)
        if existing.embedder_id == embedder.embedder_id and len(existing) == len(questions):
            print(
                f"index up to date: {len(existing)} entries, dimension "
                f"{existing.dimension} ({existing.embedder_id})"
            )
            return 0
    index = build_index(questions, embedder)
    save_index(index, out)
    print(
        f"indexed {len(index)} questions, dimension {index.dimension} "
        f"({index.embedder_id}) -> {out}"
    )
    return 0


def cmd_finetune_file(args: argparse.Namespace) -> int:
    # Training prompts always use the single-message v1 format.
    file_cfg = _load_file_config(args.config)
    values = {
        key: file_cfg[key]
        for key in ("context_tokens", "tokenizer_id", "max_tokens")
        if key in file_cfg
    }
    values["method"] = METHOD_V1
    if args.max_tokens is not None:
        values["max_tokens"] = args.max_tokens
    if args.context_tokens is not None:
        values["context_tokens"] = args.context_tokens
    try:
        cfg = RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliConfigError(f"invalid configuration: {exc}")
    questions = _load_questions(args.root, args.split)
    catalogs, _ = _load_corpus(args.root, args.cache_dir)
    examples = []
    for q in questions:
        catalog = catalogs.get(q.db_id)
        if catalog is None:
            raise CliConfigError(f"question {q.id}: no database {q.db_id!r} in corpus")
        examples.append((q, v1_schema_for_question(q, catalog, cfg), q.gold_sql or ""))
    count = emit_finetune_file(examples, args.out)
    print(f"wrote {count} training examples to {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    file_cfg = _load_file_config(args.config)
    cfg = _build_run_config(args, file_cfg)
    questions = _select_sample(args, _load_questions(args.root, args.split))
    catalogs, _ = _load_corpus(args.root, args.cache_dir)
    index, embedder = _load_index_and_embedder(args, file_cfg, cfg)
    client = _make_client(args, file_cfg, questions)
    workers = args.workers or file_cfg.get("workers") or 4
    results = run_split(
        questions,
        catalogs,
        index,
        cfg,
        client,
        embedder=embedder,
        workers=workers,
        checkpoint_dir=args.checkpoint_dir,
    )
    write_results_jsonl(args.out, cfg, results, deterministic=client.deterministic)
    failures = sum(1 for r in results if r.failure)
    note = f" ({failures} with pipeline failures)" if failures else ""
    print(f"wrote {len(results)} results to {args.out}{note}")
    return 0


def _pricing(args: argparse.Namespace) -> PricingTable:
    if getattr(args, "pricing", None):
        return PricingTable.load(args.pricing)
    return PricingTable.default()


def cmd_eval(args: argparse.Namespace) -> int:
    header, results = read_results_jsonl(args.results)
    cfg = RunConfig.from_dict(header["config"]) if header.get("config") else None
    questions = _load_questions(args.root, args.split)
    catalogs, _ = _load_corpus(args.root, args.cache_dir)
    wanted = {r.question_id for r in results}
    questions = [q for q in questions if q.id in wanted]
    outcomes, report = evaluate(
        results,
        questions,
        catalogs,
        timeout_ms=args.timeout_ms,
        cfg=cfg,
        prices=_pricing(args),
        exclude_gold_errors=args.exclude_gold_errors,
    )
    text = render_report_text(report)
    print(text)
    report_path = Path(args.report or (str(args.results) + ".report.json"))
    report_path.write_text(
        json.dumps(report.to_dict(), sort_keys=True, ensure_ascii=False, indent=2),
        encoding="utf-8",
    )
    report_path.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    print(f"report written to {report_path}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    file_cfg = _load_file_config(args.config)
    cfg = _build_run_config(args, file_cfg)
    questions = _select_sample(args, _load_questions(args.root, args.split))
    catalogs, _ = _load_corpus(args.root, args.cache_dir)
    index, embedder = _load_index_and_embedder(args, file_cfg, cfg)
    client = _make_client(args, file_cfg, questions)
    workers = args.workers or file_cfg.get("workers") or 4

    rows = ablate(
        cfg,
        DEFAULT_TOGGLES,
        questions,
        catalogs,
        index,
        client,
        embedder=embedder,
        workers=workers,
        timeout_ms=cfg.sql_timeout_ms,
    )
    table = render_ablation_table(rows)
    print(table)
    if args.out_table:
        Path(args.out_table).write_text(table + "\n", encoding="utf-8")
    if args.sweep_csv:
        lo, hi = _parse_sweep_range(args.sweep_shots)
        curve = shots_sweep(
            cfg,
            range(lo, hi + 1),
            questions,
            catalogs,
            index,
            client,
            embedder=embedder,
            workers=workers,
            timeout_ms=cfg.sql_timeout_ms,
        )
        write_sweep_csv(curve, args.sweep_csv)
        print(f"shots sweep written to {args.sweep_csv}")
    return 0


def _parse_sweep_range(spec: str) -> tuple[int, int]:
    try:
        lo_text, hi_text = spec.split(":", 1)
        lo, hi = int(lo_text), int(hi_text)
    except ValueError:
        raise CliConfigError(f"invalid sweep range {spec!r}; expected LO:HI")
    if lo < 0 or hi < lo:
        raise CliConfigError(f"invalid sweep range {spec!r}")
    return lo, hi


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for path in args.reports:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        reports.append((path, RunReport.from_dict(data)))
    for path, report in reports:
        if len(reports) > 1:
            print(f"--- {path}")
        print(render_report_text(report))
    if len(reports) > 1:
        values = [report.ex_percent for _, report in reports]
        print(f"EX spread across {len(values)} runs: {max(values) - min(values):.2f}%")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--root", required=True, help="BIRD-format corpus root")
    p.add_argument("--cache-dir", default=None, help="catalog cache directory")


def _add_run_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--method", choices=(METHOD_V1, METHOD_V2), default=None)
    p.add_argument("--model", default=None, help="model id sent to the endpoint")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shots", type=int, default=None, help="few-shot count (v2)")
    p.add_argument("--max-corrections", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--sql-timeout-ms", type=int, default=None)
    p.add_argument("--no-diverse", action="store_true", help="plain top-k retrieval")
    p.add_argument("--no-json", action="store_true", help="plain-text output mode")
    p.add_argument("--no-correction", action="store_true", help="skip error correction")


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("live", "replay", "mock"), default="mock")
    p.add_argument("--transcript", default=None,
                   help="transcript file (replay source, or capture target)")
    p.add_argument("--base-url", default=None, help="chat-completions base URL")
    p.add_argument("--index", default=None, help="embedding index file (v2)")
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--sample-seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="text2sql",
        description="Text-to-SQL pipeline and benchmark harness for "
        "BIRD-format datasets.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="validate a corpus and cache its catalogs")
    p.add_argument("root", help="BIRD-format corpus root")
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build the few-shot embedding index")
    _add_corpus_args(p)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", choices=("hash", "http"), default="hash")
    p.add_argument("--embedding-model", default=None)
    p.add_argument("--dim", type=int, default=None, help="hash embedder dimension")
    p.add_argument("--base-url", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--force", action="store_true", help="rebuild even if current")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("finetune-file", help="emit a JSONL training file")
    _add_corpus_args(p)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--max-tokens", type=int, default=None,
                   help="completion budget reserved out of the context window")
    p.add_argument("--context-tokens", type=int, default=None)
    p.set_defaults(func=cmd_finetune_file)

    p = sub.add_parser("run", help="run the pipeline over a split")
    _add_corpus_args(p)
    p.add_argument("--split", default="dev")
    p.add_argument("--out", default="results.jsonl")
    p.add_argument("--checkpoint-dir", default=None)
    _add_run_config_args(p)
    _add_backend_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a results file (execution accuracy)")
    _add_corpus_args(p)
    p.add_argument("--split", default="dev")
    p.add_argument("--results", required=True)
    p.add_argument("--report", default=None, help="report JSON output path")
    p.add_argument("--timeout-ms", type=int, default=30_000)
    p.add_argument("--pricing", default=None, help="pricing table JSON")
    p.add_argument("--exclude-gold-errors", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline + toggle ablations + shots sweep")
    _add_corpus_args(p)
    p.add_argument("--split", default="dev")
    p.add_argument("--out-table", default=None, help="ablation table output path")
    p.add_argument("--sweep-csv", default=None, help="shots-sweep CSV output path")
    p.add_argument("--sweep-shots", default="1:8", help="sweep range LO:HI")
    _add_run_config_args(p)
    _add_backend_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render report JSONs; spread across runs")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LlmError, EvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
