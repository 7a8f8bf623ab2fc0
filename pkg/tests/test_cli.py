from __future__ import annotations

import json
from pathlib import Path

import pytest

from text2sql.cli import main
from text2sql.engine import read_results_jsonl


def run_cli(*argv: str) -> int:
    return main(list(argv))


@pytest.fixture()
def indexed_corpus(fresh_corpus, tmp_path):
    """Corpus plus a built hash-embedder index for v2 runs."""
    index_path = tmp_path / "train.index.npz"
    assert run_cli(
        "index", "--root", str(fresh_corpus), "--split", "train",
        "--out", str(index_path),
    ) == 0
    return fresh_corpus, index_path


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def test_ingest_counts(fresh_corpus, capsys):
    assert run_cli("ingest", str(fresh_corpus)) == 0
    out = capsys.readouterr().out
    assert "7 databases, 12 tables, 32 questions" in out


def test_ingest_missing_split_file_exit_2(fresh_corpus, capsys):
    (fresh_corpus / "dev.json").unlink()
    code = run_cli("ingest", str(fresh_corpus))
    assert code == 2
    err = capsys.readouterr().err
    assert "dev.json" in err


def test_reingest_hits_cache(fresh_corpus, capsys):
    assert run_cli("ingest", str(fresh_corpus)) == 0
    capsys.readouterr()
    cache_dir = fresh_corpus / ".catalog_cache"
    stamps = {p.name: p.stat().st_mtime_ns for p in cache_dir.glob("*.json")}
    assert run_cli("ingest", str(fresh_corpus)) == 0
    out = capsys.readouterr().out
    assert "(all catalogs cached)" in out
    after = {p.name: p.stat().st_mtime_ns for p in cache_dir.glob("*.json")}
    assert after == stamps  # nothing re-introspected or rewritten


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

def test_index_build_and_up_to_date(fresh_corpus, tmp_path, capsys):
    out_path = tmp_path / "index.npz"
    assert run_cli(
        "index", "--root", str(fresh_corpus), "--split", "train",
        "--out", str(out_path),
    ) == 0
    assert out_path.is_file()
    first_out = capsys.readouterr().out
    assert "indexed 12 questions" in first_out
    assert run_cli(
        "index", "--root", str(fresh_corpus), "--split", "train",
        "--out", str(out_path),
    ) == 0
    assert "index up to date" in capsys.readouterr().out


def test_index_rebuilds_when_embedder_changes(fresh_corpus, tmp_path, capsys):
    out_path = tmp_path / "index.npz"
    assert run_cli(
        "index", "--root", str(fresh_corpus), "--split", "train",
        "--out", str(out_path),
    ) == 0
    capsys.readouterr()
    assert run_cli(
        "index", "--root", str(fresh_corpus), "--split", "train",
        "--out", str(out_path), "--dim", "16",
    ) == 0
    out = capsys.readouterr().out
    assert "indexed 12 questions, dimension 16" in out


# ---------------------------------------------------------------------------
# finetune-file
# ---------------------------------------------------------------------------

def test_finetune_file_contract(fresh_corpus, tmp_path, capsys):
    out_path = tmp_path / "train.jsonl"
    assert run_cli(
        "finetune-file", "--root", str(fresh_corpus), "--split", "train",
        "--out", str(out_path),
    ) == 0
    assert "wrote 12 training examples" in capsys.readouterr().out
    lines = out_path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 12
    for line in lines:
        record = json.loads(line)
        roles = [m["role"] for m in record["messages"]]
        assert roles == ["user", "assistant"]
        assistant = record["messages"][1]["content"]
        assert "```" not in assistant
        assert not assistant.strip().startswith("{")
        assert "## The user has asked:" in record["messages"][0]["content"]


# ---------------------------------------------------------------------------
# run + eval
# ---------------------------------------------------------------------------

def test_run_mock_then_eval_scores_100(fresh_corpus, tmp_path, capsys):
    results = tmp_path / "results.jsonl"
    assert run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--method", "v1", "--model", "ft:gpt-3.5-turbo-0613",
        "--backend", "mock", "--out", str(results),
    ) == 0
    assert results.is_file()
    capsys.readouterr()
    assert run_cli(
        "eval", "--root", str(fresh_corpus), "--split", "dev",
        "--results", str(results),
    ) == 0
    out = capsys.readouterr().out
    assert "EX 100.00% (20/20)" in out
    report_path = Path(str(results) + ".report.json")
    assert report_path.is_file()
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["ex_percent"] == 100.0


def test_run_replay_byte_identical(fresh_corpus, tmp_path, capsys):
    transcript = tmp_path / "transcript.jsonl"
    capture = tmp_path / "capture.jsonl"
    assert run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--method", "v1", "--backend", "mock",
        "--transcript", str(transcript), "--out", str(capture),
    ) == 0

    first = tmp_path / "replay1.jsonl"
    second = tmp_path / "replay2.jsonl"
    for out_path in (first, second):
        assert run_cli(
            "run", "--root", str(fresh_corpus), "--split", "dev",
            "--method", "v1", "--backend", "replay",
            "--transcript", str(transcript), "--out", str(out_path),
        ) == 0
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes() == capture.read_bytes()

    # Reports over the two replays are byte-identical too.
    for results in (first, second):
        assert run_cli(
            "eval", "--root", str(fresh_corpus), "--split", "dev",
            "--results", str(results),
        ) == 0
    report_a = Path(str(first) + ".report.json").read_bytes()
    report_b = Path(str(second) + ".report.json").read_bytes()
    assert report_a == report_b


def test_run_sample_reproducible(fresh_corpus, tmp_path):
    out_a = tmp_path / "a.jsonl"
    out_b = tmp_path / "b.jsonl"
    for out_path in (out_a, out_b):
        assert run_cli(
            "run", "--root", str(fresh_corpus), "--split", "dev",
            "--method", "v1", "--backend", "mock",
            "--sample", "5", "--sample-seed", "7", "--out", str(out_path),
        ) == 0
    _, results_a = read_results_jsonl(out_a)
    _, results_b = read_results_jsonl(out_b)
    ids_a = [r.question_id for r in results_a]
    assert ids_a == [r.question_id for r in results_b]
    assert len(ids_a) == 5


def test_run_v2_with_index(indexed_corpus, tmp_path, capsys):
    corpus, index_path = indexed_corpus
    results = tmp_path / "v2.jsonl"
    assert run_cli(
        "run", "--root", str(corpus), "--split", "dev",
        "--method", "v2", "--shots", "4", "--backend", "mock",
        "--index", str(index_path), "--out", str(results),
    ) == 0
    capsys.readouterr()
    assert run_cli(
        "eval", "--root", str(corpus), "--split", "dev", "--results", str(results)
    ) == 0
    assert "EX 100.00% (20/20)" in capsys.readouterr().out


def test_v1_transcript_has_no_system_messages(fresh_corpus, tmp_path):
    transcript = tmp_path / "t.jsonl"
    assert run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--method", "v1", "--backend", "mock", "--transcript", str(transcript),
        "--out", str(tmp_path / "r.jsonl"),
    ) == 0
    for line in transcript.read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        roles = [m["role"] for m in record["request"]["messages"]]
        assert "system" not in roles
        assert record["request"]["max_tokens"] == 1000


def test_v2_transcript_has_exactly_one_system_message(indexed_corpus, tmp_path):
    corpus, index_path = indexed_corpus
    transcript = tmp_path / "t.jsonl"
    assert run_cli(
        "run", "--root", str(corpus), "--split", "dev",
        "--method", "v2", "--shots", "2", "--backend", "mock",
        "--index", str(index_path), "--transcript", str(transcript),
        "--out", str(tmp_path / "r.jsonl"),
    ) == 0
    for line in transcript.read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        roles = [m["role"] for m in record["request"]["messages"]]
        assert roles.count("system") == 1
        assert roles[0] == "system"


def test_run_no_correction_flag(fresh_corpus, tmp_path):
    out_path = tmp_path / "r.jsonl"
    assert run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--method", "v1", "--backend", "mock", "--no-correction",
        "--out", str(out_path),
    ) == 0
    header, results = read_results_jsonl(out_path)
    assert header["config"]["error_correction"] is False
    assert all(len(r.attempts) == 1 for r in results)


def test_run_config_file_and_flag_precedence(fresh_corpus, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps({"method": "v1", "model_id": "file-model", "seed": 5}),
        encoding="utf-8",
    )
    out_path = tmp_path / "r.jsonl"
    assert run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--backend", "mock", "--config", str(config),
        "--model", "flag-model", "--out", str(out_path),
    ) == 0
    header, _ = read_results_jsonl(out_path)
    assert header["config"]["model_id"] == "flag-model"  # flag wins
    assert header["config"]["seed"] == 5                 # file value survives
    assert header["config"]["method"] == "v1"


def test_run_live_backend_against_local_stub(fresh_corpus, tmp_path, capsys, monkeypatch):
    """Full HTTP path: a local OpenAI-compatible server answers with gold SQL."""
    import json as json_module
    import threading
    from http.server import BaseHTTPRequestHandler, HTTPServer

    from text2sql.dataset import load_split

    questions = load_split(fresh_corpus, "dev")
    gold_by_text = {q.text: q.gold_sql for q in questions}
    marker = "\n\n## The user has asked:\n"

    class Handler(BaseHTTPRequestHandler):
        calls = 0

        def do_POST(self):
            body = json_module.loads(
                self.rfile.read(int(self.headers["Content-Length"]))
            )
            Handler.calls += 1
            if Handler.calls == 1:  # exercise the retry path once
                self.send_response(429)
                self.send_header("Retry-After", "0")
                self.end_headers()
                return
            content = body["messages"][-1]["content"]
            text = content[content.rfind(marker) + len(marker):].split("\nNote: ")[0]
            payload = {
                "choices": [
                    {"message": {"content": gold_by_text[text]}, "finish_reason": "stop"}
                ],
                "usage": {"prompt_tokens": 50, "completion_tokens": 9},
                "model": body["model"],
            }
            raw = json_module.dumps(payload).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    monkeypatch.setenv("TEXT2SQL_API_KEY", "sk-test")
    try:
        results = tmp_path / "live.jsonl"
        assert run_cli(
            "run", "--root", str(fresh_corpus), "--split", "dev",
            "--method", "v1", "--backend", "live",
            "--base-url", f"http://127.0.0.1:{server.server_address[1]}",
            "--workers", "2", "--out", str(results),
        ) == 0
        capsys.readouterr()
        assert run_cli(
            "eval", "--root", str(fresh_corpus), "--split", "dev",
            "--results", str(results),
        ) == 0
        assert "EX 100.00% (20/20)" in capsys.readouterr().out
    finally:
        server.shutdown()
        server.server_close()
    assert Handler.calls >= 21  # 20 questions + 1 injected rate-limit


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_replay_without_transcript_exit_2(fresh_corpus, tmp_path, capsys):
    code = run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--method", "v1", "--backend", "replay", "--out", str(tmp_path / "r.jsonl"),
    )
    assert code == 2
    assert "transcript" in capsys.readouterr().err


def test_v2_without_index_exit_2(fresh_corpus, tmp_path, capsys):
    code = run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--method", "v2", "--backend", "mock", "--out", str(tmp_path / "r.jsonl"),
    )
    assert code == 2
    assert "--index" in capsys.readouterr().err


def test_bad_config_file_exit_2(fresh_corpus, tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"not_a_field": 1}), encoding="utf-8")
    code = run_cli(
        "run", "--root", str(fresh_corpus), "--split", "dev",
        "--backend", "mock", "--config", str(config),
        "--out", str(tmp_path / "r.jsonl"),
    )
    assert code == 2
    assert "not_a_field" in capsys.readouterr().err


def test_missing_root_exit_2(tmp_path, capsys):
    code = run_cli(
        "run", "--root", str(tmp_path / "ghost"), "--split", "dev",
        "--backend", "mock", "--out", str(tmp_path / "r.jsonl"),
    )
    assert code == 2


# ---------------------------------------------------------------------------
# ablate + report
# ---------------------------------------------------------------------------

def test_ablate_writes_table_and_sweep(indexed_corpus, tmp_path, capsys):
    corpus, index_path = indexed_corpus
    table_path = tmp_path / "ablation.txt"
    sweep_path = tmp_path / "sweep.csv"
    assert run_cli(
        "ablate", "--root", str(corpus), "--split", "dev",
        "--method", "v2", "--shots", "2", "--backend", "mock",
        "--index", str(index_path),
        "--sample", "6", "--sample-seed", "7",
        "--out-table", str(table_path), "--sweep-csv", str(sweep_path),
    ) == 0
    table = table_path.read_text(encoding="utf-8")
    assert "baseline" in table
    assert "w/o error correction" in table
    assert "w/o JSON output" in table
    assert "w/ non-diverse RAG" in table
    sweep_lines = sweep_path.read_text(encoding="utf-8").splitlines()
    assert sweep_lines[0] == "k,ex_percent"
    assert [line.split(",")[0] for line in sweep_lines[1:]] == [
        str(k) for k in range(1, 9)
    ]


def test_ablate_replayable_from_captured_transcript(indexed_corpus, tmp_path):
    corpus, index_path = indexed_corpus
    transcript = tmp_path / "capture.jsonl"
    outputs = {}
    for label, backend_args in (
        ("mock", ["--backend", "mock", "--transcript", str(transcript)]),
        ("replay", ["--backend", "replay", "--transcript", str(transcript)]),
    ):
        table = tmp_path / f"{label}.txt"
        sweep = tmp_path / f"{label}.csv"
        assert run_cli(
            "ablate", "--root", str(corpus), "--split", "dev",
            "--method", "v2", "--shots", "2", "--index", str(index_path),
            "--sample", "6", "--sample-seed", "7",
            "--out-table", str(table), "--sweep-csv", str(sweep),
            *backend_args,
        ) == 0
        outputs[label] = (table.read_bytes(), sweep.read_bytes())
    assert outputs["mock"] == outputs["replay"]


def test_report_spread_across_runs(fresh_corpus, tmp_path, capsys):
    report_paths = []
    for i in range(3):
        results = tmp_path / f"r{i}.jsonl"
        assert run_cli(
            "run", "--root", str(fresh_corpus), "--split", "dev",
            "--method", "v1", "--backend", "mock", "--seed", "7",
            "--sample", "6", "--sample-seed", "3", "--out", str(results),
        ) == 0
        report = tmp_path / f"report{i}.json"
        assert run_cli(
            "eval", "--root", str(fresh_corpus), "--split", "dev",
            "--results", str(results), "--report", str(report),
        ) == 0
        report_paths.append(report)
    capsys.readouterr()
    assert run_cli("report", *[str(p) for p in report_paths]) == 0
    out = capsys.readouterr().out
    assert "EX spread across 3 runs: 0.00%" in out
