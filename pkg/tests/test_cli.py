"""Command-line behavior: exit codes, artifacts, and config precedence."""

import json

import pytest

from pfstuner import cli
from pfstuner.core import Configuration, read_ledger

from conftest import FIXTURES

MANUAL = FIXTURES / "manual"
RULES = FIXTURES / "rules"
TRACES = FIXTURES / "traces"
WORKLOADS = FIXTURES / "workloads"
REPLAY = FIXTURES / "replay" / "extraction"


# ---------------------------------------------------------------------------
# EngineConfig resolution
# ---------------------------------------------------------------------------


def test_config_defaults():
    cfg = cli.resolve_config(env={})
    assert cfg.budget == 5
    assert cfg.trials == 8
    assert cfg.chunk_tokens == 1024
    assert cfg.overlap_tokens == 20
    assert cfg.retrieval_k == 20


def test_config_precedence_file_then_flags_then_env(tmp_path):
    cfg_file = tmp_path / "engine.json"
    cfg_file.write_text(json.dumps({"budget": 3, "base_url": "http://from-file"}))

    cfg = cli.resolve_config(str(cfg_file), env={})
    assert cfg.budget == 3
    assert cfg.base_url == "http://from-file"

    cfg = cli.resolve_config(str(cfg_file), {"budget": 4}, env={})
    assert cfg.budget == 4  # flag beats file

    cfg = cli.resolve_config(
        str(cfg_file),
        {"budget": 4, "base_url": "http://from-flag"},
        env={"STELLAR_API_BASE": "http://from-env"},
    )
    assert cfg.base_url == "http://from-env"  # env beats flag
    assert cfg.budget == 4

    cfg = cli.resolve_config(None, {}, env={"STELLAR_MODEL": "m-env"})
    assert cfg.tuning_model == "m-env"


def test_config_rejects_unknown_keys(tmp_path):
    cfg_file = tmp_path / "engine.json"
    cfg_file.write_text(json.dumps({"bugdet": 3}))
    with pytest.raises(cli.UsageError, match="unknown config keys"):
        cli.resolve_config(str(cfg_file), env={})


def test_config_rejects_bad_values(tmp_path):
    cfg_file = tmp_path / "engine.json"
    cfg_file.write_text(json.dumps({"budget": "lots"}))
    with pytest.raises(cli.UsageError, match="bad value"):
        cli.resolve_config(str(cfg_file), env={})


def test_config_file_must_be_object(tmp_path):
    cfg_file = tmp_path / "engine.json"
    cfg_file.write_text("[1, 2]")
    with pytest.raises(cli.UsageError, match="JSON object"):
        cli.resolve_config(str(cfg_file), env={})


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def test_extract_fixture_manual(tmp_path, capsys):
    out = tmp_path / "specs.json"
    code = cli.main(
        [
            "--provider",
            "replay",
            "--replay-dir",
            str(REPLAY),
            "extract",
            str(MANUAL / "mini_manual.txt"),
            str(MANUAL / "candidates.txt"),
            "-o",
            str(out),
        ]
    )
    assert code == 0
    specs = json.loads(out.read_text())
    assert len(specs) == 6
    stdout = capsys.readouterr().out
    assert "candidates 10 -> writable 9 -> sufficient 8 -> final 6" in stdout


def test_extract_missing_file_is_usage_error(tmp_path, capsys):
    code = cli.main(
        ["extract", "no_such_manual.txt", "nope.txt", "-o", str(tmp_path / "x.json")]
    )
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_extract_empty_candidates(tmp_path, caplog):
    cands = tmp_path / "empty.txt"
    cands.write_text("# nothing here\n")
    out = tmp_path / "specs.json"
    code = cli.main(
        [
            "--provider",
            "heuristic",
            "extract",
            str(MANUAL / "mini_manual.txt"),
            str(cands),
            "-o",
            str(out),
        ]
    )
    assert code == 0
    assert json.loads(out.read_text()) == []
    assert any("empty candidate list" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def test_analyze_writes_report(tmp_path):
    out = tmp_path / "report.txt"
    code = cli.main(
        [
            "--provider",
            "heuristic",
            "analyze",
            str(TRACES / "metadata_heavy.darshan.txt"),
            "-o",
            str(out),
        ]
    )
    assert code == 0
    text = out.read_text()
    assert "Measured highlights:" in text
    assert "Workload classification:" in text


def test_analyze_schema_only_with_zero_tool_budget(tmp_path):
    out = tmp_path / "report.txt"
    code = cli.main(
        [
            "--provider",
            "heuristic",
            "analyze",
            str(TRACES / "large_seq.darshan.txt"),
            "-o",
            str(out),
            "--tool-budget",
            "0",
        ]
    )
    assert code == 0
    assert "Workload classification:" in out.read_text()


def test_analyze_malformed_trace_is_pipeline_error(tmp_path, capsys):
    bad = tmp_path / "bad.trace"
    bad.write_text("this is not a trace\n")
    code = cli.main(
        ["--provider", "heuristic", "analyze", str(bad), "-o", str(tmp_path / "r.txt")]
    )
    assert code == 2
    assert "unrecognized trace format" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------


def run_tune(tmp_path, workload="tiny", extra=(), capsys=None):
    ledger_dir = tmp_path / "ledgers"
    args = [
        "--provider",
        "heuristic",
        "tune",
        str(WORKLOADS / f"{workload}.json"),
        "--trials",
        "2",
        "--tool-budget",
        "0",
        "--ledger-dir",
        str(ledger_dir),
        *extra,
    ]
    return cli.main(args), ledger_dir


def test_tune_writes_ledger_best_and_rules(tmp_path, capsys):
    code, ledger_dir = run_tune(tmp_path, "metadata_heavy")
    assert code == 0

    attempts = read_ledger(str(ledger_dir / "metadata_heavy.jsonl"))
    assert attempts[0].index == 0
    proposed = [a for a in attempts if a.configuration.origin.value != "default"]
    assert 1 <= len(proposed) <= 5

    best = Configuration.from_dict(
        json.loads((ledger_dir / "metadata_heavy.best.json").read_text())
    )
    assert best.values  # a full configuration, not a diff

    rules = json.loads((ledger_dir / "rules.json").read_text())
    assert rules and all("Parameter" in r for r in rules)

    stdout = capsys.readouterr().out
    assert "best attempt" in stdout
    assert "end reason:" in stdout


def test_tune_budget_zero_runs_default_only(tmp_path, capsys):
    code, ledger_dir = run_tune(tmp_path, "tiny", extra=("--budget", "0"))
    assert code == 0
    attempts = read_ledger(str(ledger_dir / "tiny.jsonl"))
    assert len(attempts) == 1
    assert attempts[0].configuration.origin.value == "default"


def test_tune_rules_seed_and_update(tmp_path, capsys):
    code, first_dir = run_tune(tmp_path, "metadata_heavy")
    assert code == 0
    seeded_dir = tmp_path / "second"
    code = cli.main(
        [
            "--provider",
            "heuristic",
            "tune",
            str(WORKLOADS / "metadata_heavy.json"),
            "--trials",
            "2",
            "--tool-budget",
            "0",
            "--ledger-dir",
            str(seeded_dir),
            "--rules",
            str(first_dir / "rules.json"),
            "--rules-out",
            str(seeded_dir / "rules.json"),
        ]
    )
    assert code == 0
    attempts = read_ledger(str(seeded_dir / "metadata_heavy.jsonl"))
    assert attempts[1].configuration.origin.value == "rule_seeded"


def test_tune_shell_backend_without_config_is_usage_error(tmp_path, capsys):
    code = cli.main(
        [
            "--provider",
            "heuristic",
            "tune",
            str(WORKLOADS / "tiny.json"),
            "--backend",
            "shell",
            "--ledger-dir",
            str(tmp_path),
        ]
    )
    assert code == 1
    assert "backend" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------


def test_rules_show(capsys):
    code = cli.main(["rules", "show", str(RULES / "near_dup_old.json")])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "1 rules" in stdout
    assert "Parameter: stripe_size" in stdout


def test_rules_show_empty_file(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    code = cli.main(["rules", "show", str(empty)])
    assert code == 0
    assert capsys.readouterr().out.strip() == "0 rules"


def test_rules_merge_identical_files_is_unchanged(tmp_path, capsys, monkeypatch):
    # no provider settings anywhere: the trivial merge must not need them
    monkeypatch.delenv("STELLAR_API_BASE", raising=False)
    out = tmp_path / "merged.json"
    code = cli.main(
        [
            "rules",
            "merge",
            str(RULES / "near_dup_old.json"),
            str(RULES / "near_dup_old.json"),
            "-o",
            str(out),
        ]
    )
    assert code == 0
    assert json.loads(out.read_text()) == json.loads(
        (RULES / "near_dup_old.json").read_text()
    )


def test_rules_merge_contradiction_removes_both_with_reasons(tmp_path, capsys):
    out = tmp_path / "merged.json"
    code = cli.main(
        [
            "--provider",
            "heuristic",
            "rules",
            "merge",
            str(RULES / "contradiction_old.json"),
            str(RULES / "contradiction_delta.json"),
            "-o",
            str(out),
        ]
    )
    assert code == 0
    assert json.loads(out.read_text()) == []
    stdout = capsys.readouterr().out
    assert stdout.count("removed max_rpcs_in_flight") == 2
    assert "contradicts" in stdout


def test_rules_without_subcommand_is_usage_error(capsys):
    code = cli.main(["rules"])
    assert code == 1


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_single_ledger_row_per_attempt(tmp_path, capsys):
    code, ledger_dir = run_tune(tmp_path, "metadata_heavy")
    assert code == 0
    capsys.readouterr()
    ledger = ledger_dir / "metadata_heavy.jsonl"
    attempts = read_ledger(str(ledger))

    code = cli.main(["report", str(ledger)])
    assert code == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln]
    assert lines[0] == "workload,iteration,speedup,ci"
    assert len(lines) == len(attempts) + 1
    assert lines[1].startswith("metadata_heavy,0,1.0,")


def test_report_two_ledgers_paired_columns(tmp_path, capsys):
    code, dir_a = run_tune(tmp_path / "a", "tiny")
    assert code == 0
    code, dir_b = run_tune(tmp_path / "b", "tiny", extra=("--budget", "0"))
    assert code == 0
    capsys.readouterr()

    out = tmp_path / "paired.csv"
    code = cli.main(
        [
            "report",
            str(dir_a / "tiny.jsonl"),
            str(dir_b / "tiny.jsonl"),
            "-o",
            str(out),
        ]
    )
    assert code == 0
    lines = out.read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "iteration"
    assert len(header) == 5  # iteration + two (speedup, ci) pairs
    assert header[1].startswith("speedup_") and header[2].startswith("ci_")
    # the shorter ledger pads with empty cells
    assert lines[-1].endswith(",,") or all(c for c in lines[-1].split(","))


def test_report_empty_dir_gives_header_only(tmp_path, capsys):
    empty = tmp_path / "ledgers"
    empty.mkdir()
    code = cli.main(["report", str(empty)])
    assert code == 0
    assert capsys.readouterr().out.strip() == "workload,iteration,speedup,ci"


def test_report_missing_ledger_is_usage_error(capsys):
    code = cli.main(["report", "no_such_ledger.jsonl"])
    assert code == 1


# ---------------------------------------------------------------------------
# top-level parsing
# ---------------------------------------------------------------------------


def test_unknown_flag_is_usage_error(capsys):
    code = cli.main(["--bogus", "report", "x"])
    assert code == 1


def test_missing_subcommand_is_usage_error(capsys):
    code = cli.main([])
    assert code == 1
    assert "subcommand" in capsys.readouterr().err
