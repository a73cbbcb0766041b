"""Command-line front end binding the pipeline stages together.

Subcommands map one-to-one onto the pipeline: ``extract`` builds a
parameter spec set from a manual, ``analyze`` turns a trace into an I/O
report, ``tune`` runs a tuning session against a backend, ``rules``
inspects or merges rule sets, and ``report`` flattens session ledgers
into CSV for plotting.

Exit codes: 0 on success, 1 for usage problems (bad flags, missing
files, unusable configuration), 2 when a pipeline stage fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .agent import HttpChatProvider, ProviderError, ReplayProvider
from .core import CoreError, read_ledger, specs_from_json, specs_to_json, SystemFacts
from .manual_index import ExtractionError, extract_pipeline, parse_candidates
from .runner import (
    BackendError,
    ShellBackend,
    SimBackend,
    default_facts,
    load_sim_model,
    load_workload,
)
from .resources import data_path
from .trace import (
    DEFAULT_TOOL_BUDGET,
    TraceError,
    generate_io_report,
    load_trace,
    render_highlights,
)
from .tuning import (
    HeuristicPolicyProvider,
    RuleError,
    RuleSet,
    SessionError,
    SessionProviders,
    merge_rule_sets,
    run_tuning_session,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2

log = logging.getLogger(__name__)


class UsageError(Exception):
    """A problem the user can fix by changing arguments or files."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class EngineConfig:
    """Engine defaults; resolution order is defaults, then config file,
    then flags, then environment (later wins)."""

    base_url: str = ""
    tuning_model: str = ""
    analysis_model: str = ""  # empty: use tuning_model
    embedding_model: str = ""  # empty: local hashed embeddings
    chunk_tokens: int = 1024
    overlap_tokens: int = 20
    retrieval_k: int = 20
    budget: int = 5
    trials: int = 8
    specs_path: str = ""
    rules_path: str = ""
    ledger_dir: str = "."
    backend_config: str = ""


_ENV_OVERRIDES = {
    "STELLAR_API_BASE": "base_url",
    "STELLAR_MODEL": "tuning_model",
}


def resolve_config(
    config_file: Optional[str] = None,
    flag_values: Optional[dict] = None,
    env: Optional[dict] = None,
) -> EngineConfig:
    env = dict(os.environ) if env is None else env
    cfg = EngineConfig()
    fields = {f.name: f.type for f in dataclasses.fields(EngineConfig)}

    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise UsageError(f"config file not found: {config_file}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(raw) - set(fields))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        for key, value in raw.items():
            current = getattr(cfg, key)
            try:
                setattr(cfg, key, type(current)(value))
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r} has a bad value: {value!r}")

    for key, value in (flag_values or {}).items():
        if value is not None:
            setattr(cfg, key, value)

    for var, field_name in _ENV_OVERRIDES.items():
        if env.get(var):
            setattr(cfg, field_name, env[var])
    return cfg


def _config_flags(args: argparse.Namespace) -> dict:
    """Flag values that shadow EngineConfig fields, None when unset."""
    return {
        "base_url": args.base_url,
        "tuning_model": args.model,
        "analysis_model": args.analysis_model,
        "chunk_tokens": args.chunk_tokens,
        "overlap_tokens": args.overlap_tokens,
        "retrieval_k": args.k,
        "budget": getattr(args, "budget", None),
        "trials": getattr(args, "trials", None),
        "specs_path": getattr(args, "specs", None),
        "rules_path": getattr(args, "rules", None),
        "ledger_dir": getattr(args, "ledger_dir", None),
        "backend_config": getattr(args, "backend_config", None),
    }


# ---------------------------------------------------------------------------
# Shared construction helpers
# ---------------------------------------------------------------------------


def _require_file(value: Optional[str], what: str) -> Path:
    if not value:
        raise UsageError(f"{what} is required")
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{what} not found: {value}")
    return path


class _LazyProvider:
    """Defers provider construction until the first completion request, so
    commands that may never call the model work without provider settings."""

    def __init__(self, factory):
        self._factory = factory
        self._inner = None

    def complete(self, messages, tools=()):
        if self._inner is None:
            self._inner = self._factory()
        return self._inner.complete(messages, tools)


def _build_provider(args: argparse.Namespace, cfg: EngineConfig, *, analysis=False):
    kind = args.provider
    if kind == "heuristic":
        return HeuristicPolicyProvider()
    if kind == "replay":
        if not args.replay_dir:
            raise UsageError("--provider replay needs --replay-dir")
        replay_dir = Path(args.replay_dir)
        if not replay_dir.is_dir():
            raise UsageError(f"replay directory not found: {args.replay_dir}")
        return ReplayProvider(replay_dir)
    model_name = (cfg.analysis_model if analysis else "") or cfg.tuning_model
    try:
        return HttpChatProvider(
            base_url=cfg.base_url or None,
            model=model_name or None,
        )
    except ProviderError as exc:
        raise UsageError(str(exc))


def _load_facts(args: argparse.Namespace) -> SystemFacts:
    if getattr(args, "facts", None):
        path = _require_file(args.facts, "facts file")
        return SystemFacts.from_dict(json.loads(path.read_text(encoding="utf-8")))
    return default_facts()


def _build_backend(args: argparse.Namespace, cfg: EngineConfig, facts: SystemFacts):
    if args.backend == "sim":
        model = load_sim_model()
        if args.noise:
            model = model.with_noise(args.noise, args.seed)
        return SimBackend(model=model, facts=facts)
    path = cfg.backend_config
    if not path:
        raise UsageError("the shell backend needs --backend-config")
    _require_file(path, "backend config")
    try:
        return ShellBackend.from_config_file(path)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad backend config: {exc}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_extract(args: argparse.Namespace, cfg: EngineConfig) -> int:
    manual = _require_file(args.manual, "manual file")
    cand_file = _require_file(args.candidates, "candidate list")
    model = _build_provider(args, cfg)

    candidates = parse_candidates(cand_file.read_text(encoding="utf-8"))
    result = extract_pipeline(
        manual.read_text(encoding="utf-8"),
        candidates,
        model,
        chunk_tokens=cfg.chunk_tokens,
        overlap_tokens=cfg.overlap_tokens,
        k=cfg.retrieval_k,
    )

    Path(args.out).write_text(specs_to_json(result.specs) + "\n", encoding="utf-8")
    counts = result.stage_counts()
    print(
        "candidates {candidates} -> writable {writable} -> sufficient "
        "{sufficient} -> final {final}".format(**counts)
    )
    for name in result.skipped_readonly:
        print(f"  skipped read-only: {name}")
    for name in result.insufficient:
        print(f"  manual insufficient: {name}")
    for name, why in result.filtered.items():
        print(f"  filtered out {name}: {why}")
    print(f"wrote {len(result.specs)} parameter specs to {args.out}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, cfg: EngineConfig) -> int:
    trace_file = _require_file(args.trace, "trace file")
    model = _build_provider(args, cfg, analysis=True)

    bundle = load_trace(trace_file.read_bytes())
    report = generate_io_report(bundle, model, tool_budget=args.tool_budget)
    text = report.text.strip() + "\n\n" + render_highlights(report.highlights) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote I/O report to {args.out}")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace, cfg: EngineConfig) -> int:
    workload = load_workload(_require_file(args.workload, "workload file"))
    specs_path = cfg.specs_path or data_path("sim_parameters.json")
    specs = specs_from_json(
        _require_file(specs_path, "spec set").read_text(encoding="utf-8")
    )
    if cfg.rules_path:
        rule_set = RuleSet.load(str(_require_file(cfg.rules_path, "rule set")))
    else:
        rule_set = RuleSet()

    facts = _load_facts(args)
    backend = _build_backend(args, cfg, facts)
    providers = SessionProviders(
        tuning=_build_provider(args, cfg),
        analysis=_build_provider(args, cfg, analysis=True),
    )

    ledger_dir = Path(cfg.ledger_dir)
    ledger_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = ledger_dir / f"{workload.name}.jsonl"

    try:
        outcome = run_tuning_session(
            workload,
            specs,
            facts,
            rule_set,
            providers,
            backend,
            budget=cfg.budget,
            trials=cfg.trials,
            ledger_path=str(ledger_path),
            analysis_tool_budget=args.tool_budget,
        )
    except SessionError as exc:
        # the partial ledger is already on disk
        print(f"session aborted: {exc}", file=sys.stderr)
        print(f"partial ledger: {ledger_path}", file=sys.stderr)
        return EXIT_PIPELINE

    session = outcome.session
    print(f"{'attempt':>7}  {'origin':<14} {'mean_s':>12} {'ci90_s':>10} {'speedup':>9}")
    for a in session.attempts:
        print(
            f"{a.index:>7}  {a.configuration.origin.value:<14} "
            f"{a.result.mean_s:>12.6g} {a.result.ci90_halfwidth_s:>10.3g} "
            f"{a.speedup_vs_default:>9.4g}"
        )
    best = session.best_attempt()
    print(f"best attempt {best.index}: speedup {best.speedup_vs_default:.6g}x")
    print(f"end reason: {session.end_reason}")

    best_out = args.best_out or str(ledger_dir / f"{workload.name}.best.json")
    Path(best_out).write_text(
        json.dumps(outcome.best_config.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    rules_out = args.rules_out or cfg.rules_path or str(ledger_dir / "rules.json")
    outcome.rules.save(rules_out)
    print(f"ledger: {ledger_path}")
    print(f"best configuration: {best_out}")
    print(f"rule set ({len(outcome.rules)} rules): {rules_out}")
    return EXIT_OK


def cmd_rules(args: argparse.Namespace, cfg: EngineConfig) -> int:
    if args.rules_cmd == "show":
        rule_set = RuleSet.load(str(_require_file(args.file, "rule file")))
        if rule_set.is_empty:
            print("0 rules")
        else:
            print(f"{len(rule_set)} rules")
            print(rule_set.render())
        return EXIT_OK

    old = RuleSet.load(str(_require_file(args.old, "existing rule file")))
    delta = RuleSet.load(str(_require_file(args.new, "new rule file")))
    # trivial merges (identical or disjoint-by-identity inputs) never consult
    # the model, so don't demand provider settings up front
    model = _LazyProvider(lambda: _build_provider(args, cfg))
    removal_log: list[dict] = []
    merged = merge_rule_sets(old, delta, model, removal_log=removal_log)
    merged.save(args.out)
    print(f"merged {len(old)} existing + {len(delta)} new -> {len(merged)} rules")
    for entry in removal_log:
        parameter = entry.get("Parameter", "?")
        if isinstance(parameter, list):
            parameter = ", ".join(str(p) for p in parameter)
        description = str(entry.get("Rule Description", ""))
        if len(description) > 60:
            description = description[:57] + "..."
        print(f"  removed {parameter} ({description!r}): {entry.get('reason', '')}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _ledger_paths(arguments: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for arg in arguments:
        p = Path(arg)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.jsonl")))
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"ledger not found: {arg}")
    return paths


def _report_rows(paths: list[Path]) -> tuple[list[str], list[list]]:
    if len(paths) <= 1:
        header = ["workload", "iteration", "speedup", "ci"]
        rows = []
        for p in paths:
            for attempt in read_ledger(str(p)):
                rows.append(
                    [
                        p.stem,
                        attempt.index,
                        attempt.speedup_vs_default,
                        attempt.result.ci90_halfwidth_s,
                    ]
                )
        return header, rows

    # several ledgers: paired speedup/ci columns, aligned on iteration
    labels = []
    for p in paths:
        label = p.stem
        while label in labels:
            label += "_2"
        labels.append(label)
    ledgers = [read_ledger(str(p)) for p in paths]
    header = ["iteration"]
    for label in labels:
        header += [f"speedup_{label}", f"ci_{label}"]
    rows = []
    for i in range(max(len(att) for att in ledgers)):
        row: list = [i]
        for attempts in ledgers:
            if i < len(attempts):
                row += [attempts[i].speedup_vs_default, attempts[i].result.ci90_halfwidth_s]
            else:
                row += ["", ""]
        rows.append(row)
    return header, rows


def cmd_report(args: argparse.Namespace, cfg: EngineConfig) -> int:
    paths = _ledger_paths(args.ledgers)
    header, rows = _report_rows(paths)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the usage exit code here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfstuner", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="JSON file of engine defaults")
    parser.add_argument(
        "--provider",
        choices=("http", "heuristic", "replay"),
        default="http",
        help="chat model driver (default: http, via STELLAR_* variables)",
    )
    parser.add_argument("--replay-dir", help="fixture directory for --provider replay")
    parser.add_argument("--base-url", help="chat completions base URL")
    parser.add_argument("--model", help="tuning model name")
    parser.add_argument("--analysis-model", help="trace analysis model name")
    parser.add_argument("--chunk-tokens", type=int, help="manual chunk size in tokens")
    parser.add_argument("--overlap-tokens", type=int, help="chunk overlap in tokens")
    parser.add_argument("--k", type=int, help="retrieved chunks per query")

    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("extract", help="build a parameter spec set from a manual")
    p.add_argument("manual", help="manual text file")
    p.add_argument("candidates", help="candidate list: one '<path> <rw|ro>' per line")
    p.add_argument("-o", "--out", required=True, help="output spec JSON file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("analyze", help="summarize an I/O trace into a report")
    p.add_argument("trace", help="trace dump (text or CSV)")
    p.add_argument("-o", "--out", required=True, help="output report file")
    p.add_argument(
        "--tool-budget",
        type=int,
        default=DEFAULT_TOOL_BUDGET,
        help="table queries the model may run; 0 = schema-only report",
    )
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("tune", help="run one tuning session against a backend")
    p.add_argument("workload", help="workload definition JSON file")
    p.add_argument("--specs", help="parameter spec JSON (default: packaged sim set)")
    p.add_argument("--rules", help="rule set file to seed from and update")
    p.add_argument("--rules-out", help="write the updated rule set here instead")
    p.add_argument("--best-out", help="write the best configuration here")
    p.add_argument("--backend", choices=("sim", "shell"), default="sim")
    p.add_argument("--backend-config", help="shell backend config JSON")
    p.add_argument("--facts", help="system facts JSON (default: packaged sim facts)")
    p.add_argument("--budget", type=int, help="proposal budget (default 5)")
    p.add_argument("--trials", type=int, help="trials per configuration (default 8)")
    p.add_argument("--ledger-dir", help="directory for ledgers and artifacts")
    p.add_argument("--noise", type=float, default=0.0, help="sim noise sigma")
    p.add_argument("--seed", type=int, default=None, help="sim noise seed")
    p.add_argument(
        "--tool-budget",
        type=int,
        default=DEFAULT_TOOL_BUDGET,
        help="table queries for trace analysis; 0 disables them",
    )
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("rules", help="inspect or merge rule sets")
    rules_sub = p.add_subparsers(dest="rules_cmd", parser_class=_Parser)
    show = rules_sub.add_parser("show", help="print a rule set")
    show.add_argument("file")
    show.set_defaults(func=cmd_rules, rules_cmd="show")
    merge = rules_sub.add_parser("merge", help="merge new rules into an existing set")
    merge.add_argument("old", help="existing rule set file")
    merge.add_argument("new", help="rule set file to fold in")
    merge.add_argument("-o", "--out", required=True, help="output rule set file")
    merge.set_defaults(func=cmd_rules, rules_cmd="merge")
    p.set_defaults(rules_cmd=None)

    p = sub.add_parser("report", help="flatten ledgers into plot-ready CSV")
    p.add_argument("ledgers", nargs="+", help="ledger files or directories")
    p.add_argument("-o", "--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_report)

    return parser


PIPELINE_ERRORS = (
    BackendError,
    CoreError,
    ExtractionError,
    ProviderError,
    RuleError,
    SessionError,
    TraceError,
    OSError,
    ValueError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required", file=sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args.config, _config_flags(args))
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
