"""The tuning session controller.

Owns one session end to end: baseline run, trace capture and analysis,
the tool-driven proposal loop, and the closing reflection that folds what
was learned into the global rule set.

The model only ever acts through three tools.  ``request_analysis`` asks
follow-up questions of the trace, ``run_configuration`` benchmarks a
proposal, ``end_tuning`` closes the session.  Proposal validation happens
before any benchmark runs, and rejected proposals do not consume budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .. import trace as trace_mod
from ..agent import ChatProvider, ToolDef, run_tool_loop
from ..core import (
    Attempt,
    Configuration,
    Origin,
    ParameterSpec,
    SystemFacts,
    TrialResult,
    TuningSession,
    validate_configuration,
    write_ledger,
)
from ..core import Choices, ExprBounds, StaticInt
from ..expr import print_expr, resolve_ranges
from ..resources import prompt_text
from ..runner import BackendError, ExecutionBackend, WorkloadSpec, run_trials
from .rules import RuleSet, reflect_and_summarize

DEFAULT_BUDGET = 5
DEFAULT_TRIALS = 8
DEFAULT_MAX_STEPS = 32
STOP_GUIDANCE = "further tuning would not elicit further performance gains"


class SessionError(RuntimeError):
    """A session aborted; carries the partially filled session for autopsy."""

    def __init__(self, message: str, session: TuningSession):
        super().__init__(message)
        self.session = session


class _BackendFailure(BaseException):
    """Pierces the tool loop's exception handling to abort the session.

    Derives from BaseException on purpose: the loop turns ordinary handler
    exceptions into tool-error messages and keeps going, but a dead backend
    means no further measurement is possible.
    """

    def __init__(self, cause: BackendError):
        super().__init__(str(cause))
        self.cause = cause


@dataclass
class SessionProviders:
    """Which model drives which role.  Analysis and reflection fall back
    to the tuning provider when unset."""

    tuning: ChatProvider
    analysis: Optional[ChatProvider] = None
    reflection: Optional[ChatProvider] = None

    def analysis_provider(self) -> ChatProvider:
        return self.analysis if self.analysis is not None else self.tuning

    def reflection_provider(self) -> ChatProvider:
        return self.reflection if self.reflection is not None else self.tuning


@dataclass
class TuningOutcome:
    session: TuningSession
    rules: RuleSet
    best_config: Configuration


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------


def _describe_range(spec: ParameterSpec, resolved: Mapping[str, tuple[int, int]]) -> str:
    r = spec.range
    if isinstance(r, Choices):
        rendered = ", ".join(str(v) for v in r.values)
        return f"allowed choices: {rendered}"
    if isinstance(r, StaticInt):
        suffix = f" step {r.step}" if r.step != 1 else ""
        return f"allowed range {r.min}..{r.max}{suffix}"
    assert isinstance(r, ExprBounds)
    lo, hi = resolved[spec.name]
    return (
        f"allowed range {lo}..{hi} "
        f"(bounds: {print_expr(r.min_expr)} .. {print_expr(r.max_expr)})"
    )


def _render_parameters(
    specs: list[ParameterSpec],
    facts: SystemFacts,
    include_descriptions: bool,
) -> str:
    resolved = resolve_ranges(specs, facts)
    lines = []
    for spec in specs:
        lines.append(f"- {spec.name}")
        if include_descriptions:
            lines.append(f"  description: {spec.description}")
            lines.append(f"  I/O impact: {spec.io_impact}")
        lines.append(f"  {_describe_range(spec, resolved)}")
    return "\n".join(lines)


def _render_facts(facts: SystemFacts) -> str:
    env = facts.as_env()
    return "\n".join(f"{name} = {_fmt_number(env[name])}" for name in sorted(env))


def _fmt_number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.6g}"


def _render_attempt(attempt: Attempt) -> str:
    label = attempt.configuration.origin.value
    values = json.dumps(attempt.configuration.values, sort_keys=True)
    result = attempt.result
    line = (
        f"Attempt {attempt.index} ({label}): values {values}; "
        f"mean {result.mean_s:.6g} s, ci90 +/-{result.ci90_halfwidth_s:.6g} s, "
        f"speedup {attempt.speedup_vs_default:.6g}x"
    )
    if attempt.configuration.rationale_per_param:
        rationale = json.dumps(attempt.configuration.rationale_per_param, sort_keys=True)
        line += f"; rationale {rationale}"
    return line


def build_tuning_prompt(
    specs: list[ParameterSpec],
    facts: SystemFacts,
    io_report: str,
    rule_set: RuleSet,
    session: TuningSession,
    *,
    include_descriptions: bool = True,
    include_report: bool = True,
) -> tuple[str, str]:
    """System and user prompt for the proposal loop.

    The rule section disappears entirely when the set is empty, so a
    rule-free session never sees an empty header to anchor on.  The two
    ``include_*`` flags exist for ablation studies and drop the parameter
    prose or the trace report while keeping everything else fixed.
    """
    parts = [
        "## Workload",
        f"name: {session.workload.name}",
        "",
        "## Tunable parameters",
        _render_parameters(specs, facts, include_descriptions),
        "",
        "## System facts",
        _render_facts(facts),
        "",
    ]
    if include_report:
        parts += ["## I/O report", io_report.strip() or "(empty)", ""]
    if not rule_set.is_empty:
        parts += ["## Global tuning rules", rule_set.render(), ""]
    parts.append("## Attempt history")
    for attempt in session.attempts:
        parts.append(_render_attempt(attempt))
    remaining = session.budget - session.proposed_count
    parts += [
        "",
        "## Attempt budget",
        f"Proposals used: {session.proposed_count} of {session.budget}. "
        f"{remaining} remaining.",
    ]
    return prompt_text("tuning_system"), "\n".join(parts)


# ---------------------------------------------------------------------------
# Session tools
# ---------------------------------------------------------------------------


def tuning_tool_defs() -> list[ToolDef]:
    return [
        ToolDef(
            name="request_analysis",
            description=(
                "Ask a follow-up question about the captured I/O trace. "
                "The analysis model answers using the trace query tools."
            ),
            parameters={
                "type": "object",
                "properties": {"question": {"type": "string"}},
                "required": ["question"],
            },
        ),
        ToolDef(
            name="run_configuration",
            description=(
                "Benchmark a configuration. 'values' maps parameter names to "
                "proposed values (omitted parameters keep their defaults); "
                "'rationale' maps every changed parameter to a short reason."
            ),
            parameters={
                "type": "object",
                "properties": {
                    "values": {"type": "object"},
                    "rationale": {"type": "object"},
                },
                "required": ["values", "rationale"],
            },
        ),
        ToolDef(
            name="end_tuning",
            description="Close the tuning session. Requires your reasoning.",
            parameters={
                "type": "object",
                "properties": {"reasoning": {"type": "string"}},
                "required": ["reasoning"],
            },
        ),
    ]


def _coerce_value(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            return value
    return value


@dataclass
class SessionController:
    """Holds the mutable state behind the three session tools."""

    workload: WorkloadSpec
    specs: list[ParameterSpec]
    facts: SystemFacts
    backend: ExecutionBackend
    session: TuningSession
    bundle: Optional[trace_mod.TraceBundle] = None
    analysis_model: Optional[ChatProvider] = None
    analysis_tool_budget: int = trace_mod.DEFAULT_TOOL_BUDGET
    trials: int = DEFAULT_TRIALS
    backend_failure: Optional[BackendError] = field(default=None, init=False)

    # -- request_analysis ---------------------------------------------------

    def tool_request_analysis(self, question: str) -> str:
        if self.session.ended:
            raise ValueError("session closed")
        if not str(question).strip():
            raise ValueError("question must be nonempty")
        if self.bundle is None or self.analysis_model is None:
            raise ValueError("no trace analysis is available in this session")
        answer = trace_mod.answer_followup(
            self.bundle, str(question), self.analysis_model, self.analysis_tool_budget
        )
        self.session.followups.append((str(question), answer))
        return answer

    # -- run_configuration --------------------------------------------------

    def tool_run_configuration(self, values: Mapping, rationale: Mapping) -> str:
        if self.session.ended:
            raise ValueError("session closed")
        if not isinstance(values, Mapping) or not values:
            raise ValueError("'values' must be a nonempty object")
        if not isinstance(rationale, Mapping):
            raise ValueError("'rationale' must be an object")
        if self.session.proposed_count >= self.session.budget:
            raise ValueError(
                f"proposal budget exhausted ({self.session.budget} of "
                f"{self.session.budget} used); call end_tuning to close the session"
            )

        defaults = self.backend.default_configuration()
        proposed = {str(k): _coerce_value(v) for k, v in values.items()}
        full = dict(defaults)
        full.update(proposed)

        changed = {k: v for k, v in proposed.items() if defaults.get(k) != v}
        reasons = {str(k): str(v) for k, v in rationale.items()}
        missing = [k for k in sorted(changed) if not reasons.get(k, "").strip()]
        if missing:
            raise ValueError(
                f"missing rationale for changed parameters: {', '.join(missing)}"
            )

        origin = Origin.AGENT_PROPOSED
        if any(reasons[k].lstrip().startswith("rule:") for k in changed):
            origin = Origin.RULE_SEEDED
        config = Configuration(
            values=full,
            origin=origin,
            rationale_per_param={k: reasons[k] for k in changed},
        )
        violations = validate_configuration(config, self.specs, self.facts)
        if violations:
            rendered = "; ".join(str(v) for v in violations)
            raise ValueError(f"invalid configuration: {rendered}")

        try:
            self.backend.apply_configuration(config)
            result = run_trials(self.backend, self.workload, self.trials)
        except BackendError as exc:
            self.backend_failure = exc
            raise _BackendFailure(exc)

        baseline = self.session.attempts[0].result.mean_s
        speedup = baseline / result.mean_s if result.mean_s > 0 else float("inf")
        attempt = Attempt(
            index=len(self.session.attempts),
            configuration=config,
            result=result,
            speedup_vs_default=speedup,
        )
        self.session.attempts.append(attempt)
        used = self.session.proposed_count
        return (
            f"measured mean {result.mean_s:.10g} s, "
            f"ci90 +/-{result.ci90_halfwidth_s:.6g} s, "
            f"speedup {speedup:.10g}x vs default "
            f"(attempt {used} of {self.session.budget})"
        )

    # -- end_tuning ---------------------------------------------------------

    def tool_end_tuning(self, reasoning: str) -> str:
        if self.session.ended:
            return "session already closed"
        if not str(reasoning).strip():
            raise ValueError(
                "end_tuning requires a nonempty justification; explain why "
                "further attempts are not worthwhile"
            )
        self.session.end_reason = str(reasoning).strip()
        return "session closed"

    # -- plumbing -----------------------------------------------------------

    def handlers(self) -> dict:
        return {
            "request_analysis": lambda a: self.tool_request_analysis(
                a.get("question", "")
            ),
            "run_configuration": lambda a: self.tool_run_configuration(
                a.get("values") or {}, a.get("rationale") or {}
            ),
            "end_tuning": lambda a: self.tool_end_tuning(a.get("reasoning", "")),
        }


# ---------------------------------------------------------------------------
# Whole-session orchestration
# ---------------------------------------------------------------------------


def run_tuning_session(
    workload: WorkloadSpec,
    specs: list[ParameterSpec],
    facts: SystemFacts,
    rule_set: RuleSet,
    providers: Union[SessionProviders, ChatProvider],
    backend: ExecutionBackend,
    *,
    budget: int = DEFAULT_BUDGET,
    trials: int = DEFAULT_TRIALS,
    ledger_path: Optional[str] = None,
    analysis_tool_budget: int = trace_mod.DEFAULT_TOOL_BUDGET,
    max_steps: int = DEFAULT_MAX_STEPS,
    tool_call_budget: Optional[int] = None,
    include_descriptions: bool = True,
    include_report: bool = True,
) -> TuningOutcome:
    """Run one complete tuning session and distill its rules.

    Order of events: benchmark the defaults, capture and analyze the trace,
    run the proposal loop until the model ends the session or runs out of
    budget, persist the ledger, then reflect and merge the learned rules.
    A backend failure mid-session aborts the loop, persists whatever
    attempts exist with a failure marker, and raises ``SessionError``.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if not isinstance(providers, SessionProviders):
        providers = SessionProviders(tuning=providers)

    session = TuningSession(workload=workload, budget=budget)

    def _persist() -> None:
        if ledger_path is not None:
            write_ledger(ledger_path, session)

    defaults = backend.default_configuration()
    default_config = Configuration(values=dict(defaults), origin=Origin.DEFAULT)
    try:
        backend.apply_configuration(default_config)
        baseline = run_trials(backend, workload, trials)
        session.attempts.append(
            Attempt(
                index=0,
                configuration=default_config,
                result=baseline,
                speedup_vs_default=1.0,
            )
        )
        raw_trace = backend.collect_trace(workload)
    except BackendError as exc:
        session.end_reason = f"backend failure: {exc}"
        _persist()
        raise SessionError(f"backend failed before tuning started: {exc}", session)

    bundle = trace_mod.load_trace(raw_trace)
    report = trace_mod.generate_io_report(
        bundle, providers.analysis_provider(), tool_budget=analysis_tool_budget
    )
    session.io_report = (
        report.text.strip()
        + "\n\n### Measured highlights\n"
        + trace_mod.render_highlights(report.highlights)
    )

    controller = SessionController(
        workload=workload,
        specs=specs,
        facts=facts,
        backend=backend,
        session=session,
        bundle=bundle,
        analysis_model=providers.analysis_provider(),
        analysis_tool_budget=analysis_tool_budget,
        trials=trials,
    )
    system_prompt, user_prompt = build_tuning_prompt(
        specs,
        facts,
        session.io_report,
        rule_set,
        session,
        include_descriptions=include_descriptions,
        include_report=include_report,
    )
    if tool_call_budget is None:
        tool_call_budget = 3 * max(budget, 1) + 8
    try:
        run_tool_loop(
            providers.tuning,
            system_prompt,
            user_prompt,
            tuning_tool_defs(),
            controller.handlers(),
            max_steps=max_steps,
            tool_call_budget=tool_call_budget,
            terminal_tool="end_tuning",
        )
    except _BackendFailure as failure:
        session.end_reason = f"backend failure: {failure.cause}"
        _persist()
        raise SessionError(f"backend failed mid-session: {failure.cause}", session)

    if not session.ended:
        session.end_reason = "loop ended without an explicit end_tuning call"
    _persist()

    updated_rules = reflect_and_summarize(
        session, rule_set, providers.reflection_provider()
    )
    best = session.best_attempt().configuration
    return TuningOutcome(session=session, rules=updated_rules, best_config=best)
