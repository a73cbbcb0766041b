"""Tuning sessions, global rule sets, and the offline policy."""

from .controller import (
    DEFAULT_BUDGET,
    DEFAULT_TRIALS,
    STOP_GUIDANCE,
    SessionController,
    SessionError,
    SessionProviders,
    TuningOutcome,
    build_tuning_prompt,
    run_tuning_session,
    tuning_tool_defs,
)
from .heuristic import HeuristicPolicyProvider, merge_records
from .rules import (
    RULE_FILE_KEYS,
    MergeAuditError,
    Rule,
    RuleError,
    RuleSet,
    RuleStatus,
    merge_rule_sets,
    reflect_and_summarize,
    session_reference,
)

__all__ = [
    "DEFAULT_BUDGET",
    "DEFAULT_TRIALS",
    "STOP_GUIDANCE",
    "SessionController",
    "SessionError",
    "SessionProviders",
    "TuningOutcome",
    "build_tuning_prompt",
    "run_tuning_session",
    "tuning_tool_defs",
    "HeuristicPolicyProvider",
    "merge_records",
    "RULE_FILE_KEYS",
    "MergeAuditError",
    "Rule",
    "RuleError",
    "RuleSet",
    "RuleStatus",
    "merge_rule_sets",
    "reflect_and_summarize",
    "session_reference",
]
