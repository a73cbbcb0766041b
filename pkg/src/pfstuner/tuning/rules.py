"""Global tuning rules: the persistent knowledge distilled from sessions.

A rule names one parameter, says what to do with it, and scopes that advice
to a workload context.  Rule sets live in JSON files whose record keys are
fixed ("Parameter", "Rule Description", "Tuning Context") so files written
by one build stay readable by the next.

The two model-facing operations here are reflection (turn a finished
session into a delta of new rules) and merging (fold a delta into the
existing set).  Both delegate judgement to the model but audit its output
deterministically: a merge may not invent rules, may not drop rules
silently, and must leave the active set free of same-parameter,
same-context duplicates.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Union

from ..agent import ChatProvider, Message, assistant, system, user
from ..core import TuningSession
from ..resources import prompt_text

RULE_FILE_KEYS = ("Parameter", "Rule Description", "Tuning Context")

MAX_REFLECT_ATTEMPTS = 3
MAX_MERGE_ATTEMPTS = 3


class RuleError(Exception):
    """Raised for malformed rules, bad rule files, or failed reflection."""

    def __init__(self, message: str, raw_output: Optional[str] = None):
        super().__init__(message)
        self.raw_output = raw_output


class MergeAuditError(RuleError):
    """The model's merge violated the deterministic audit."""


class RuleStatus(str, Enum):
    ACTIVE = "active"
    ALTERNATIVE = "alternative"


@dataclass(frozen=True)
class Rule:
    """One piece of transferable tuning advice."""

    parameter: Union[str, tuple[str, ...]]
    rule_description: str
    tuning_context: str
    status: RuleStatus = RuleStatus.ACTIVE
    alternative_group: Optional[int] = None

    def __post_init__(self) -> None:
        if isinstance(self.parameter, list):
            object.__setattr__(self, "parameter", tuple(self.parameter))
        if isinstance(self.status, str):
            object.__setattr__(self, "status", RuleStatus(self.status))
        for label, value in (
            ("parameter", self.parameter_text()),
            ("rule description", self.rule_description),
            ("tuning context", self.tuning_context),
        ):
            if not str(value).strip():
                raise RuleError(f"rule {label} must be nonempty")
        if self.status is RuleStatus.ALTERNATIVE and self.alternative_group is None:
            raise RuleError(
                f"alternative rule for {self.parameter_text()!r} has no group"
            )

    def parameter_text(self) -> str:
        if isinstance(self.parameter, tuple):
            return ", ".join(self.parameter)
        return self.parameter

    def identity(self) -> tuple[str, str, str]:
        """Content triple; status and group are bookkeeping, not identity."""
        return (self.parameter_text(), self.rule_description, self.tuning_context)

    def scope_key(self) -> tuple[str, str]:
        return (self.parameter_text(), self.tuning_context)

    def to_record(self) -> dict:
        parameter: Union[str, list[str]]
        if isinstance(self.parameter, tuple):
            parameter = list(self.parameter)
        else:
            parameter = self.parameter
        return {
            "Parameter": parameter,
            "Rule Description": self.rule_description,
            "Tuning Context": self.tuning_context,
            "status": self.status.value,
            "group": self.alternative_group,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Rule":
        if not isinstance(record, dict):
            raise RuleError(f"rule record must be an object, got {type(record).__name__}")
        missing = [k for k in RULE_FILE_KEYS if k not in record]
        if missing:
            raise RuleError(f"rule record missing keys: {missing}")
        parameter = record["Parameter"]
        if isinstance(parameter, list):
            parameter = tuple(str(p) for p in parameter)
        else:
            parameter = str(parameter)
        group = record.get("group")
        return cls(
            parameter=parameter,
            rule_description=str(record["Rule Description"]),
            tuning_context=str(record["Tuning Context"]),
            status=RuleStatus(record.get("status", "active")),
            alternative_group=None if group is None else int(group),
        )


@dataclass
class RuleSet:
    """An ordered collection of rules plus the sessions that produced them."""

    rules: list[Rule] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: dict[tuple[str, str], Rule] = {}
        for rule in self.rules:
            if rule.status is not RuleStatus.ACTIVE:
                continue
            prior = seen.get(rule.scope_key())
            if prior is not None:
                raise RuleError(
                    "two active rules share parameter "
                    f"{rule.parameter_text()!r} and context {rule.tuning_context!r}"
                )
            seen[rule.scope_key()] = rule
        groups: dict[int, int] = {}
        for rule in self.rules:
            if rule.status is RuleStatus.ALTERNATIVE:
                groups[rule.alternative_group] = groups.get(rule.alternative_group, 0) + 1
        for group, count in groups.items():
            if count < 2:
                raise RuleError(f"alternative group {group} has a single member")

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def is_empty(self) -> bool:
        return not self.rules

    def active(self) -> list[Rule]:
        return [r for r in self.rules if r.status is RuleStatus.ACTIVE]

    def identities(self) -> set[tuple[str, str, str]]:
        return {r.identity() for r in self.rules}

    def render(self) -> str:
        """Prompt-facing listing; one numbered block per rule."""
        lines: list[str] = []
        for i, rule in enumerate(self.rules, 1):
            lines.append(f"{i}. Parameter: {rule.parameter_text()}")
            lines.append(f"   Context: {rule.tuning_context}")
            lines.append(f"   Rule: {rule.rule_description}")
            if rule.status is RuleStatus.ALTERNATIVE:
                lines.append(
                    f"   (one of several alternatives, group {rule.alternative_group})"
                )
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [r.to_record() for r in self.rules]

    @classmethod
    def from_records(
        cls, records: Sequence[dict], provenance: Sequence[str] = ()
    ) -> "RuleSet":
        if not isinstance(records, (list, tuple)):
            raise RuleError("rule file must contain a JSON array")
        return cls(
            rules=[Rule.from_record(r) for r in records],
            provenance=list(provenance),
        )

    def save(self, path: str) -> None:
        """Replace-on-write so readers never see a half-written file."""
        payload = json.dumps(self.to_records(), indent=2) + "\n"
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "RuleSet":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                records = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RuleError(f"rule file {path!r} is not valid JSON: {exc}") from exc
        return cls.from_records(records)


# ---------------------------------------------------------------------------
# Reflection: session -> rule delta
# ---------------------------------------------------------------------------


def session_reference(session: TuningSession) -> str:
    if session.transcript_ref:
        return session.transcript_ref
    name = getattr(session.workload, "name", "unnamed")
    return f"session:{name}"


def _attempt_summary_lines(session: TuningSession) -> list[str]:
    lines = []
    for attempt in session.attempts:
        lines.append(
            json.dumps(
                {
                    "index": attempt.index,
                    "origin": attempt.configuration.origin.value,
                    "values": attempt.configuration.values,
                    "rationale": attempt.configuration.rationale_per_param,
                    "mean_s": attempt.result.mean_s,
                    "ci90_halfwidth_s": attempt.result.ci90_halfwidth_s,
                    "speedup": attempt.speedup_vs_default,
                },
                sort_keys=True,
            )
        )
    return lines


def _reflect_user_prompt(session: TuningSession) -> str:
    parts = [
        "The tuning session below has finished. Distill what transfers to",
        "future sessions into rules.",
        "",
        "## I/O report",
        session.io_report or "(no report)",
        "",
        "## Attempts (one JSON object per line)",
        *_attempt_summary_lines(session),
        "",
    ]
    if session.followups:
        parts.append("## Follow-up questions")
        for question, answer in session.followups:
            parts.append(f"Q: {question}")
            parts.append(f"A: {answer}")
        parts.append("")
    parts.append(f"## End reason\n{session.end_reason or '(none recorded)'}")
    return "\n".join(parts)


def _parse_delta_records(text: str) -> list[Rule]:
    body = text.strip()
    if body.startswith("```"):
        body = body.split("\n", 1)[1] if "\n" in body else ""
        if body.rstrip().endswith("```"):
            body = body.rstrip()[:-3]
    try:
        records = json.loads(body)
    except json.JSONDecodeError as exc:
        raise RuleError(f"reply is not valid JSON: {exc}")
    if not isinstance(records, list):
        raise RuleError("reply must be a JSON array")
    rules = []
    for i, record in enumerate(records):
        if not isinstance(record, dict):
            raise RuleError(f"element {i} is not an object")
        extra = set(record) - set(RULE_FILE_KEYS)
        if extra:
            raise RuleError(
                f"element {i} has unexpected keys {sorted(extra)}; "
                f"allowed keys are exactly {list(RULE_FILE_KEYS)}"
            )
        rules.append(Rule.from_record(record))
    return rules


def reflect_and_summarize(
    session: TuningSession,
    existing: RuleSet,
    model: ChatProvider,
) -> RuleSet:
    """Distill the finished session into rules and merge them into ``existing``.

    The model must answer with a bare JSON array whose elements carry
    exactly the rule file keys.  Malformed replies are re-prompted up to
    three attempts total; persistent failure raises ``RuleError`` carrying
    the last raw reply.  A session with no tuned attempts contributes an
    empty delta and leaves the rule set unchanged.
    """
    if session.proposed_count == 0:
        return replace(existing, rules=list(existing.rules), provenance=list(existing.provenance))

    messages: list[Message] = [
        system(prompt_text("reflect_system")),
        user(_reflect_user_prompt(session)),
    ]
    last_raw = ""
    delta_rules: Optional[list[Rule]] = None
    for _ in range(MAX_REFLECT_ATTEMPTS):
        reply = model.complete(messages, ())
        last_raw = reply.content
        messages.append(assistant(reply.content))
        try:
            delta_rules = _parse_delta_records(reply.content)
            break
        except RuleError as exc:
            messages.append(
                user(
                    f"That reply was rejected: {exc}. Answer again with only a "
                    "JSON array of objects whose keys are exactly "
                    '"Parameter", "Rule Description", and "Tuning Context".'
                )
            )
    if delta_rules is None:
        raise RuleError(
            f"reflection failed after {MAX_REFLECT_ATTEMPTS} attempts",
            raw_output=last_raw,
        )
    delta = RuleSet(rules=delta_rules, provenance=[session_reference(session)])
    return merge_rule_sets(existing, delta, model)


# ---------------------------------------------------------------------------
# Merging: old + delta -> new
# ---------------------------------------------------------------------------


def _merged_provenance(old: RuleSet, delta: RuleSet) -> list[str]:
    out: list[str] = []
    for ref in [*old.provenance, *delta.provenance]:
        if ref not in out:
            out.append(ref)
    return out


def _merge_user_prompt(old: RuleSet, delta: RuleSet) -> str:
    return "\n".join(
        [
            "Merge the new rules into the existing set.",
            "",
            "## Existing rules",
            json.dumps(old.to_records(), indent=2),
            "",
            "## New rules",
            json.dumps(delta.to_records(), indent=2),
        ]
    )


def _parse_merge_reply(text: str) -> tuple[list[Rule], list[dict]]:
    body = text.strip()
    if body.startswith("```"):
        body = body.split("\n", 1)[1] if "\n" in body else ""
        if body.rstrip().endswith("```"):
            body = body.rstrip()[:-3]
    try:
        payload = json.loads(body)
    except json.JSONDecodeError as exc:
        raise RuleError(f"reply is not valid JSON: {exc}")
    if not isinstance(payload, dict) or "rules" not in payload:
        raise RuleError('reply must be an object with a "rules" array')
    rules = [Rule.from_record(r) for r in payload["rules"]]
    removed = payload.get("removed", [])
    if not isinstance(removed, list):
        raise RuleError('"removed" must be an array')
    return rules, removed


def _audit_merge(
    old: RuleSet,
    delta: RuleSet,
    merged_rules: list[Rule],
    removed: list[dict],
) -> RuleSet:
    """Deterministic checks on the model's merge; raises MergeAuditError."""
    allowed = old.identities() | delta.identities()
    merged_ids = set()
    for rule in merged_rules:
        if rule.identity() not in allowed:
            raise MergeAuditError(
                f"merge invented a rule for {rule.parameter_text()!r}: "
                f"{rule.rule_description!r}"
            )
        merged_ids.add(rule.identity())

    removed_ids = set()
    for entry in removed:
        if not isinstance(entry, dict):
            raise MergeAuditError("removal entries must be objects")
        try:
            parameter = entry["Parameter"]
            if isinstance(parameter, list):
                parameter = ", ".join(str(p) for p in parameter)
            identity = (
                str(parameter),
                str(entry["Rule Description"]),
                str(entry["Tuning Context"]),
            )
        except KeyError as exc:
            raise MergeAuditError(f"removal entry missing key {exc}")
        reason = str(entry.get("reason", "")).strip()
        if not reason:
            raise MergeAuditError(f"removal of {identity[0]!r} rule gives no reason")
        if identity not in allowed:
            raise MergeAuditError(
                f"removal names a rule that was never present: {identity[0]!r}"
            )
        removed_ids.add(identity)

    silently_dropped = allowed - merged_ids - removed_ids
    if silently_dropped:
        names = sorted(i[0] for i in silently_dropped)
        raise MergeAuditError(f"rules dropped without explanation: {names}")
    both = merged_ids & removed_ids
    if both:
        names = sorted(i[0] for i in both)
        raise MergeAuditError(f"rules both kept and removed: {names}")

    try:
        return RuleSet(rules=merged_rules, provenance=_merged_provenance(old, delta))
    except RuleError as exc:
        raise MergeAuditError(f"merged set is inconsistent: {exc}")


def merge_rule_sets(
    old: RuleSet,
    delta: RuleSet,
    model: ChatProvider,
    *,
    removal_log: Optional[list[dict]] = None,
) -> RuleSet:
    """Fold ``delta`` into ``old`` using the model's judgement, audited.

    Byte-identical duplicates are removed before the model sees the inputs.
    An empty delta short-circuits to a copy of ``old``.  The model answers
    with ``{"rules": [...], "removed": [...]}``; every input rule must end
    up either kept or enumerated in ``removed`` with a reason, kept rules
    must come from the inputs, and the result must satisfy the rule set
    invariants (no duplicate active scope, no orphaned alternatives).

    When ``removal_log`` is a list, the audited removal entries are appended
    to it so callers can report what was dropped and why.
    """
    old_ids = old.identities()
    deduped = []
    seen: set[tuple[str, str, str]] = set()
    for rule in delta.rules:
        identity = rule.identity()
        if identity in old_ids or identity in seen:
            continue
        seen.add(identity)
        deduped.append(rule)
    delta = replace(delta, rules=deduped, provenance=list(delta.provenance))

    if delta.is_empty:
        return RuleSet(
            rules=list(old.rules),
            provenance=_merged_provenance(old, delta),
        )
    if old.is_empty:
        # Nothing to reconcile against; the union is the delta itself.
        return RuleSet(
            rules=list(delta.rules),
            provenance=_merged_provenance(old, delta),
        )

    messages: list[Message] = [
        system(prompt_text("merge_system")),
        user(_merge_user_prompt(old, delta)),
    ]
    last_raw = ""
    parsed: Optional[tuple[list[Rule], list[dict]]] = None
    for _ in range(MAX_MERGE_ATTEMPTS):
        reply = model.complete(messages, ())
        last_raw = reply.content
        messages.append(assistant(reply.content))
        try:
            parsed = _parse_merge_reply(reply.content)
            break
        except RuleError as exc:
            messages.append(
                user(
                    f"That reply was rejected: {exc}. Answer again with only a "
                    'JSON object of the form {"rules": [...], "removed": [...]}.'
                )
            )
    if parsed is None:
        raise RuleError(
            f"merge failed after {MAX_MERGE_ATTEMPTS} attempts", raw_output=last_raw
        )
    merged_rules, removed = parsed
    merged = _audit_merge(old, delta, merged_rules, removed)
    if removal_log is not None:
        removal_log.extend(removed)
    return merged
