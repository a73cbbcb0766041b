"""Shared domain types, configuration validation, and trial statistics."""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Union

from scipy import stats as _scipy_stats

IDENT_RE = re.compile(r"^[a-z_][a-z0-9_.]*$")

Scalar = Union[int, str]


class CoreError(Exception):
    """Base error for domain-level failures."""


class StatsError(CoreError):
    """Raised for invalid statistical inputs (e.g. too few samples)."""


# ---------------------------------------------------------------------------
# System facts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemFacts:
    """Hardware quantities that dependent parameter ranges may reference."""

    memory_mb: int
    ost_count: int
    client_node_count: int
    network_gbps: float
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("memory_mb", "ost_count", "client_node_count", "network_gbps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SystemFacts.{name} must be > 0")
        for key in self.extra:
            if not IDENT_RE.match(key):
                raise ValueError(f"invalid fact identifier: {key!r}")

    def as_env(self) -> dict[str, float]:
        """Expression environment: canonical fact names plus extras."""
        env = {
            "system_memory_mb": float(self.memory_mb),
            "ost_count": float(self.ost_count),
            "client_node_count": float(self.client_node_count),
            "network_gbps": float(self.network_gbps),
        }
        env.update(self.extra)
        return env

    def to_dict(self) -> dict[str, Any]:
        return {
            "memory_mb": self.memory_mb,
            "ost_count": self.ost_count,
            "client_node_count": self.client_node_count,
            "network_gbps": self.network_gbps,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SystemFacts":
        return cls(
            memory_mb=int(d["memory_mb"]),
            ost_count=int(d["ost_count"]),
            client_node_count=int(d["client_node_count"]),
            network_gbps=float(d["network_gbps"]),
            extra={k: float(v) for k, v in d.get("extra", {}).items()},
        )


# ---------------------------------------------------------------------------
# Value ranges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaticInt:
    """A closed integer interval with an optional step."""

    min: int
    max: int
    step: int = 1

    def __post_init__(self) -> None:
        if self.min > self.max:
            raise ValueError(f"StaticInt min {self.min} > max {self.max}")
        if self.step < 1:
            raise ValueError("StaticInt step must be >= 1")


@dataclass(frozen=True)
class Choices:
    """An explicit, nonempty set of allowed values (ints or strings)."""

    values: tuple[Scalar, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("Choices must be nonempty")
        if len(set(self.values)) != len(self.values):
            raise ValueError("Choices values must be distinct")


@dataclass(frozen=True)
class ExprBounds:
    """Bounds given as expressions over system facts and other parameters.

    ``depends_on`` always equals the set of identifiers appearing in either
    bound expression; it is recomputed at construction.
    """

    min_expr: "Any"  # expr.Expression; kept loose to avoid an import cycle
    max_expr: "Any"
    depends_on: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        from . import expr as _expr

        idents = sorted(
            set(_expr.identifiers(self.min_expr)) | set(_expr.identifiers(self.max_expr))
        )
        object.__setattr__(self, "depends_on", tuple(idents))


ValueRange = Union[StaticInt, Choices, ExprBounds]


def range_to_dict(r: ValueRange) -> dict[str, Any]:
    from . import expr as _expr

    if isinstance(r, StaticInt):
        return {"kind": "static_int", "min": r.min, "max": r.max, "step": r.step}
    if isinstance(r, Choices):
        return {"kind": "choices", "values": list(r.values)}
    if isinstance(r, ExprBounds):
        return {
            "kind": "expr",
            "min_expr": _expr.print_expr(r.min_expr),
            "max_expr": _expr.print_expr(r.max_expr),
        }
    raise TypeError(f"not a ValueRange: {r!r}")


def range_from_dict(d: dict[str, Any]) -> ValueRange:
    from . import expr as _expr

    kind = d.get("kind")
    if kind == "static_int":
        return StaticInt(min=int(d["min"]), max=int(d["max"]), step=int(d.get("step", 1)))
    if kind == "choices":
        return Choices(values=tuple(d["values"]))
    if kind == "expr":
        return ExprBounds(
            min_expr=_expr.parse_expr(d["min_expr"]),
            max_expr=_expr.parse_expr(d["max_expr"]),
        )
    raise ValueError(f"unknown range kind: {kind!r}")


# ---------------------------------------------------------------------------
# Parameter specs
# ---------------------------------------------------------------------------


class Impact(str, Enum):
    HIGH = "high"
    LOW = "low"


@dataclass
class ParameterSpec:
    """One tunable knob, as extracted from the system manual."""

    name: str
    path: str
    description: str
    io_impact: str
    range: ValueRange
    is_binary: bool = False
    impact: Impact = Impact.HIGH
    source_chunks: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not IDENT_RE.match(self.name):
            raise ValueError(f"invalid parameter name: {self.name!r}")
        if isinstance(self.impact, str):
            self.impact = Impact(self.impact)
        if self.impact is Impact.HIGH and not self.description:
            raise ValueError(f"high-impact parameter {self.name} needs a description")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "path": self.path,
            "description": self.description,
            "io_impact": self.io_impact,
            "range": range_to_dict(self.range),
            "is_binary": self.is_binary,
            "impact": self.impact.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ParameterSpec":
        return cls(
            name=d["name"],
            path=d.get("path", ""),
            description=d.get("description", ""),
            io_impact=d.get("io_impact", ""),
            range=range_from_dict(d["range"]),
            is_binary=bool(d.get("is_binary", False)),
            impact=Impact(d.get("impact", "high")),
            source_chunks=tuple(d.get("source_chunks", ())),
        )


def specs_to_json(specs: Iterable[ParameterSpec]) -> str:
    return json.dumps([s.to_dict() for s in specs], indent=2)


def specs_from_json(text: str) -> list[ParameterSpec]:
    raw = json.loads(text)
    specs = [ParameterSpec.from_dict(d) for d in raw]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in spec set")
    return specs


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------


class Origin(str, Enum):
    DEFAULT = "default"
    AGENT_PROPOSED = "agent_proposed"
    RULE_SEEDED = "rule_seeded"


@dataclass
class Configuration:
    """A full assignment of values to the tunable parameter set."""

    values: dict[str, Scalar]
    origin: Origin = Origin.AGENT_PROPOSED
    rationale_per_param: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.origin, str):
            self.origin = Origin(self.origin)

    def to_dict(self) -> dict[str, Any]:
        return {
            "values": dict(self.values),
            "origin": self.origin.value,
            "rationale_per_param": dict(self.rationale_per_param),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Configuration":
        return cls(
            values=dict(d["values"]),
            origin=Origin(d.get("origin", "agent_proposed")),
            rationale_per_param=dict(d.get("rationale_per_param", {})),
        )


@dataclass(frozen=True)
class Violation:
    """One reason a configuration fails validation."""

    parameter: str
    kind: str  # missing | unknown | out_of_range | not_in_choices | step_mismatch
    message: str
    bound: Optional[tuple[Any, Any]] = None
    value: Optional[Scalar] = None

    def __str__(self) -> str:
        return f"{self.parameter}: {self.message}"


def validate_configuration(
    config: Configuration,
    specs: list[ParameterSpec],
    facts: SystemFacts,
) -> list[Violation]:
    """Check every value against its resolved range.

    Returns an empty list when the configuration is valid.  Missing and
    unknown parameters are reported as violations; unresolvable bound
    expressions (dangling identifier, dependency cycle) raise the
    corresponding ``expr`` error instead.
    """
    from . import expr as _expr

    if not specs:
        raise ValueError("specs must be nonempty")
    violations: list[Violation] = []
    by_name = {s.name: s for s in specs}

    for name in sorted(config.values):
        if name not in by_name:
            violations.append(
                Violation(name, "unknown", f"no spec defines parameter {name!r}")
            )
    for name in sorted(by_name):
        if name not in config.values:
            violations.append(
                Violation(name, "missing", f"parameter {name!r} missing from configuration")
            )

    partial = {k: v for k, v in config.values.items() if isinstance(v, (int, float))}
    bounds = _expr.resolve_ranges(specs, facts, partial)

    for name, spec in sorted(by_name.items()):
        if name not in config.values:
            continue
        value = config.values[name]
        r = spec.range
        if isinstance(r, Choices):
            if value not in r.values:
                violations.append(
                    Violation(
                        name,
                        "not_in_choices",
                        f"value {value!r} not one of {list(r.values)}",
                        value=value,
                    )
                )
            continue
        if not isinstance(value, int):
            violations.append(
                Violation(name, "out_of_range", f"value {value!r} is not an integer", value=value)
            )
            continue
        lo, hi = bounds[name]
        if not (lo <= value <= hi):
            violations.append(
                Violation(
                    name,
                    "out_of_range",
                    f"value {value} outside [{lo}, {hi}]",
                    bound=(lo, hi),
                    value=value,
                )
            )
            continue
        if isinstance(r, StaticInt) and (value - r.min) % r.step != 0:
            violations.append(
                Violation(
                    name,
                    "step_mismatch",
                    f"value {value} not reachable from {r.min} with step {r.step}",
                    bound=(lo, hi),
                    value=value,
                )
            )
    return violations


# ---------------------------------------------------------------------------
# Trial statistics
# ---------------------------------------------------------------------------


def mean_ci90(samples: list[float]) -> tuple[float, float]:
    """Mean and 90% confidence half-width (Student-t, n-1 dof) of samples."""
    n = len(samples)
    if n < 2:
        raise StatsError(f"need at least 2 samples, got {n}")
    mean = sum(samples) / n
    var = sum((x - mean) ** 2 for x in samples) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0:
        return mean, 0.0
    t = float(_scipy_stats.t.ppf(0.95, n - 1))
    return mean, t * sd / math.sqrt(n)


@dataclass
class TrialResult:
    """Wall times of repeated trials plus their mean and 90% CI half-width."""

    wall_times_s: list[float]
    mean_s: float
    ci90_halfwidth_s: float

    @classmethod
    def from_times(cls, times: list[float]) -> "TrialResult":
        mean, hw = mean_ci90(times)
        return cls(wall_times_s=list(times), mean_s=mean, ci90_halfwidth_s=hw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "wall_times_s": list(self.wall_times_s),
            "mean_s": self.mean_s,
            "ci90_halfwidth_s": self.ci90_halfwidth_s,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrialResult":
        return cls(
            wall_times_s=[float(x) for x in d["wall_times_s"]],
            mean_s=float(d["mean_s"]),
            ci90_halfwidth_s=float(d["ci90_halfwidth_s"]),
        )


# ---------------------------------------------------------------------------
# Attempts and sessions
# ---------------------------------------------------------------------------


@dataclass
class Attempt:
    """One run of the workload under one configuration.  Index 0 is the
    untuned default run and always has speedup 1.0."""

    index: int
    configuration: Configuration
    result: TrialResult
    speedup_vs_default: float

    def __post_init__(self) -> None:
        if self.index == 0:
            if self.configuration.origin is not Origin.DEFAULT:
                raise ValueError("attempt 0 must have origin=default")
            if abs(self.speedup_vs_default - 1.0) > 1e-12:
                raise ValueError("attempt 0 must have speedup 1.0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "configuration": self.configuration.to_dict(),
            "result": self.result.to_dict(),
            "speedup_vs_default": self.speedup_vs_default,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Attempt":
        return cls(
            index=int(d["index"]),
            configuration=Configuration.from_dict(d["configuration"]),
            result=TrialResult.from_dict(d["result"]),
            speedup_vs_default=float(d["speedup_vs_default"]),
        )


@dataclass
class TuningSession:
    """Ledger of one tuning run: attempts, analysis artifacts, end state."""

    workload: Any  # runner.WorkloadSpec; typed loosely to avoid a cycle
    attempts: list[Attempt] = field(default_factory=list)
    budget: int = 5
    io_report: str = ""
    followups: list[tuple[str, str]] = field(default_factory=list)
    end_reason: Optional[str] = None
    transcript_ref: str = ""

    @property
    def proposed_count(self) -> int:
        return sum(1 for a in self.attempts if a.configuration.origin is not Origin.DEFAULT)

    @property
    def ended(self) -> bool:
        return self.end_reason is not None

    def best_attempt(self) -> Attempt:
        """Argmin over mean time; ties broken by attempt index so the result
        does not depend on ledger ordering."""
        if not self.attempts:
            raise CoreError("session has no attempts")
        return min(self.attempts, key=lambda a: (a.result.mean_s, a.index))


def write_ledger(path: str, session: TuningSession) -> None:
    """One Attempt per line, line-delimited JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for attempt in session.attempts:
            fh.write(json.dumps(attempt.to_dict()) + "\n")


def read_ledger(path: str) -> list[Attempt]:
    attempts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                attempts.append(Attempt.from_dict(json.loads(line)))
    return attempts


def _asdict_shallow(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    return obj
