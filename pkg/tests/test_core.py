"""Domain types, configuration validation, trial statistics, serialization."""

import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pfstuner.core import (
    Attempt,
    Choices,
    Configuration,
    ExprBounds,
    Impact,
    Origin,
    ParameterSpec,
    StaticInt,
    StatsError,
    SystemFacts,
    TrialResult,
    TuningSession,
    mean_ci90,
    read_ledger,
    specs_from_json,
    specs_to_json,
    validate_configuration,
    write_ledger,
)
from pfstuner.expr import parse_expr

FACTS = SystemFacts(memory_mb=65536, ost_count=5, client_node_count=5, network_gbps=10.0)


def make_specs():
    return [
        ParameterSpec(
            "stripe_size",
            "/lov/stripesize",
            "bytes per stripe chunk",
            "large transfers",
            Choices((65536, 1048576, 16777216)),
        ),
        ParameterSpec(
            "stripe_count",
            "/lov/stripecount",
            "targets per file",
            "bandwidth scaling",
            ExprBounds(parse_expr("1"), parse_expr("ost_count")),
        ),
        ParameterSpec(
            "max_rpcs_in_flight",
            "/osc/max_rpcs_in_flight",
            "concurrent RPCs per target",
            "pipelining",
            StaticInt(1, 256),
        ),
    ]


def full_config(**overrides):
    values = {"stripe_size": 1048576, "stripe_count": 1, "max_rpcs_in_flight": 8}
    values.update(overrides)
    return Configuration(values=values)


# ---------------------------------------------------------------------------
# system facts
# ---------------------------------------------------------------------------


def test_facts_env_names():
    env = FACTS.as_env()
    assert env["system_memory_mb"] == 65536
    assert env["ost_count"] == 5
    assert env["client_node_count"] == 5
    assert env["network_gbps"] == 10.0


def test_facts_extra_merged_and_validated():
    facts = SystemFacts(1, 1, 1, 1.0, extra={"nvme_count": 4.0})
    assert facts.as_env()["nvme_count"] == 4.0
    with pytest.raises(ValueError):
        SystemFacts(1, 1, 1, 1.0, extra={"Bad-Name": 1.0})


def test_facts_must_be_positive():
    with pytest.raises(ValueError):
        SystemFacts(memory_mb=0, ost_count=5, client_node_count=5, network_gbps=10.0)


def test_facts_round_trip():
    assert SystemFacts.from_dict(FACTS.to_dict()) == FACTS


# ---------------------------------------------------------------------------
# ranges and specs
# ---------------------------------------------------------------------------


def test_static_int_validation():
    with pytest.raises(ValueError):
        StaticInt(10, 5)
    with pytest.raises(ValueError):
        StaticInt(0, 5, step=0)


def test_choices_validation():
    with pytest.raises(ValueError):
        Choices(())
    with pytest.raises(ValueError):
        Choices((1, 1))


def test_expr_bounds_collects_dependencies():
    r = ExprBounds(parse_expr("base / 2"), parse_expr("max(cap, other)"))
    assert r.depends_on == ("base", "cap", "other")


def test_parameter_name_must_be_identifier():
    with pytest.raises(ValueError):
        ParameterSpec("Bad Name", "/p", "d", "io", StaticInt(0, 1))


def test_high_impact_requires_description():
    with pytest.raises(ValueError):
        ParameterSpec("p", "/p", "", "io", StaticInt(0, 1), impact=Impact.HIGH)
    # low impact may omit it
    ParameterSpec("p", "/p", "", "io", StaticInt(0, 1), impact=Impact.LOW)


def test_spec_set_json_round_trip():
    specs = make_specs()
    back = specs_from_json(specs_to_json(specs))
    assert [s.to_dict() for s in back] == [s.to_dict() for s in specs]


def test_spec_set_json_keys():
    (entry,) = json.loads(specs_to_json(make_specs()[:1]))
    assert set(entry) == {
        "name",
        "path",
        "description",
        "io_impact",
        "range",
        "is_binary",
        "impact",
    }


def test_spec_set_rejects_duplicate_names():
    spec = make_specs()[0]
    with pytest.raises(ValueError):
        specs_from_json(specs_to_json([spec, spec]))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def test_validate_accepts_good_config():
    assert validate_configuration(full_config(), make_specs(), FACTS) == []


def test_validate_reports_missing_and_unknown():
    cfg = Configuration(values={"stripe_size": 1048576, "mystery": 1})
    kinds = {(v.parameter, v.kind) for v in validate_configuration(cfg, make_specs(), FACTS)}
    assert ("mystery", "unknown") in kinds
    assert ("stripe_count", "missing") in kinds
    assert ("max_rpcs_in_flight", "missing") in kinds


def test_validate_choices_membership():
    (v,) = validate_configuration(full_config(stripe_size=999), make_specs(), FACTS)
    assert v.kind == "not_in_choices"
    assert v.parameter == "stripe_size"


def test_validate_expr_bound_uses_facts():
    (v,) = validate_configuration(full_config(stripe_count=6), make_specs(), FACTS)
    assert v.kind == "out_of_range"
    assert v.bound == (1, 5)


def test_validate_static_range():
    (v,) = validate_configuration(full_config(max_rpcs_in_flight=0), make_specs(), FACTS)
    assert v.kind == "out_of_range"


def test_validate_step():
    specs = [ParameterSpec("evens", "/p", "d", "io", StaticInt(0, 10, step=2))]
    cfg = Configuration(values={"evens": 3})
    (v,) = validate_configuration(cfg, specs, FACTS)
    assert v.kind == "step_mismatch"
    assert validate_configuration(Configuration(values={"evens": 4}), specs, FACTS) == []


def test_validate_dependency_respects_configured_value():
    specs = [
        ParameterSpec(
            "max_read_ahead_mb",
            "/p",
            "total cap",
            "read",
            ExprBounds(parse_expr("0"), parse_expr("system_memory_mb / 2")),
        ),
        ParameterSpec(
            "max_read_ahead_per_file_mb",
            "/p",
            "per-file cap",
            "read",
            ExprBounds(parse_expr("0"), parse_expr("max_read_ahead_mb / 2")),
        ),
    ]
    cfg = Configuration(values={"max_read_ahead_mb": 64, "max_read_ahead_per_file_mb": 40})
    (v,) = validate_configuration(cfg, specs, FACTS)
    assert v.parameter == "max_read_ahead_per_file_mb"
    assert v.bound == (0, 32)
    cfg.values["max_read_ahead_per_file_mb"] = 32
    assert validate_configuration(cfg, specs, FACTS) == []


def test_validate_requires_specs():
    with pytest.raises(ValueError):
        validate_configuration(full_config(), [], FACTS)


@given(st.integers(min_value=-300, max_value=300))
def test_validate_static_agrees_with_interval(value):
    specs = [ParameterSpec("p", "/p", "d", "io", StaticInt(1, 256))]
    violations = validate_configuration(Configuration(values={"p": value}), specs, FACTS)
    assert (violations == []) == (1 <= value <= 256)


# ---------------------------------------------------------------------------
# trial statistics
# ---------------------------------------------------------------------------


def test_mean_ci90_two_samples():
    mean, hw = mean_ci90([8.0, 12.0])
    assert mean == pytest.approx(10.0)
    # closed form for n=2: t(0.95, 1) * s / sqrt(2) = tan(0.45 pi) * 2
    assert hw == pytest.approx(2 * math.tan(0.45 * math.pi), rel=1e-9)


def test_mean_ci90_constant_samples():
    mean, hw = mean_ci90([5.0] * 8)
    assert mean == 5.0
    assert hw == 0.0


def test_mean_ci90_needs_two():
    with pytest.raises(StatsError):
        mean_ci90([1.0])
    with pytest.raises(StatsError):
        mean_ci90([])


def test_mean_ci90_shrinks_with_more_samples():
    # same sample variance, more evidence: the t factor and 1/sqrt(n) both drop
    _, hw2 = mean_ci90([8.0, 12.0])
    _, hw8 = mean_ci90([8.0, 12.0] * 4)
    assert hw8 < hw2 / 3


@given(
    st.lists(st.floats(min_value=0.1, max_value=1e4), min_size=2, max_size=16),
    st.floats(min_value=0.5, max_value=3.0),
    st.floats(min_value=-10.0, max_value=10.0),
)
def test_mean_ci90_affine_equivariance(xs, scale, shift):
    mean, hw = mean_ci90(xs)
    mean2, hw2 = mean_ci90([scale * x + shift for x in xs])
    assert mean2 == pytest.approx(scale * mean + shift, rel=1e-9, abs=1e-9)
    assert hw2 == pytest.approx(scale * hw, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# attempts and the session ledger
# ---------------------------------------------------------------------------


def make_attempt(index, mean, origin=Origin.AGENT_PROPOSED, speedup=None):
    times = [mean - 0.5, mean + 0.5]
    cfg = Configuration(values={"p": 1}, origin=origin)
    return Attempt(
        index=index,
        configuration=cfg,
        result=TrialResult.from_times(times),
        speedup_vs_default=1.0 if speedup is None else speedup,
    )


def test_attempt_zero_invariants():
    make_attempt(0, 10.0, origin=Origin.DEFAULT)
    with pytest.raises(ValueError):
        make_attempt(0, 10.0, origin=Origin.AGENT_PROPOSED)
    with pytest.raises(ValueError):
        make_attempt(0, 10.0, origin=Origin.DEFAULT, speedup=1.2)


def test_session_counts_exclude_default():
    session = TuningSession(workload=None, budget=5)
    session.attempts.append(make_attempt(0, 10.0, origin=Origin.DEFAULT))
    session.attempts.append(make_attempt(1, 8.0, speedup=1.25))
    assert session.proposed_count == 1
    assert not session.ended
    session.end_reason = "budget_exhausted"
    assert session.ended


def test_best_attempt_prefers_lower_mean_then_earlier():
    session = TuningSession(workload=None)
    session.attempts.append(make_attempt(0, 10.0, origin=Origin.DEFAULT))
    session.attempts.append(make_attempt(1, 8.0, speedup=1.25))
    session.attempts.append(make_attempt(2, 8.0, speedup=1.25))
    assert session.best_attempt().index == 1


def test_ledger_round_trip(tmp_path):
    session = TuningSession(workload=None)
    session.attempts.append(make_attempt(0, 10.0, origin=Origin.DEFAULT))
    session.attempts.append(make_attempt(1, 8.0, speedup=1.25))
    path = tmp_path / "session.jsonl"
    write_ledger(str(path), session)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 2
    # every line is a self-contained JSON object
    for line in lines:
        json.loads(line)
    back = read_ledger(str(path))
    assert [a.to_dict() for a in back] == [a.to_dict() for a in session.attempts]
