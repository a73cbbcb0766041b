"""Workloads, the analytic PFS model, backends, trials, and the oracle."""

import dataclasses
import json
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pfstuner.core import Configuration, specs_from_json
from pfstuner.resources import data_json
from pfstuner.runner import (
    BackendError,
    ShellBackend,
    SimBackend,
    SimPfsModel,
    SimWorkload,
    WorkloadSpec,
    default_facts,
    load_sim_model,
    load_workload,
    oracle_optimum,
    run_trials,
    sim_time,
    synthesize_trace,
)
from pfstuner.trace import classify_workload, compute_highlights, parse_darshan_text


@pytest.fixture(scope="module")
def model():
    return load_sim_model()


@pytest.fixture(scope="module")
def facts():
    return default_facts()


@pytest.fixture(scope="module")
def sim_specs():
    return specs_from_json(json.dumps(data_json("sim_parameters")))


def workload_fixture(fixtures_dir, stem):
    return load_workload(fixtures_dir / "workloads" / f"{stem}.json")


@pytest.fixture
def metadata_workload(fixtures_dir):
    return workload_fixture(fixtures_dir, "metadata_heavy")


@pytest.fixture
def large_seq_workload(fixtures_dir):
    return workload_fixture(fixtures_dir, "large_seq")


# ---------------------------------------------------------------------------
# workload types
# ---------------------------------------------------------------------------


def test_sim_workload_validation():
    good = dict(
        data_bytes=100,
        transfer_bytes=10,
        seq_fraction=0.5,
        file_count=2,
        shared_file=False,
        meta_ops=5,
        read_fraction=0.5,
    )
    SimWorkload(**good)
    with pytest.raises(ValueError):
        SimWorkload(**dict(good, data_bytes=-1))
    with pytest.raises(ValueError):
        SimWorkload(**dict(good, seq_fraction=1.5))
    with pytest.raises(ValueError):
        SimWorkload(**dict(good, transfer_bytes=200))


def test_workload_spec_validates_template():
    with pytest.raises(ValueError, match="placeholder"):
        WorkloadSpec(name="x", launch_template="run {queue}")
    with pytest.raises(ValueError):
        WorkloadSpec(name="x", processes=0)
    spec = WorkloadSpec(name="bench", launch_template="mpirun -np {processes} {name}", processes=4)
    assert spec.render_launch() == "mpirun -np 4 bench"


def test_workload_round_trip(tmp_path, metadata_workload):
    path = tmp_path / "w.json"
    path.write_text(json.dumps(metadata_workload.to_dict()))
    again = load_workload(path)
    assert again == metadata_workload
    assert again.descriptor.file_count == 20000


# ---------------------------------------------------------------------------
# model definition
# ---------------------------------------------------------------------------


def test_model_loads_from_shipped_file(model):
    assert model.base_bw_mb_s == 1250.0
    assert model.meta_rate_ops_s == 4000.0
    assert model.defaults["max_rpcs_in_flight"] == 8
    assert model.noise_sigma == 0.0


def test_model_validation():
    d = data_json("sim_model")
    bad = json.loads(json.dumps(d))
    bad["curves"]["rpc_concurrency"]["tau"] = 0
    with pytest.raises(ValueError):
        SimPfsModel.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["curves"]["stripe_align"]["floor"] = 0
    with pytest.raises(ValueError):
        SimPfsModel.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["base_bw_mb_s"] = -1
    with pytest.raises(ValueError):
        SimPfsModel.from_dict(bad)


def test_with_and_without_noise(model):
    noisy = model.with_noise(0.05, seed=9)
    assert noisy.noise_sigma == 0.05 and noisy.seed == 9
    assert noisy.without_noise().noise_sigma == 0.0
    assert model.noise_sigma == 0.0  # original untouched


# ---------------------------------------------------------------------------
# sim_time
# ---------------------------------------------------------------------------


def empty_workload():
    return SimWorkload(
        data_bytes=0,
        transfer_bytes=0,
        seq_fraction=0,
        file_count=0,
        shared_file=False,
        meta_ops=0,
        read_fraction=0,
    )


def test_zero_work_takes_zero_time(model, facts):
    assert sim_time(model, model.defaults, empty_workload(), facts.ost_count) == 0.0


def test_doubling_bandwidth_halves_data_time(model, facts, large_seq_workload):
    w = dataclasses.replace(large_seq_workload.descriptor, meta_ops=0)
    fast = dataclasses.replace(model, base_bw_mb_s=model.base_bw_mb_s * 2)
    t1 = sim_time(model, model.defaults, w, facts.ost_count)
    t2 = sim_time(fast, fast.defaults, w, facts.ost_count)
    assert t2 == pytest.approx(t1 / 2, rel=1e-12)


def test_metadata_baseline_golden(model, facts, metadata_workload):
    t0 = sim_time(model, model.defaults, metadata_workload.descriptor, facts.ost_count)
    assert t0 == pytest.approx(78.43568302830481, rel=1e-9)


def test_determinism_with_noise(model, facts, metadata_workload):
    noisy = model.with_noise(0.05)
    w = metadata_workload.descriptor
    assert sim_time(noisy, noisy.defaults, w, facts.ost_count) == sim_time(
        noisy, noisy.defaults, w, facts.ost_count
    )


def test_noise_is_multiplicative_lognormal(model, facts, metadata_workload):
    w = metadata_workload.descriptor
    clean = sim_time(model, model.defaults, w, facts.ost_count)
    noisy = model.with_noise(0.2)
    drawn = sim_time(noisy, noisy.defaults, w, facts.ost_count, rng=random.Random(5))
    assert drawn == pytest.approx(clean * random.Random(5).lognormvariate(0, 0.2))


@given(st.integers(min_value=1, max_value=255))
def test_more_rpcs_never_slower(rpcs):
    model = load_sim_model()
    w = SimWorkload(
        data_bytes=10**9,
        transfer_bytes=2**20,
        seq_fraction=1.0,
        file_count=1,
        shared_file=True,
        meta_ops=0,
        read_fraction=1.0,
    )
    lo = sim_time(model, dict(model.defaults, max_rpcs_in_flight=rpcs), w, 5)
    hi = sim_time(model, dict(model.defaults, max_rpcs_in_flight=rpcs + 1), w, 5)
    assert hi <= lo


@given(st.integers(min_value=0, max_value=16383))
def test_wider_readahead_never_slower_for_seq_reads(mb):
    model = load_sim_model()
    w = SimWorkload(
        data_bytes=10**9,
        transfer_bytes=2**20,
        seq_fraction=1.0,
        file_count=1,
        shared_file=True,
        meta_ops=0,
        read_fraction=1.0,
    )
    base = dict(model.defaults, max_read_ahead_per_file_mb=32768)
    lo = sim_time(model, dict(base, max_read_ahead_mb=mb), w, 5)
    hi = sim_time(model, dict(base, max_read_ahead_mb=mb + 64), w, 5)
    assert hi <= lo


def test_stripe_count_capped_at_ost_count(model, facts, large_seq_workload):
    w = large_seq_workload.descriptor
    at_cap = sim_time(model, dict(model.defaults, stripe_count=5), w, facts.ost_count)
    over = sim_time(model, dict(model.defaults, stripe_count=500), w, facts.ost_count)
    assert over == at_cap


# ---------------------------------------------------------------------------
# sim backend
# ---------------------------------------------------------------------------


def test_sim_backend_apply_and_execute(model, facts, metadata_workload):
    backend = SimBackend(model, facts)
    backend.apply_configuration({"statahead_max": 8192, "mdc_max_rpcs_in_flight": 256})
    assert backend.applied["statahead_max"] == 8192
    assert backend.applied["stripe_size"] == 1048576  # default fills the rest
    t = backend.execute(metadata_workload)
    assert t == pytest.approx(13.896182308481496, rel=1e-9)


def test_sim_backend_accepts_configuration_object(model, facts):
    backend = SimBackend(model, facts)
    backend.apply_configuration(Configuration(values={"statahead_max": 64}))
    assert backend.applied["statahead_max"] == 64


def test_sim_backend_rejects_unknown_parameter(model, facts):
    backend = SimBackend(model, facts)
    with pytest.raises(BackendError, match="bogus_knob"):
        backend.apply_configuration({"bogus_knob": 1})


def test_sim_backend_requires_descriptor(model, facts):
    backend = SimBackend(model, facts)
    with pytest.raises(BackendError, match="no sim descriptor"):
        backend.execute(WorkloadSpec(name="empty"))


def test_sim_backend_reset_clears_cache_flag(model, facts, metadata_workload):
    backend = SimBackend(model, facts)
    backend.execute(metadata_workload)
    assert backend.cache_warm
    backend.reset_environment()
    assert not backend.cache_warm
    assert backend.reset_count == 1


def test_synthesized_trace_matches_descriptor(metadata_workload):
    bundle = parse_darshan_text(synthesize_trace(metadata_workload))
    table = bundle.tables["POSIX"]
    assert len(table.rows) == 256  # capped row count for 20000 files
    d = metadata_workload.descriptor
    data_ops = math.ceil(d.data_bytes / d.transfer_bytes)
    assert table.total("POSIX_BYTES_READ") + table.total("POSIX_BYTES_WRITTEN") == d.data_bytes
    assert table.total("POSIX_OPENS") + table.total("POSIX_STATS") == d.meta_ops
    assert table.total("POSIX_READS") + table.total("POSIX_WRITES") == data_ops
    assert classify_workload(compute_highlights(bundle)) == "metadata"


def test_synthesized_trace_shared_file(large_seq_workload):
    bundle = parse_darshan_text(synthesize_trace(large_seq_workload))
    rows = bundle.tables["POSIX"].rows
    assert len(rows) == 1 and rows[0].rank == -1
    assert rows[0].counters["POSIX_BYTES_READ"] == 20_132_659_200
    assert classify_workload(compute_highlights(bundle)) == "data"


def test_synthesized_trace_mixed_classification(fixtures_dir):
    workload = workload_fixture(fixtures_dir, "mixed")
    bundle = parse_darshan_text(synthesize_trace(workload))
    assert classify_workload(compute_highlights(bundle)) == "mixed"


# ---------------------------------------------------------------------------
# shell backend
# ---------------------------------------------------------------------------

OK_HOOKS = ["true", "true", "true", "true"]


def test_shell_apply_renders_templates(tmp_path):
    marker = tmp_path / "applied.txt"
    backend = ShellBackend(
        param_commands={"knob": f"echo knob={{value}} >> {marker}"},
        reset_hooks=OK_HOOKS,
        launch_template="true",
    )
    backend.apply_configuration({"knob": 42})
    assert marker.read_text().strip() == "knob=42"


def test_shell_apply_missing_template(tmp_path):
    backend = ShellBackend({}, OK_HOOKS, "true")
    with pytest.raises(BackendError, match="no command template for parameter 'knob'"):
        backend.apply_configuration({"knob": 1})


def test_shell_apply_failure_captures_stderr():
    backend = ShellBackend(
        {"knob": "sh -c 'echo cannot set >&2; exit 3'"}, OK_HOOKS, "true"
    )
    with pytest.raises(BackendError, match="cannot set"):
        backend.apply_configuration({"knob": 1})


def test_shell_reset_runs_hooks_in_order(tmp_path):
    log_file = tmp_path / "hooks.txt"
    hooks = [f"echo step{i} >> {log_file}" for i in range(1, 5)]
    ShellBackend({}, hooks, "true").reset_environment()
    assert log_file.read_text().split() == ["step1", "step2", "step3", "step4"]


def test_shell_reset_reports_failing_step():
    hooks = ["true", "false", "true", "true"]
    with pytest.raises(BackendError, match="step 2"):
        ShellBackend({}, hooks, "true").reset_environment()


def test_shell_reset_unconfigured():
    with pytest.raises(BackendError, match="unconfigured"):
        ShellBackend({}, [], "true").reset_environment()


def test_shell_execute_times_and_fails(tmp_path):
    backend = ShellBackend({}, OK_HOOKS, "echo {name} {processes}")
    elapsed = backend.execute(WorkloadSpec(name="bench", processes=3))
    assert elapsed >= 0
    failing = ShellBackend({}, OK_HOOKS, "sh -c 'echo boom >&2; exit 1'")
    with pytest.raises(BackendError, match="boom"):
        failing.execute(WorkloadSpec(name="bench"))


def test_shell_from_config_file(tmp_path):
    trace = tmp_path / "trace.txt"
    trace.write_text("# header\n")
    config = {
        "param_commands": {"knob": "echo {value}"},
        "reset_hooks": OK_HOOKS,
        "launch_template": "true",
        "trace_path": str(trace),
    }
    path = tmp_path / "backend.json"
    path.write_text(json.dumps(config))
    backend = ShellBackend.from_config_file(path)
    assert backend.collect_trace(WorkloadSpec(name="x")) == b"# header\n"

    config["reset_hooks"] = ["true"]
    path.write_text(json.dumps(config))
    with pytest.raises(ValueError, match="4 reset_hooks"):
        ShellBackend.from_config_file(path)


def test_shell_collect_trace_unconfigured():
    with pytest.raises(BackendError, match="trace_path"):
        ShellBackend({}, OK_HOOKS, "true").collect_trace(WorkloadSpec(name="x"))


# ---------------------------------------------------------------------------
# run_trials
# ---------------------------------------------------------------------------


def test_run_trials_rejects_single_run(model, facts, metadata_workload):
    with pytest.raises(ValueError, match=">= 2"):
        run_trials(SimBackend(model, facts), metadata_workload, n=1)


def test_run_trials_noise_off_identical(model, facts, metadata_workload):
    result = run_trials(SimBackend(model, facts), metadata_workload, n=3)
    assert len(set(result.wall_times_s)) == 1
    assert result.ci90_halfwidth_s == 0.0


def test_run_trials_counts_resets_and_executions(model, facts, metadata_workload):
    backend = SimBackend(model, facts)
    run_trials(backend, metadata_workload, n=5)
    assert backend.reset_count == 5
    assert backend.execute_count == 5


def test_run_trials_seeded_noise_mean_in_band(model, facts, metadata_workload):
    sigma = 0.05
    backend = SimBackend(model.with_noise(sigma, seed=3), facts)
    result = run_trials(backend, metadata_workload, n=8)
    clean = sim_time(model, model.defaults, metadata_workload.descriptor, facts.ost_count)
    band = 3 * sigma / math.sqrt(8)
    assert abs(result.mean_s / clean - 1) <= band


def test_run_trials_propagates_failure(model, facts, metadata_workload):
    backend = SimBackend(model, facts)
    original = backend.execute
    state = {"n": 0}

    def flaky(workload):
        state["n"] += 1
        if state["n"] == 2:
            raise BackendError("node vanished")
        return original(workload)

    backend.execute = flaky
    with pytest.raises(BackendError, match="node vanished"):
        run_trials(backend, metadata_workload, n=4)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def test_oracle_rejects_empty_grid(model, facts, metadata_workload):
    with pytest.raises(ValueError):
        oracle_optimum(model, metadata_workload.descriptor, {}, facts)
    with pytest.raises(ValueError):
        oracle_optimum(model, metadata_workload.descriptor, {"statahead_max": []}, facts)


def test_oracle_single_point(model, facts, metadata_workload):
    config, t = oracle_optimum(
        model, metadata_workload.descriptor, {"statahead_max": [2048]}, facts
    )
    assert config["statahead_max"] == 2048
    assert t == pytest.approx(
        sim_time(
            model,
            dict(model.defaults, statahead_max=2048),
            metadata_workload.descriptor,
            facts.ost_count,
        )
    )


def test_oracle_two_points_picks_min(model, facts, metadata_workload):
    config, _ = oracle_optimum(
        model, metadata_workload.descriptor, {"statahead_max": [32, 4096]}, facts
    )
    assert config["statahead_max"] == 4096


def test_oracle_metadata_fixture_maxes_statahead(model, facts, metadata_workload):
    grid = {
        "statahead_max": [32, 512, 2048, 8192],
        "mdc_max_rpcs_in_flight": [8, 64, 256],
    }
    config, t = oracle_optimum(model, metadata_workload.descriptor, grid, facts)
    assert config["statahead_max"] == 8192
    assert config["mdc_max_rpcs_in_flight"] == 256


def test_oracle_is_exhaustive(model, facts, metadata_workload):
    grid = {
        "statahead_max": [32, 1024, 8192],
        "max_rpcs_in_flight": [8, 256],
    }
    _, best = oracle_optimum(model, metadata_workload.descriptor, grid, facts)
    for sa in grid["statahead_max"]:
        for rpc in grid["max_rpcs_in_flight"]:
            t = sim_time(
                model,
                dict(model.defaults, statahead_max=sa, max_rpcs_in_flight=rpc),
                metadata_workload.descriptor,
                facts.ost_count,
            )
            assert best <= t + 1e-12


def test_oracle_tie_breaks_lexicographically(model, facts):
    # no metadata phase, so the statahead knob cannot matter
    w = SimWorkload(
        data_bytes=10**8,
        transfer_bytes=2**20,
        seq_fraction=0,
        file_count=1,
        shared_file=True,
        meta_ops=0,
        read_fraction=0,
    )
    config, _ = oracle_optimum(model, w, {"statahead_max": [512, 32, 8192]}, facts)
    assert config["statahead_max"] == 32


def test_oracle_skips_range_violations(model, facts, sim_specs, large_seq_workload):
    # per-file read-ahead above half the window is invalid and must be skipped
    grid = {
        "max_read_ahead_mb": [64],
        "max_read_ahead_per_file_mb": [32, 64],
    }
    config, _ = oracle_optimum(
        model, large_seq_workload.descriptor, grid, facts, specs=sim_specs
    )
    assert config["max_read_ahead_per_file_mb"] == 32


def test_oracle_errors_when_nothing_valid(model, facts, sim_specs, large_seq_workload):
    grid = {"max_read_ahead_mb": [64], "max_read_ahead_per_file_mb": [64]}
    with pytest.raises(ValueError, match="satisfies"):
        oracle_optimum(
            model, large_seq_workload.descriptor, grid, facts, specs=sim_specs
        )
