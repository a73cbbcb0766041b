"""Execution backends: apply a configuration, reset, run, and time.

Two backends share one interface.  ``ShellBackend`` drives a real system
through per-parameter command templates and four reset hooks.
``SimBackend`` evaluates a small analytic file-system model so the whole
tuning loop can be exercised and verified on a desk: response curves and
base rates live in a shipped data file, and a brute-force oracle evaluates
the same formula, which is what makes end-to-end speedup checks honest.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import random
import subprocess
import time as time_mod
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Protocol, Sequence, Union

from .core import (
    Configuration,
    ParameterSpec,
    SystemFacts,
    TrialResult,
    validate_configuration,
)
from .resources import data_json

log = logging.getLogger(__name__)

MB = 1e6


class BackendError(Exception):
    """A backend operation (apply, reset, execute) failed."""


# ---------------------------------------------------------------------------
# Workloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimWorkload:
    """Shape of an I/O workload as the simulated file system sees it."""

    data_bytes: int
    transfer_bytes: int
    seq_fraction: float
    file_count: int
    shared_file: bool
    meta_ops: int
    read_fraction: float

    def __post_init__(self) -> None:
        for name in ("data_bytes", "transfer_bytes", "file_count", "meta_ops"):
            if getattr(self, name) < 0:
                raise ValueError(f"SimWorkload.{name} must be >= 0")
        for name in ("seq_fraction", "read_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"SimWorkload.{name} must be in [0, 1]")
        if self.data_bytes > 0 and self.transfer_bytes > self.data_bytes:
            raise ValueError("transfer_bytes must not exceed data_bytes")

    def to_dict(self) -> dict:
        return {
            "data_bytes": self.data_bytes,
            "transfer_bytes": self.transfer_bytes,
            "seq_fraction": self.seq_fraction,
            "file_count": self.file_count,
            "shared_file": self.shared_file,
            "meta_ops": self.meta_ops,
            "read_fraction": self.read_fraction,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimWorkload":
        return cls(
            data_bytes=int(d["data_bytes"]),
            transfer_bytes=int(d["transfer_bytes"]),
            seq_fraction=float(d["seq_fraction"]),
            file_count=int(d["file_count"]),
            shared_file=bool(d["shared_file"]),
            meta_ops=int(d["meta_ops"]),
            read_fraction=float(d["read_fraction"]),
        )


@dataclass
class WorkloadSpec:
    """A runnable workload: launch command plus the sim descriptor."""

    name: str
    launch_template: str = "{name}"
    processes: int = 1
    nodes: int = 1
    env: dict[str, str] = field(default_factory=dict)
    descriptor: Optional[SimWorkload] = None

    def __post_init__(self) -> None:
        if self.processes < 1:
            raise ValueError("processes must be >= 1")
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        try:
            self.render_launch()
        except KeyError as exc:
            raise ValueError(f"launch_template references unknown placeholder {exc}")

    def render_launch(self) -> str:
        return self.launch_template.format(
            name=self.name, processes=self.processes, nodes=self.nodes
        )

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "launch_template": self.launch_template,
            "processes": self.processes,
            "nodes": self.nodes,
            "env": dict(self.env),
        }
        if self.descriptor is not None:
            out["descriptor"] = self.descriptor.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorkloadSpec":
        descriptor = d.get("descriptor")
        return cls(
            name=d["name"],
            launch_template=d.get("launch_template", "{name}"),
            processes=int(d.get("processes", 1)),
            nodes=int(d.get("nodes", 1)),
            env=dict(d.get("env", {})),
            descriptor=SimWorkload.from_dict(descriptor) if descriptor else None,
        )


def load_workload(path: Union[str, os.PathLike]) -> WorkloadSpec:
    with open(path, encoding="utf-8") as fh:
        return WorkloadSpec.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# The simulated file system model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaturatingCurve:
    """gain(x) = 1 + amplitude * (1 - e^(-x / tau)), optionally rescaled."""

    amplitude: float
    tau: float

    def __post_init__(self) -> None:
        if self.amplitude < 0 or self.tau <= 0:
            raise ValueError("curve needs amplitude >= 0 and tau > 0")

    def gain(self, x: float, scale: float = 1.0) -> float:
        return 1.0 + self.amplitude * scale * (1.0 - math.exp(-x / self.tau))


@dataclass(frozen=True)
class AlignCurve:
    """Peak 1.0 when stripe and transfer sizes match, decaying in log2
    distance down to a positive floor."""

    floor: float
    width: float

    def __post_init__(self) -> None:
        if not 0 < self.floor <= 1 or self.width <= 0:
            raise ValueError("align curve needs 0 < floor <= 1 and width > 0")

    def gain(self, stripe_bytes: float, transfer_bytes: float) -> float:
        if stripe_bytes <= 0 or transfer_bytes <= 0:
            return self.floor
        d = abs(math.log2(stripe_bytes) - math.log2(transfer_bytes))
        return max(self.floor, math.exp(-((d / self.width) ** 2)))


@dataclass(frozen=True)
class SmallFileCurve:
    """Striping penalty that grows as the mean file size falls below the
    threshold: 1 / (1 + strength * (stripes - 1) * small_factor)."""

    strength: float
    threshold_bytes: float

    def __post_init__(self) -> None:
        if self.strength < 0 or self.threshold_bytes <= 0:
            raise ValueError("smallfile curve needs strength >= 0, threshold > 0")

    def penalty(self, stripes: float, avg_file_bytes: float) -> float:
        small = min(1.0, max(0.0, 1.0 - avg_file_bytes / self.threshold_bytes))
        return 1.0 / (1.0 + self.strength * (stripes - 1.0) * small)


@dataclass(frozen=True)
class SimPfsModel:
    base_bw_mb_s: float
    meta_rate_ops_s: float
    stripe_parallel: SaturatingCurve
    rpc_concurrency: SaturatingCurve
    rpc_pages: SaturatingCurve
    readahead: SaturatingCurve  # tau in megabytes of effective window
    statahead: SaturatingCurve
    mdc_concurrency: SaturatingCurve
    stripe_align: AlignCurve
    smallfile: SmallFileCurve
    statahead_file_scale: float
    concurrent_file_cap: int
    defaults: dict[str, int]
    noise_sigma: float = 0.0
    seed: int = 1
    version: int = 1

    def __post_init__(self) -> None:
        if self.base_bw_mb_s <= 0 or self.meta_rate_ops_s <= 0:
            raise ValueError("base rates must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimPfsModel":
        curves = d["curves"]

        def sat(name):
            return SaturatingCurve(curves[name]["amplitude"], curves[name]["tau"])

        return cls(
            base_bw_mb_s=float(d["base_bw_mb_s"]),
            meta_rate_ops_s=float(d["meta_rate_ops_s"]),
            stripe_parallel=sat("stripe_parallel"),
            rpc_concurrency=sat("rpc_concurrency"),
            rpc_pages=sat("rpc_pages"),
            readahead=sat("readahead"),
            statahead=sat("statahead"),
            mdc_concurrency=sat("mdc_concurrency"),
            stripe_align=AlignCurve(
                curves["stripe_align"]["floor"], curves["stripe_align"]["width"]
            ),
            smallfile=SmallFileCurve(
                curves["smallfile"]["strength"], curves["smallfile"]["threshold_bytes"]
            ),
            statahead_file_scale=float(d["statahead_file_scale"]),
            concurrent_file_cap=int(d["concurrent_file_cap"]),
            defaults={k: int(v) for k, v in d["defaults"].items()},
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            seed=int(d.get("seed", 1)),
            version=int(d.get("version", 1)),
        )

    def with_noise(self, sigma: float, seed: Optional[int] = None) -> "SimPfsModel":
        return replace(
            self, noise_sigma=sigma, seed=self.seed if seed is None else seed
        )

    def without_noise(self) -> "SimPfsModel":
        return replace(self, noise_sigma=0.0)


def load_sim_model(path: Optional[Union[str, os.PathLike]] = None) -> SimPfsModel:
    """The shipped model definition, or one from an explicit JSON file."""
    if path is None:
        return SimPfsModel.from_dict(data_json("sim_model"))
    with open(path, encoding="utf-8") as fh:
        return SimPfsModel.from_dict(json.load(fh))


def default_facts() -> SystemFacts:
    return SystemFacts.from_dict(data_json("sim_facts"))


def _config_values(config: Union[Configuration, Mapping[str, int]]) -> Mapping[str, int]:
    if isinstance(config, Configuration):
        return config.values
    return config


def sim_time(
    model: SimPfsModel,
    config: Union[Configuration, Mapping[str, int]],
    workload: SimWorkload,
    ost_count: int,
    rng: Optional[random.Random] = None,
) -> float:
    """Modeled wall seconds: a data phase and a metadata phase, each divided
    by the product of its parameter response gains.  With ``noise_sigma``
    zero this is a pure function of (config, workload)."""
    values = _config_values(config)

    def knob(name: str) -> float:
        return float(values.get(name, model.defaults[name]))

    data_phase = 0.0
    if workload.data_bytes > 0:
        stripes = min(knob("stripe_count"), float(ost_count))
        parallel = model.stripe_parallel.gain(stripes - 1.0)
        align = model.stripe_align.gain(knob("stripe_size"), workload.transfer_bytes)
        avg_file = workload.data_bytes / max(workload.file_count, 1)
        penalty = model.smallfile.penalty(stripes, avg_file)
        rpc_gain = model.rpc_concurrency.gain(
            knob("max_rpcs_in_flight")
        ) * model.rpc_pages.gain(knob("max_pages_per_rpc"))
        concurrent = (
            1.0
            if workload.shared_file
            else float(min(workload.file_count, model.concurrent_file_cap))
        )
        window_mb = min(
            knob("max_read_ahead_mb"), knob("max_read_ahead_per_file_mb") * concurrent
        )
        ra_scale = workload.seq_fraction * workload.read_fraction
        ra_gain = model.readahead.gain(window_mb, ra_scale)
        bw = model.base_bw_mb_s * parallel * align * rpc_gain * ra_gain * penalty
        data_phase = workload.data_bytes / MB / bw

    meta_phase = 0.0
    if workload.meta_ops > 0:
        meta_scale = workload.file_count / (
            workload.file_count + model.statahead_file_scale
        )
        sa_gain = model.statahead.gain(knob("statahead_max"), meta_scale)
        mdc_gain = model.mdc_concurrency.gain(knob("mdc_max_rpcs_in_flight"))
        meta_phase = workload.meta_ops / (model.meta_rate_ops_s * sa_gain * mdc_gain)

    total = data_phase + meta_phase
    if model.noise_sigma > 0:
        if rng is None:
            rng = random.Random(model.seed)
        total *= rng.lognormvariate(0.0, model.noise_sigma)
    return total


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class ExecutionBackend(Protocol):
    def apply_configuration(self, config: Union[Configuration, Mapping[str, int]]) -> None: ...

    def reset_environment(self) -> None: ...

    def execute(self, workload: WorkloadSpec) -> float: ...

    def collect_trace(self, workload: WorkloadSpec) -> bytes: ...

    def default_configuration(self) -> dict[str, int]: ...


class SimBackend:
    """Runs workloads against the analytic model.  Applying a configuration
    stores values; resetting clears the warm-cache flag; executing draws one
    noise variate from the session RNG."""

    def __init__(self, model: SimPfsModel, facts: SystemFacts):
        self.model = model
        self.facts = facts
        self.applied: dict[str, int] = dict(model.defaults)
        self.rng = random.Random(model.seed)
        self.cache_warm = False
        self.reset_count = 0
        self.execute_count = 0

    def default_configuration(self) -> dict[str, int]:
        return dict(self.model.defaults)

    def apply_configuration(self, config: Union[Configuration, Mapping[str, int]]) -> None:
        values = _config_values(config)
        unknown = sorted(set(values) - set(self.model.defaults))
        if unknown:
            raise BackendError(f"unknown parameter {unknown[0]!r}")
        merged = dict(self.model.defaults)
        merged.update({k: int(v) for k, v in values.items()})
        self.applied = merged

    def reset_environment(self) -> None:
        self.cache_warm = False
        self.reset_count += 1

    def execute(self, workload: WorkloadSpec) -> float:
        if workload.descriptor is None:
            raise BackendError(f"workload {workload.name!r} has no sim descriptor")
        self.execute_count += 1
        self.cache_warm = True
        return sim_time(
            self.model,
            self.applied,
            workload.descriptor,
            self.facts.ost_count,
            rng=self.rng,
        )

    def collect_trace(self, workload: WorkloadSpec) -> bytes:
        if workload.descriptor is None:
            raise BackendError(f"workload {workload.name!r} has no sim descriptor")
        return synthesize_trace(workload).encode("utf-8")


def _spread(total: int, bins: int) -> list[int]:
    base, extra = divmod(total, bins)
    return [base + (1 if i < extra else 0) for i in range(bins)]


def synthesize_trace(workload: WorkloadSpec) -> str:
    """A darshan-style text dump whose counter totals match the descriptor
    exactly; per-file rows are capped so huge file counts stay compact."""
    w = workload.descriptor
    if w is None:
        raise BackendError(f"workload {workload.name!r} has no sim descriptor")
    data_ops = math.ceil(w.data_bytes / w.transfer_bytes) if w.transfer_bytes else 0
    reads = round(data_ops * w.read_fraction)
    writes = data_ops - reads
    bytes_read = round(w.data_bytes * w.read_fraction)
    bytes_written = w.data_bytes - bytes_read
    opens = min(w.meta_ops, max(w.file_count, 1))
    stats = w.meta_ops - opens

    lines = [
        "# simulated trace",
        f"# exe: {workload.render_launch()}",
        f"# nprocs: {workload.processes}",
    ]

    def emit(rank, record_id, file_name, counters):
        for counter, value in counters.items():
            lines.append(
                f"POSIX {rank} {record_id} {counter} {value} {file_name}"
            )

    if w.shared_file:
        emit(
            -1,
            "1",
            f"/sim/{workload.name}/shared.dat",
            {
                "POSIX_OPENS": opens,
                "POSIX_STATS": stats,
                "POSIX_READS": reads,
                "POSIX_WRITES": writes,
                "POSIX_SEQ_READS": round(reads * w.seq_fraction),
                "POSIX_SEQ_WRITES": round(writes * w.seq_fraction),
                "POSIX_BYTES_READ": bytes_read,
                "POSIX_BYTES_WRITTEN": bytes_written,
            },
        )
        return "\n".join(lines) + "\n"

    rows = max(1, min(w.file_count, 256))
    per = {
        "POSIX_OPENS": _spread(opens, rows),
        "POSIX_STATS": _spread(stats, rows),
        "POSIX_READS": _spread(reads, rows),
        "POSIX_WRITES": _spread(writes, rows),
        "POSIX_SEQ_READS": _spread(round(reads * w.seq_fraction), rows),
        "POSIX_SEQ_WRITES": _spread(round(writes * w.seq_fraction), rows),
        "POSIX_BYTES_READ": _spread(bytes_read, rows),
        "POSIX_BYTES_WRITTEN": _spread(bytes_written, rows),
    }
    for i in range(rows):
        emit(
            i % workload.processes,
            str(1000 + i),
            f"/sim/{workload.name}/f{i:04d}.dat",
            {name: series[i] for name, series in per.items()},
        )
    return "\n".join(lines) + "\n"


class ShellBackend:
    """Drives a real system: one command per parameter, four reset hooks,
    and a launch template timed with a wall clock."""

    def __init__(
        self,
        param_commands: Mapping[str, str],
        reset_hooks: Sequence[str],
        launch_template: str,
        trace_path: Optional[str] = None,
        defaults: Optional[Mapping[str, int]] = None,
        timeout_s: float = 3600.0,
    ):
        self.param_commands = dict(param_commands)
        self.reset_hooks = list(reset_hooks)
        self.launch_template = launch_template
        self.trace_path = trace_path
        self.defaults = dict(defaults or {})
        self.timeout_s = timeout_s

    @classmethod
    def from_config_file(cls, path: Union[str, os.PathLike]) -> "ShellBackend":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        hooks = d.get("reset_hooks", [])
        if len(hooks) != 4:
            raise ValueError(f"expected exactly 4 reset_hooks, got {len(hooks)}")
        return cls(
            param_commands=d.get("param_commands", {}),
            reset_hooks=hooks,
            launch_template=d["launch_template"],
            trace_path=d.get("trace_path"),
            defaults=d.get("defaults", {}),
            timeout_s=float(d.get("timeout_s", 3600.0)),
        )

    def default_configuration(self) -> dict[str, int]:
        return dict(self.defaults)

    def _run(self, command: str, env: Optional[Mapping[str, str]] = None):
        merged = dict(os.environ)
        if env:
            merged.update(env)
        return subprocess.run(
            command,
            shell=True,
            capture_output=True,
            text=True,
            env=merged,
            timeout=self.timeout_s,
        )

    def apply_configuration(self, config: Union[Configuration, Mapping[str, int]]) -> None:
        for name, value in _config_values(config).items():
            template = self.param_commands.get(name)
            if template is None:
                raise BackendError(f"no command template for parameter {name!r}")
            command = template.format(value=value)
            proc = self._run(command)
            if proc.returncode != 0:
                raise BackendError(
                    f"setting {name} failed (exit {proc.returncode}): "
                    f"{proc.stderr.strip()}"
                )

    def reset_environment(self) -> None:
        if not self.reset_hooks:
            raise BackendError("reset hooks unconfigured")
        for i, hook in enumerate(self.reset_hooks, 1):
            proc = self._run(hook)
            if proc.returncode != 0:
                raise BackendError(
                    f"reset step {i} failed (exit {proc.returncode}): "
                    f"{proc.stderr.strip()}"
                )

    def execute(self, workload: WorkloadSpec) -> float:
        command = self.launch_template.format(
            name=workload.name, processes=workload.processes, nodes=workload.nodes
        )
        start = time_mod.perf_counter()
        proc = self._run(command, env=workload.env)
        elapsed = time_mod.perf_counter() - start
        if proc.returncode != 0:
            raise BackendError(
                f"workload failed (exit {proc.returncode}): {proc.stderr.strip()}"
            )
        return elapsed

    def collect_trace(self, workload: WorkloadSpec) -> bytes:
        if not self.trace_path:
            raise BackendError("trace_path unconfigured")
        try:
            with open(self.trace_path, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise BackendError(f"cannot read trace: {exc}")


# ---------------------------------------------------------------------------
# Trials and the oracle
# ---------------------------------------------------------------------------


def run_trials(backend: ExecutionBackend, workload: WorkloadSpec, n: int = 8) -> TrialResult:
    """n sequential executions, each preceded by a reset.  Failures discard
    partial results; a confidence interval needs n >= 2."""
    if n < 2:
        raise ValueError("n must be >= 2: a single run has no confidence interval")
    times = []
    for _ in range(n):
        backend.reset_environment()
        times.append(backend.execute(workload))
    return TrialResult.from_times(times)


def oracle_optimum(
    model: SimPfsModel,
    workload: SimWorkload,
    grid: Mapping[str, Sequence[int]],
    facts: SystemFacts,
    specs: Optional[list[ParameterSpec]] = None,
) -> tuple[dict[str, int], float]:
    """Exhaustive noise-free minimum of ``sim_time`` over the grid.

    When ``specs`` is given, combinations violating the resolved ranges
    (including cross-parameter bounds) are skipped.  Ties break toward the
    lexicographically smallest value tuple in sorted parameter order.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must list at least one value per parameter")
    names = sorted(grid)
    quiet = model.without_noise()
    best: Optional[tuple[float, tuple[int, ...]]] = None
    evaluated = 0
    for combo in itertools.product(*(grid[name] for name in names)):
        config = dict(quiet.defaults)
        config.update(zip(names, combo))
        if specs is not None:
            if validate_configuration(Configuration(values=config), specs, facts):
                continue
        evaluated += 1
        t = sim_time(quiet, config, workload, facts.ost_count)
        key = (t, combo)
        if best is None or key < best:
            best = key
    if best is None:
        raise ValueError("no grid combination satisfies the parameter ranges")
    log.debug("oracle evaluated %d combinations", evaluated)
    config = dict(quiet.defaults)
    config.update(zip(names, best[1]))
    return config, best[0]
