#!/usr/bin/env python3
"""Freeze the grid-search optimum for each shipped workload fixture.

Writes tests/fixtures/oracle_keys.json with, per workload: the searched
grid, the best configuration, its simulated time, the default-configuration
time, and the implied speedup.  The acceptance suite compares tuned
sessions against these frozen numbers, so rerun this script only when the
simulator model or the workload fixtures change, and review the diff.
"""

from __future__ import annotations

import json
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from pfstuner.core import SystemFacts, specs_from_json
from pfstuner.resources import data_json
from pfstuner.runner import SimPfsModel, load_workload, oracle_optimum, sim_time

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# One shared grid keeps the oracle honest across fixtures: it spans the
# extremes of every knob plus the values the fixtures make interesting.
GRID = {
    "stripe_size": [65536, 1048576, 16777216, 268435456],
    "stripe_count": [1, 2, 5],
    "max_rpcs_in_flight": [8, 64, 256],
    "max_pages_per_rpc": [256, 1024],
    "max_read_ahead_mb": [64, 32768],
    "max_read_ahead_per_file_mb": [32, 16384],
    "statahead_max": [32, 2048, 8192],
    "mdc_max_rpcs_in_flight": [8, 64, 256],
}

WORKLOADS = ("metadata_heavy", "large_seq", "mixed")


def main() -> int:
    model = SimPfsModel.from_dict(data_json("sim_model")).without_noise()
    facts = SystemFacts.from_dict(data_json("sim_facts"))
    specs = specs_from_json(json.dumps(data_json("sim_parameters")))

    keys = {}
    for name in WORKLOADS:
        workload = load_workload(FIXTURES / "workloads" / f"{name}.json")
        assert workload.descriptor is not None
        started = time.perf_counter()
        best_config, best_time = oracle_optimum(
            model, workload.descriptor, GRID, facts, specs
        )
        elapsed = time.perf_counter() - started
        default_time = sim_time(model, model.defaults, workload.descriptor, facts.ost_count)
        speedup = default_time / best_time
        keys[name] = {
            "grid": GRID,
            "best_values": best_config,
            "best_time_s": best_time,
            "default_time_s": default_time,
            "best_speedup": speedup,
        }
        print(
            f"{name}: default {default_time:.6g} s -> best {best_time:.6g} s "
            f"({speedup:.6g}x), search {elapsed:.2f} s"
        )
        print(f"  best: {json.dumps(best_config, sort_keys=True)}")

    out = FIXTURES / "oracle_keys.json"
    out.write_text(json.dumps(keys, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
