#!/usr/bin/env python3
"""Regenerate the test fixtures under tests/fixtures/.

Fixtures are committed; this script exists so their provenance is a short
readable program instead of a pile of opaque files.  Run from the repo
root:

    python3 scripts/make_fixtures.py
"""

import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"


# ---------------------------------------------------------------------------
# Trace dumps
# ---------------------------------------------------------------------------


def darshan_lines(header, records):
    lines = [f"# {h}" for h in header]
    for module, rank, record_id, file_name, counters in records:
        for counter, value in counters.items():
            lines.append(
                f"{module}\t{rank}\t{record_id}\t{counter}\t{value}"
                f"\t{file_name}\t/scratch\tlustre"
            )
    return "\n".join(lines) + "\n"


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path.relative_to(ROOT)}")


def make_traces():
    out = FIXTURES / "traces"
    keys = {}

    # one big file read sequentially by 50 ranks; a single shared row
    transfer = 16 * 1024 * 1024
    reads = 1200
    bytes_read = reads * transfer
    write(
        out / "large_seq.darshan.txt",
        darshan_lines(
            [
                "darshan log version: 3.41",
                "exe: ./seq_read_bench /scratch/big/input.dat",
                "nprocs: 50",
                "run time: 42",
            ],
            [
                (
                    "POSIX",
                    -1,
                    "4370796936300436411",
                    "/scratch/big/input.dat",
                    {
                        "POSIX_OPENS": 50,
                        "POSIX_STATS": 2,
                        "POSIX_READS": reads,
                        "POSIX_WRITES": 0,
                        "POSIX_SEQ_READS": reads,
                        "POSIX_SEQ_WRITES": 0,
                        "POSIX_BYTES_READ": bytes_read,
                        "POSIX_BYTES_WRITTEN": 0,
                        "POSIX_MAX_BYTE_READ": bytes_read - 1,
                        "POSIX_MAX_BYTE_WRITTEN": 0,
                    },
                )
            ],
        ),
    )
    keys["large_seq"] = {
        "rows": 1,
        "bytes_read": bytes_read,
        "reads": reads,
        "mean_transfer_bytes": transfer,
        "seq_read_fraction": 1.0,
        "classification": "data",
    }

    # many tiny files, stat-dominated; 4 ranks each touching 50 files
    records = []
    small_size = 2048
    n_ranks, files_per_rank = 4, 50
    for rank in range(n_ranks):
        for i in range(files_per_rank):
            idx = rank * files_per_rank + i
            records.append(
                (
                    "POSIX",
                    rank,
                    str(9000000000000000000 + idx),
                    f"/scratch/meta/f{idx:04d}.dat",
                    {
                        "POSIX_OPENS": 2,
                        "POSIX_STATS": 10,
                        "POSIX_READS": 0,
                        "POSIX_WRITES": 1,
                        "POSIX_SEQ_WRITES": 1,
                        "POSIX_BYTES_READ": 0,
                        "POSIX_BYTES_WRITTEN": small_size,
                        "POSIX_MAX_BYTE_WRITTEN": small_size - 1,
                    },
                )
            )
    write(
        out / "metadata_heavy.darshan.txt",
        darshan_lines(
            [
                "darshan log version: 3.41",
                "exe: ./mdtest_like -n 50",
                "nprocs: 4",
                "run time: 31",
            ],
            records,
        ),
    )
    n_files = n_ranks * files_per_rank
    meta_ops = n_files * (2 + 10)
    data_ops = n_files * 1
    keys["metadata_heavy"] = {
        "rows": n_files,
        "files": n_files,
        "bytes_written": n_files * small_size,
        "metadata_data_ratio": meta_ops / data_ops,
        "file_size_quartiles": [small_size, small_size, small_size],
        "classification": "metadata",
    }

    # a checkpoint-style mix: a flood of small files plus a few huge ones
    records = []
    for idx in range(400):
        records.append(
            (
                "POSIX",
                idx % 4,
                str(8000000000000000000 + idx),
                f"/scratch/mix/small_{idx:04d}.dat",
                {
                    "POSIX_OPENS": 2,
                    "POSIX_STATS": 28,
                    "POSIX_READS": 0,
                    "POSIX_WRITES": 1,
                    "POSIX_SEQ_WRITES": 1,
                    "POSIX_BYTES_READ": 0,
                    "POSIX_BYTES_WRITTEN": 2048,
                },
            )
        )
    big_writes = 512
    big_bytes = big_writes * 1024 * 1024  # 512 MiB apiece
    for idx in range(8):
        records.append(
            (
                "POSIX",
                idx % 4,
                str(7000000000000000000 + idx),
                f"/scratch/mix/ckpt_{idx}.dat",
                {
                    "POSIX_OPENS": 1,
                    "POSIX_STATS": 1,
                    "POSIX_READS": 0,
                    "POSIX_WRITES": big_writes,
                    "POSIX_SEQ_WRITES": big_writes,
                    "POSIX_BYTES_READ": 0,
                    "POSIX_BYTES_WRITTEN": big_bytes,
                },
            )
        )
    write(
        out / "mixed.darshan.txt",
        darshan_lines(
            [
                "darshan log version: 3.41",
                "exe: ./checkpoint_mix",
                "nprocs: 4",
                "run time: 77",
            ],
            records,
        ),
    )
    meta_ops = 400 * (2 + 28) + 8 * (1 + 1)
    data_ops = 400 * 1 + 8 * big_writes
    total_bytes = 400 * 2048 + 8 * big_bytes
    keys["mixed"] = {
        "rows": 408,
        "total_bytes": total_bytes,
        "metadata_data_ratio": meta_ops / data_ops,
        "classification": "mixed",
    }

    # the same two-row content in both accepted formats
    csv_lines = ["module,rank,record_id,file,counter,value"]
    txt_records = []
    for rank, fname, counters in [
        (0, "/out/a.dat", {"POSIX_OPENS": 1, "POSIX_WRITES": 4, "POSIX_BYTES_WRITTEN": 4096}),
        (1, "/out/b.dat", {"POSIX_OPENS": 2, "POSIX_WRITES": 6, "POSIX_BYTES_WRITTEN": 8192}),
    ]:
        record_id = str(100 + rank)
        txt_records.append(("POSIX", rank, record_id, fname, counters))
        for counter, value in counters.items():
            csv_lines.append(f"POSIX,{rank},{record_id},{fname},{counter},{value}")
    write(out / "small.csv", "\n".join(csv_lines) + "\n")
    write(
        out / "small.darshan.txt",
        darshan_lines(["exe: ./tiny", "nprocs: 2"], txt_records),
    )

    write(out / "answer_keys.json", json.dumps(keys, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Sim workloads
# ---------------------------------------------------------------------------


def make_workloads():
    out = FIXTURES / "workloads"
    workloads = {
        # many tiny files, dominated by opens and stats
        "metadata_heavy": {
            "name": "metadata_heavy",
            "launch_template": "run_{name} -np {processes}",
            "processes": 20,
            "nodes": 5,
            "env": {},
            "descriptor": {
                "data_bytes": 40_960_000,
                "transfer_bytes": 2048,
                "seq_fraction": 0.1,
                "file_count": 20000,
                "shared_file": False,
                "meta_ops": 480_000,
                "read_fraction": 0.5,
            },
        },
        # one large shared file read sequentially
        "large_seq": {
            "name": "large_seq",
            "launch_template": "run_{name} -np {processes}",
            "processes": 50,
            "nodes": 5,
            "env": {},
            "descriptor": {
                "data_bytes": 20_132_659_200,
                "transfer_bytes": 16_777_216,
                "seq_fraction": 1.0,
                "file_count": 1,
                "shared_file": True,
                "meta_ops": 52,
                "read_fraction": 1.0,
            },
        },
        # checkpoint mix: a metadata flood plus real write volume
        "mixed": {
            "name": "mixed",
            "launch_template": "run_{name} -np {processes}",
            "processes": 4,
            "nodes": 2,
            "env": {},
            "descriptor": {
                "data_bytes": 4_294_967_296,
                "transfer_bytes": 1_048_576,
                "seq_fraction": 1.0,
                "file_count": 4096,
                "shared_file": False,
                "meta_ops": 122_880,
                "read_fraction": 0.0,
            },
        },
        # small workload for high-volume fuzz runs
        "tiny": {
            "name": "tiny",
            "launch_template": "run_{name}",
            "processes": 2,
            "nodes": 1,
            "env": {},
            "descriptor": {
                "data_bytes": 8_388_608,
                "transfer_bytes": 1_048_576,
                "seq_fraction": 1.0,
                "file_count": 4,
                "shared_file": False,
                "meta_ops": 64,
                "read_fraction": 0.5,
            },
        },
    }
    for stem, payload in workloads.items():
        write(out / f"{stem}.json", json.dumps(payload, indent=2) + "\n")


def make_rule_fixtures():
    """Rule-merge inputs: a contradiction pair and a near-duplicate pair."""
    out = FIXTURES / "rules"
    out.mkdir(parents=True, exist_ok=True)

    def rule(parameter, description, context):
        return {
            "Parameter": parameter,
            "Rule Description": description,
            "Tuning Context": context,
            "status": "active",
            "group": None,
        }

    contradiction_old = [
        rule(
            "max_rpcs_in_flight",
            "Increase max_rpcs_in_flight to overlap bulk transfers.",
            "High-volume sequential data transfers.",
        )
    ]
    contradiction_delta = [
        rule(
            "max_rpcs_in_flight",
            "Decrease max_rpcs_in_flight so storage servers are not overwhelmed.",
            "High-volume sequential data transfers.",
        )
    ]
    near_dup_old = [
        rule(
            "stripe_size",
            "Match stripe_size to the dominant transfer size so requests "
            "stay stripe-aligned.",
            "Large sequential transfers.",
        )
    ]
    near_dup_delta = [
        rule(
            "stripe_size",
            "Set stripe_size equal to the application's typical request size.",
            "Large sequential transfers.",
        )
    ]
    for stem, payload in {
        "contradiction_old": contradiction_old,
        "contradiction_delta": contradiction_delta,
        "near_dup_old": near_dup_old,
        "near_dup_delta": near_dup_delta,
    }.items():
        write(out / f"{stem}.json", json.dumps(payload, indent=2) + "\n")


MINI_MANUAL = """\
Client Tuning Guide
===================

This guide covers the client-side controls that shape I/O behavior on the
cluster file system. Each control lives under the client control tree and
takes effect for newly opened files unless noted otherwise.

File striping
-------------

Every file is divided into stripes that are spread across the object
storage targets. Two controls govern the layout.

The stripe_size control sets the number of bytes written to one target
before the client moves to the next. It accepts any power of two between
64 KiB and 16 MiB; the shipped default is 1 MiB. Transfers that match the
stripe size avoid read-modify-write cycles on the servers, so align it
with the application's dominant request size. Small values fragment large
requests; large values concentrate load on single targets.

The stripe_count control sets how many targets one file is striped
across. It ranges from 1 up to the number of object storage targets in
the file system. Wide striping raises aggregate bandwidth for large
shared files but adds per-target bookkeeping that penalizes small files,
which are best left on a single target.

Data transfer pipeline
----------------------

The max_rpcs_in_flight control caps the number of concurrent bulk data
requests a client keeps outstanding to one storage target. Valid settings
run from 1 to 256, with a default of 8. Deeper pipelines hide network
latency and raise throughput for streaming transfers until the network
saturates; past that point extra requests only add queueing.

Checksums on bulk transfers are governed by the checksums control, a
simple on/off toggle. Leaving it on protects data in transit at a small
CPU cost; most sites keep the default.

For wire-level debugging, the debug_rpc_trace control sets the request
log verbosity, from 0 (silent) to 16 (every request and reply). It
exists for diagnosing protocol problems and has no effect on
steady-state performance; leave it at 0 outside support sessions.

Read-ahead
----------

Sequential read performance depends on the client read-ahead windows.

The max_read_ahead_mb control sets the total read-ahead window, in
megabytes, shared by all files on the client. It may be set anywhere from
0 (read-ahead disabled) up to half of the client's memory, expressed as
system_memory_mb in the control tree. Streaming readers profit from a
window large enough to cover the data they are about to touch; random
readers gain nothing and waste cache.

The max_read_ahead_per_file_mb control limits how much of that window a
single file may consume. Its upper bound is half of max_read_ahead_mb,
and 0 again disables per-file read-ahead. Raise it when a few large files
dominate the read traffic so one stream can use a meaningful share of
the global window.

Cache behavior during memory pressure is influenced by max_cached_pct,
which is described in the server administration appendix and not covered
by this guide.

Metadata
--------

Directory-scan heavy jobs are often bound by attribute lookups rather
than data movement. The statahead_max control sets how many directory
entries the client prefetches attributes for, ahead of a scanning
process. It accepts values from 0 (disabled) to 8192. Raising it batches
stat traffic and sharply reduces per-entry round trips for workloads that
open or stat many small files in sequence.

Identification controls such as ost_conn_uuid report the identity of the
storage target connection. They are informational.
"""

CANDIDATES = """\
# client control tree snapshot: <path> <rw|ro>
/ctl/client/lov/stripe_size rw
/ctl/client/lov/stripe_count rw
/ctl/client/osc/max_rpcs_in_flight rw
/ctl/client/osc/checksums rw
/ctl/client/debug/debug_rpc_trace rw
/ctl/client/llite/max_read_ahead_mb rw
/ctl/client/llite/max_read_ahead_per_file_mb rw
/ctl/client/llite/max_cached_pct rw
/ctl/client/llite/statahead_max rw
/ctl/client/osc/ost_conn_uuid ro
"""


def manual_answer_key():
    """The six parameters the manual documents well enough to extract."""
    choices = [65536 * (2**i) for i in range(9)]  # 64 KiB .. 16 MiB
    return [
        {
            "name": "stripe_size",
            "path": "/ctl/client/lov/stripe_size",
            "description": "Bytes written to one storage target before the "
            "client moves to the next; align with the dominant request size.",
            "io_impact": "Aligned transfers avoid read-modify-write cycles on "
            "the servers.",
            "range": {"kind": "choices", "values": choices},
            "is_binary": False,
            "impact": "high",
        },
        {
            "name": "stripe_count",
            "path": "/ctl/client/lov/stripe_count",
            "description": "Number of storage targets one file is striped "
            "across.",
            "io_impact": "Wide striping raises aggregate bandwidth for large "
            "shared files but penalizes small files.",
            "range": {"kind": "expr", "min_expr": "1", "max_expr": "ost_count"},
            "is_binary": False,
            "impact": "high",
        },
        {
            "name": "max_rpcs_in_flight",
            "path": "/ctl/client/osc/max_rpcs_in_flight",
            "description": "Concurrent bulk data requests kept outstanding to "
            "one storage target.",
            "io_impact": "Deeper pipelines hide network latency for streaming "
            "transfers.",
            "range": {"kind": "static_int", "min": 1, "max": 256, "step": 1},
            "is_binary": False,
            "impact": "high",
        },
        {
            "name": "max_read_ahead_mb",
            "path": "/ctl/client/llite/max_read_ahead_mb",
            "description": "Total client read-ahead window in megabytes shared "
            "by all files.",
            "io_impact": "Streaming readers profit when the window covers "
            "upcoming data.",
            "range": {
                "kind": "expr",
                "min_expr": "0",
                "max_expr": "system_memory_mb / 2",
            },
            "is_binary": False,
            "impact": "high",
        },
        {
            "name": "max_read_ahead_per_file_mb",
            "path": "/ctl/client/llite/max_read_ahead_per_file_mb",
            "description": "Share of the global read-ahead window one file may "
            "consume; its ceiling is half of max_read_ahead_mb.",
            "io_impact": "Lets a few large sequential files use a meaningful "
            "share of the window.",
            "range": {
                "kind": "expr",
                "min_expr": "0",
                "max_expr": "max_read_ahead_mb / 2",
            },
            "is_binary": False,
            "impact": "high",
        },
        {
            "name": "statahead_max",
            "path": "/ctl/client/llite/statahead_max",
            "description": "Directory entries whose attributes are prefetched "
            "ahead of a scanning process.",
            "io_impact": "Batches stat traffic for jobs that open or stat many "
            "small files in sequence.",
            "range": {"kind": "static_int", "min": 0, "max": 8192, "step": 1},
            "is_binary": False,
            "impact": "high",
        },
    ]


def make_manual():
    out = FIXTURES / "manual"
    out.mkdir(parents=True, exist_ok=True)
    write(out / "mini_manual.txt", MINI_MANUAL)
    write(out / "candidates.txt", CANDIDATES)
    write(out / "answer_key.json", json.dumps(manual_answer_key(), indent=2) + "\n")


def main():
    make_traces()
    make_workloads()
    make_rule_fixtures()
    make_manual()


if __name__ == "__main__":
    main()
