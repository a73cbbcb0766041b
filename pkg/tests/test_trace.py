"""Trace parsing, the query toolset, and report generation."""

import json
import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pfstuner.agent import CallbackProvider, ToolCall, assistant
from pfstuner.trace import (
    IOReport,
    TraceError,
    answer_followup,
    classify_workload,
    compute_highlights,
    counter_description,
    generate_io_report,
    load_trace,
    parse_darshan_text,
    parse_trace_csv,
    render_highlights,
    serialize_counters,
    table_tools,
)


def load_fixture(fixtures_dir, name):
    return load_trace((fixtures_dir / "traces" / name).read_bytes())


@pytest.fixture
def keys(fixtures_dir):
    return json.loads((fixtures_dir / "traces" / "answer_keys.json").read_text())


@pytest.fixture
def large_seq(fixtures_dir):
    return load_fixture(fixtures_dir, "large_seq.darshan.txt")


@pytest.fixture
def metadata_heavy(fixtures_dir):
    return load_fixture(fixtures_dir, "metadata_heavy.darshan.txt")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def test_parse_golden_shared_row(large_seq, keys):
    table = large_seq.tables["POSIX"]
    assert len(table.rows) == keys["large_seq"]["rows"]
    row = table.rows[0]
    assert row.rank == -1 and row.shared
    assert row.file_name == "/scratch/big/input.dat"
    assert table.total("POSIX_BYTES_READ") == keys["large_seq"]["bytes_read"]
    assert table.total("POSIX_READS") == keys["large_seq"]["reads"]
    assert "nprocs: 50" in large_seq.header


def test_descriptions_attached_for_every_counter(large_seq):
    table = large_seq.tables["POSIX"]
    for name in table.counter_names():
        assert name in large_seq.descriptions["POSIX"]
        assert large_seq.descriptions["POSIX"][name]


def test_counter_description_fallback():
    assert "read" in counter_description("POSIX_BYTES_READ")
    assert "undocumented" in counter_description("POSIX_NO_SUCH_THING")


def test_empty_input_is_no_header():
    with pytest.raises(TraceError, match="no header"):
        parse_darshan_text(b"")
    with pytest.raises(TraceError, match="no header"):
        parse_darshan_text("   \n \n")


def test_record_before_header_is_no_header():
    with pytest.raises(TraceError, match="no header"):
        parse_darshan_text("POSIX 0 1 POSIX_OPENS 1 /f\n# too late")


def test_short_record_line_reports_line_number():
    with pytest.raises(TraceError, match="line 3"):
        parse_darshan_text("# h\n\nPOSIX 0 7\n")


def test_bad_rank_and_value_report_line_numbers():
    with pytest.raises(TraceError, match="line 2.*rank"):
        parse_darshan_text("# h\nPOSIX zero 7 POSIX_OPENS 1 /f\n")
    with pytest.raises(TraceError, match="line 2.*not numeric"):
        parse_darshan_text("# h\nPOSIX 0 7 POSIX_OPENS one /f\n")
    with pytest.raises(TraceError, match="rank must be >= -1"):
        parse_darshan_text("# h\nPOSIX -2 7 POSIX_OPENS 1 /f\n")


def test_unknown_module_warned_and_retained(caplog):
    with caplog.at_level(logging.WARNING):
        bundle = parse_darshan_text("# h\nLUSTRE 0 7 LUSTRE_OSTS 5 /f\n")
    assert "LUSTRE" in bundle.tables
    assert bundle.tables["LUSTRE"].total("LUSTRE_OSTS") == 5
    assert any("unknown module" in r.message for r in caplog.records)


def test_rows_grouped_and_zero_filled():
    bundle = parse_darshan_text(
        "# h\n"
        "POSIX 0 7 POSIX_OPENS 1 /a\n"
        "POSIX 0 7 POSIX_WRITES 3 /a\n"
        "POSIX 1 8 POSIX_OPENS 2 /b\n"
    )
    table = bundle.tables["POSIX"]
    assert len(table.rows) == 2
    assert table.counter_names() == ["POSIX_OPENS", "POSIX_WRITES"]
    by_rank = {r.rank: r for r in table.rows}
    assert by_rank[0].counters == {"POSIX_OPENS": 1, "POSIX_WRITES": 3}
    # the second row never mentioned POSIX_WRITES; it reads as 0
    assert by_rank[1].counters == {"POSIX_OPENS": 2, "POSIX_WRITES": 0}


def test_csv_and_text_forms_agree(fixtures_dir):
    from_csv = load_fixture(fixtures_dir, "small.csv")
    from_txt = load_fixture(fixtures_dir, "small.darshan.txt")
    assert serialize_counters(from_csv) == serialize_counters(from_txt)


def test_csv_errors():
    with pytest.raises(TraceError, match="expected CSV header"):
        parse_trace_csv("foo,bar\n")
    with pytest.raises(TraceError, match="line 2"):
        parse_trace_csv("module,rank,record_id,file,counter,value\nPOSIX,0,1\n")
    with pytest.raises(TraceError, match="line 2.*rank"):
        parse_trace_csv(
            "module,rank,record_id,file,counter,value\nPOSIX,x,1,/f,POSIX_OPENS,1\n"
        )


def test_load_trace_sniffs_format(fixtures_dir):
    assert "POSIX" in load_fixture(fixtures_dir, "small.csv").tables
    assert "POSIX" in load_fixture(fixtures_dir, "small.darshan.txt").tables
    with pytest.raises(TraceError, match="unrecognized"):
        load_trace("hello world\n")


records_strategy = st.lists(
    st.tuples(
        st.sampled_from(["POSIX", "MPI-IO", "STDIO"]),
        st.integers(min_value=-1, max_value=8),
        st.sampled_from(["r1", "r2", "r3"]),
        st.sampled_from(["/a", "/b"]),
        st.sampled_from(["C_ONE", "C_TWO", "C_THREE"]),
        st.integers(min_value=0, max_value=10**12),
    ),
    min_size=1,
    max_size=40,
)


@given(records_strategy)
def test_parse_is_lossless_for_counters(records):
    lines = ["# synthetic"]
    expected = {}
    for module, rank, record_id, file_name, counter, value in records:
        lines.append(f"{module} {rank} {record_id} {counter} {value} {file_name}")
        # repeated counters for one record overwrite, as in a real dump's
        # one-line-per-counter layout
        expected[(module, rank, record_id, file_name, counter)] = value
    bundle = parse_darshan_text("\n".join(lines))
    flat = {}
    for module, table in bundle.tables.items():
        for row in table.rows:
            for counter, value in row.counters.items():
                flat[(module, row.rank, row.record_id, row.file_name, counter)] = value
    for key, value in expected.items():
        assert flat[key] == value


# ---------------------------------------------------------------------------
# query tools
# ---------------------------------------------------------------------------


def test_aggregate_sum_matches_answer_key(metadata_heavy, keys):
    _, handlers = table_tools(metadata_heavy)
    out = handlers["aggregate"](
        {"table": "POSIX", "group_keys": [], "agg": "sum", "counter": "POSIX_BYTES_WRITTEN"}
    )
    assert str(keys["metadata_heavy"]["bytes_written"]) in out


def test_aggregate_grouped_count(metadata_heavy):
    _, handlers = table_tools(metadata_heavy)
    out = handlers["aggregate"]({"table": "POSIX", "group_keys": ["rank"], "agg": "count"})
    lines = out.splitlines()
    assert lines[0].split() == ["rank", "count"]
    assert [ln.split() for ln in lines[1:]] == [[str(r), "50"] for r in range(4)]


def test_filter_all_rows_and_truncation(metadata_heavy, keys):
    _, handlers = table_tools(metadata_heavy)
    out = handlers["filter"](
        {"table": "POSIX", "counter": "POSIX_OPENS", "comparator": ">", "value": 0}
    )
    total = keys["metadata_heavy"]["rows"]
    assert f"({total - 50} more rows omitted)" in out
    assert len(out.splitlines()) == 1 + 50 + 1  # header + rendered rows + ellipsis


def test_filter_equality(metadata_heavy):
    _, handlers = table_tools(metadata_heavy)
    out = handlers["filter"](
        {"table": "POSIX", "counter": "POSIX_STATS", "comparator": "==", "value": 11}
    )
    assert out == "(empty result)"


def test_top_n(metadata_heavy):
    _, handlers = table_tools(metadata_heavy)
    out = handlers["top_n"]({"table": "POSIX", "counter": "POSIX_BYTES_WRITTEN", "n": 3})
    assert len(out.splitlines()) == 4


def test_top_n_rejects_nonpositive(metadata_heavy):
    _, handlers = table_tools(metadata_heavy)
    assert handlers["top_n"](
        {"table": "POSIX", "counter": "POSIX_BYTES_WRITTEN", "n": 0}
    ).startswith("error: n must be >= 1")


def test_tool_errors_are_strings_not_crashes(metadata_heavy):
    _, handlers = table_tools(metadata_heavy)
    assert handlers["describe_columns"]({"table": "NFS"}).startswith("error: unknown table")
    assert handlers["filter"](
        {"table": "POSIX", "counter": "NOPE", "comparator": ">", "value": 0}
    ).startswith("error: unknown counter")
    assert handlers["filter"](
        {"table": "POSIX", "counter": "POSIX_OPENS", "comparator": "~", "value": 0}
    ).startswith("error: comparator")
    assert handlers["aggregate"](
        {"table": "POSIX", "agg": "median", "counter": "POSIX_OPENS"}
    ).startswith("error: agg")
    assert handlers["aggregate"](
        {"table": "POSIX", "agg": "sum", "counter": "POSIX_OPENS", "group_keys": ["color"]}
    ).startswith("error: group_keys")


def test_tools_are_pure_and_do_not_mutate(metadata_heavy):
    before = serialize_counters(metadata_heavy)
    _, handlers = table_tools(metadata_heavy)
    call = {"table": "POSIX", "counter": "POSIX_STATS", "comparator": ">=", "value": 10}
    assert handlers["filter"](call) == handlers["filter"](call)
    out = handlers["aggregate"]({"table": "POSIX", "agg": "mean", "counter": "POSIX_STATS"})
    assert handlers["aggregate"](
        {"table": "POSIX", "agg": "mean", "counter": "POSIX_STATS"}
    ) == out
    assert serialize_counters(metadata_heavy) == before


def test_describe_columns_lists_descriptions(large_seq):
    _, handlers = table_tools(large_seq)
    out = handlers["describe_columns"]({"table": "POSIX"})
    assert "POSIX_BYTES_READ" in out
    assert "bytes read" in out


def test_list_tables(large_seq):
    _, handlers = table_tools(large_seq)
    out = handlers["list_tables"]({})
    assert "POSIX" in out and "1" in out


# ---------------------------------------------------------------------------
# highlights and classification
# ---------------------------------------------------------------------------


def test_highlights_large_seq(large_seq, keys):
    values = {name: v for name, v, _ in compute_highlights(large_seq)}
    assert values["mean_transfer_bytes"] == keys["large_seq"]["mean_transfer_bytes"]
    assert values["seq_read_fraction"] == 1.0
    assert values["read_byte_fraction"] == 1.0
    assert values["file_count"] == 1.0


def test_classification_matches_answer_keys(fixtures_dir, keys):
    for stem in ("large_seq", "metadata_heavy", "mixed"):
        bundle = load_fixture(fixtures_dir, f"{stem}.darshan.txt")
        values = dict(
            (name, v) for name, v, _ in compute_highlights(bundle)
        )
        if "metadata_data_ratio" in keys[stem]:
            assert values["metadata_data_ratio"] == pytest.approx(
                keys[stem]["metadata_data_ratio"]
            )
        assert classify_workload(compute_highlights(bundle)) == keys[stem]["classification"]


def test_render_highlights_mentions_classification(metadata_heavy):
    text = render_highlights(compute_highlights(metadata_heavy))
    assert "Workload classification: metadata" in text
    assert "metadata_data_ratio = 12" in text


# ---------------------------------------------------------------------------
# report generation
# ---------------------------------------------------------------------------


def test_zero_budget_report_uses_single_toolless_call(large_seq):
    seen = []

    def fn(messages, tools):
        seen.append((list(messages), list(tools)))
        return assistant("Schema-only report: one shared file, POSIX table.")

    report = generate_io_report(large_seq, CallbackProvider(fn), tool_budget=0)
    assert len(seen) == 1
    messages, tools = seen[0]
    assert tools == []
    assert "nprocs: 50" in messages[1].content  # header shown
    assert "POSIX" in messages[1].content  # schema shown
    assert report.text.startswith("Schema-only report")
    assert report.highlight("mean_transfer_bytes") == 16777216


def test_report_via_tool_loop(large_seq):
    def fn(messages, tools):
        if messages[-1].role == "user":
            call = ToolCall(
                id="c1",
                name="aggregate",
                arguments=json.dumps(
                    {"table": "POSIX", "agg": "sum", "counter": "POSIX_BYTES_READ"}
                ),
            )
            return assistant("", [call])
        total = messages[-1].content.splitlines()[-1].split()[-1]
        return assistant(f"The app read {total} bytes from one shared file.")

    report = generate_io_report(large_seq, CallbackProvider(fn), tool_budget=4)
    assert "20132659200" in report.text


def test_report_never_exceeds_tool_budget(large_seq):
    calls = {"n": 0}

    def fn(messages, tools):
        if tools:
            return assistant(
                "",
                [ToolCall(id=f"c{calls['n']}", name="list_tables", arguments="{}")],
            )
        return assistant("ran out of budget; here is what I saw")

    _, handlers = table_tools(large_seq)
    real = handlers["list_tables"]

    def counting(args):
        calls["n"] += 1
        return real(args)

    import pfstuner.trace as trace_mod

    original = trace_mod.table_tools

    def patched(bundle, render_rows=50):
        tools, handlers = original(bundle, render_rows)
        handlers["list_tables"] = counting
        return tools, handlers

    trace_mod.table_tools = patched
    try:
        report = generate_io_report(large_seq, CallbackProvider(fn), tool_budget=3)
    finally:
        trace_mod.table_tools = original
    assert calls["n"] <= 3
    assert "budget" in report.text or report.text


def test_report_does_not_mutate_bundle(large_seq):
    before = serialize_counters(large_seq)
    generate_io_report(
        large_seq, CallbackProvider(lambda m, t: assistant("static report")), tool_budget=2
    )
    assert serialize_counters(large_seq) == before


def test_report_text_must_be_nonempty():
    with pytest.raises(TraceError):
        IOReport(text="  ", highlights=[])


def test_empty_model_reply_falls_back_to_overview(large_seq):
    report = generate_io_report(
        large_seq, CallbackProvider(lambda m, t: assistant("")), tool_budget=0
    )
    assert report.text.strip()
    assert "POSIX" in report.text


def test_negative_budget_rejected(large_seq):
    with pytest.raises(ValueError):
        generate_io_report(large_seq, CallbackProvider(lambda m, t: assistant("x")), -1)


def test_answer_followup_seeded_with_question(metadata_heavy, keys):
    def fn(messages, tools):
        if messages[-1].role == "user" and "ratio" in messages[-1].content:
            call = ToolCall(
                id="q1",
                name="aggregate",
                arguments=json.dumps(
                    {"table": "POSIX", "agg": "sum", "counter": "POSIX_STATS"}
                ),
            )
            return assistant("", [call])
        stats = int(messages[-1].content.splitlines()[-1].split()[-1])
        return assistant(f"stat total is {stats}")

    answer = answer_followup(
        metadata_heavy,
        "what is the metadata-to-data operation ratio?",
        CallbackProvider(fn),
        tool_budget=4,
    )
    assert str(200 * 10) in answer


def test_answer_followup_requires_question(metadata_heavy):
    with pytest.raises(ValueError):
        answer_followup(metadata_heavy, "  ", CallbackProvider(lambda m, t: assistant("x")))
