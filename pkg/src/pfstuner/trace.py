"""Trace ingestion and the constrained analysis toolset.

Darshan-style text dumps (or a simplified CSV) are parsed into per-module
counter tables.  A small, pure query toolset over those tables is handed to
a model through the agent loop to produce the I/O report and to answer
follow-up questions.  The toolset deliberately replaces free-form code
execution: every analysis the report needs is expressible as a filter or
an aggregation, and the fixed tools keep runs reproducible.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

from .agent import ChatProvider, ToolDef, run_tool_loop, system, user
from .resources import data_json, prompt_text

log = logging.getLogger(__name__)

KNOWN_MODULES = ("POSIX", "MPI-IO", "STDIO")
CSV_HEADER = ("module", "rank", "record_id", "file", "counter", "value")
DEFAULT_RENDER_ROWS = 50
DEFAULT_TOOL_BUDGET = 16

# classification thresholds used to label a workload from its highlights
METADATA_RATIO_THRESHOLD = 2.0
DATA_BYTES_THRESHOLD = 1e9

Number = Union[int, float]


class TraceError(Exception):
    """Unparseable trace input."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class TableRow:
    rank: int  # -1 means shared across all ranks
    record_id: str
    file_name: str
    counters: dict[str, Number]

    @property
    def shared(self) -> bool:
        return self.rank == -1


@dataclass
class CounterTable:
    rows: list[TableRow] = field(default_factory=list)

    def __post_init__(self) -> None:
        for row in self.rows:
            if row.rank < -1:
                raise TraceError(f"rank {row.rank} is below -1")
        # normalize to a common counter set; absent counters read as 0
        names = self.counter_names()
        for row in self.rows:
            for name in names:
                row.counters.setdefault(name, 0)

    def counter_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for row in self.rows:
            for name in row.counters:
                seen.setdefault(name)
        return list(seen)

    def total(self, counter: str) -> Number:
        return sum(row.counters.get(counter, 0) for row in self.rows)


@dataclass
class TraceBundle:
    header: str
    tables: dict[str, CounterTable]
    descriptions: dict[str, dict[str, str]]

    def file_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for table in self.tables.values():
            for row in table.rows:
                if row.file_name:
                    seen.setdefault(row.file_name)
        return list(seen)


@dataclass
class IOReport:
    text: str
    highlights: list[tuple[str, float, str]]

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise TraceError("report text must be nonempty")

    def highlight(self, name: str) -> Optional[float]:
        for metric, value, _ in self.highlights:
            if metric == name:
                return value
        return None

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "highlights": [[m, v, n] for m, v, n in self.highlights],
        }


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_DESCRIPTIONS: Optional[dict[str, str]] = None


def counter_description(name: str) -> str:
    global _DESCRIPTIONS
    if _DESCRIPTIONS is None:
        _DESCRIPTIONS = data_json("counter_descriptions")
    return _DESCRIPTIONS.get(name, f"{name}: undocumented counter")


def _as_text(data: Union[bytes, str]) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="replace")
    return data


def _parse_value(text: str, lineno: int) -> Number:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise TraceError(f"line {lineno}: value {text!r} is not numeric")


def _build_bundle(
    header: str,
    records: Iterable[tuple[str, int, str, str, str, Number]],
) -> TraceBundle:
    # records arrive as (module, rank, record_id, file, counter, value);
    # group by module, then one row per (rank, record_id, file)
    grouped: dict[str, dict[tuple[int, str, str], TableRow]] = {}
    warned: set[str] = set()
    for module, rank, record_id, file_name, counter, value in records:
        if module not in KNOWN_MODULES and module not in warned:
            warned.add(module)
            log.warning("unknown module %r: retained under its literal name", module)
        rows = grouped.setdefault(module, {})
        key = (rank, record_id, file_name)
        row = rows.get(key)
        if row is None:
            row = rows[key] = TableRow(rank, record_id, file_name, {})
        row.counters[counter] = value
    tables = {mod: CounterTable(list(rows.values())) for mod, rows in grouped.items()}
    descriptions = {
        mod: {name: counter_description(name) for name in table.counter_names()}
        for mod, table in tables.items()
    }
    return TraceBundle(header=header, tables=tables, descriptions=descriptions)


def parse_darshan_text(data: Union[bytes, str]) -> TraceBundle:
    """Parse a darshan-parser style dump: ``#`` header lines, then records
    ``<module> <rank> <record id> <counter> <value> <file name> ...``."""
    header_lines: list[str] = []
    records: list[tuple[str, int, str, str, str, Number]] = []
    saw_content = False
    for lineno, line in enumerate(_as_text(data).splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            header_lines.append(line)
            saw_content = True
            continue
        if not header_lines:
            raise TraceError("no header: expected '#' lines before the first record")
        saw_content = True
        fields = stripped.split()
        if len(fields) < 6:
            raise TraceError(
                f"line {lineno}: expected at least 6 fields "
                f"(module rank record counter value file), got {len(fields)}"
            )
        module, rank_text, record_id, counter, value_text = fields[:5]
        file_name = fields[5]
        try:
            rank = int(rank_text)
        except ValueError:
            raise TraceError(f"line {lineno}: rank {rank_text!r} is not an integer")
        if rank < -1:
            raise TraceError(f"line {lineno}: rank must be >= -1")
        value = _parse_value(value_text, lineno)
        records.append((module, rank, record_id, file_name, counter, value))
    if not saw_content:
        raise TraceError("no header: input is empty")
    return _build_bundle("\n".join(header_lines), records)


def parse_trace_csv(data: Union[bytes, str]) -> TraceBundle:
    """Parse the simplified ``module,rank,record_id,file,counter,value``
    format.  The header row is mandatory."""
    reader = csv.reader(io.StringIO(_as_text(data)))
    try:
        head = next(reader)
    except StopIteration:
        raise TraceError("no header: input is empty")
    if [c.strip() for c in head] != list(CSV_HEADER):
        raise TraceError(f"expected CSV header {','.join(CSV_HEADER)!r}")
    records: list[tuple[str, int, str, str, str, Number]] = []
    for lineno, row in enumerate(reader, 2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 6:
            raise TraceError(f"line {lineno}: expected 6 columns, got {len(row)}")
        module, rank_text, record_id, file_name, counter, value_text = (
            c.strip() for c in row
        )
        try:
            rank = int(rank_text)
        except ValueError:
            raise TraceError(f"line {lineno}: rank {rank_text!r} is not an integer")
        if rank < -1:
            raise TraceError(f"line {lineno}: rank must be >= -1")
        value = _parse_value(value_text, lineno)
        records.append((module, rank, record_id, file_name, counter, value))
    return _build_bundle(f"# converted from CSV ({len(records)} records)", records)


def load_trace(data: Union[bytes, str]) -> TraceBundle:
    """Sniff the format from the first nonblank line and parse."""
    text = _as_text(data)
    first = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
    if first.startswith("#"):
        return parse_darshan_text(text)
    if [c.strip() for c in first.split(",")] == list(CSV_HEADER):
        return parse_trace_csv(text)
    raise TraceError("unrecognized trace format: expected a '#' header or a CSV header row")


def serialize_counters(bundle: TraceBundle) -> list[tuple[str, int, str, str, Number]]:
    """Flatten the tables back into (module, rank, record_id, counter, value)
    tuples; parsing then serializing loses no counter of the input."""
    out = []
    for module, table in bundle.tables.items():
        for row in table.rows:
            for counter, value in row.counters.items():
                out.append((module, row.rank, row.record_id, counter, value))
    return sorted(out, key=lambda t: (t[0], t[1], t[2], t[3]))


# ---------------------------------------------------------------------------
# The query toolset
# ---------------------------------------------------------------------------

_COMPARATORS: dict[str, Callable[[Number, Number], bool]] = {
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}

_GROUP_FIELDS = ("rank", "record_id", "file_name")


def _fmt(value: Number) -> str:
    if isinstance(value, float):
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value))
        return f"{value:.6g}"
    return str(value)


def _render(headers: Sequence[str], rows: Sequence[Sequence[str]], limit: int) -> str:
    if not rows:
        return "(empty result)"
    shown = rows[:limit]
    widths = [
        max(len(headers[i]), max(len(r[i]) for r in shown)) for i in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip()]
    for r in shown:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip())
    if len(rows) > limit:
        lines.append(f"... ({len(rows) - limit} more rows omitted)")
    return "\n".join(lines)


def _row_cells(table: CounterTable, row: TableRow) -> list[str]:
    return [str(row.rank), row.record_id, row.file_name] + [
        _fmt(row.counters[name]) for name in table.counter_names()
    ]


def _row_headers(table: CounterTable) -> list[str]:
    return ["rank", "record_id", "file_name"] + table.counter_names()


def table_tools(
    bundle: TraceBundle, render_rows: int = DEFAULT_RENDER_ROWS
) -> tuple[list[ToolDef], dict[str, Callable[[dict], str]]]:
    """Pure query tools over the bundle.  Bad arguments come back as
    ``error: ...`` strings so the model can correct itself."""

    def _table(name) -> Union[CounterTable, str]:
        if not isinstance(name, str) or name not in bundle.tables:
            have = ", ".join(bundle.tables) or "none"
            return f"error: unknown table {name!r} (available: {have})"
        return bundle.tables[name]

    def list_tables(args: dict) -> str:
        rows = [
            [name, str(len(t.rows)), str(len(t.counter_names()))]
            for name, t in bundle.tables.items()
        ]
        return _render(["table", "rows", "counters"], rows, render_rows)

    def describe_columns(args: dict) -> str:
        table = _table(args.get("table"))
        if isinstance(table, str):
            return table
        name = args["table"]
        rows = [[c, bundle.descriptions[name].get(c, "")] for c in table.counter_names()]
        return _render(["counter", "description"], rows, max(len(rows), render_rows))

    def filter_rows(args: dict) -> str:
        table = _table(args.get("table"))
        if isinstance(table, str):
            return table
        counter = args.get("counter")
        if counter not in table.counter_names():
            return f"error: unknown counter {counter!r} in table {args['table']!r}"
        comparator = args.get("comparator")
        if comparator not in _COMPARATORS:
            return f"error: comparator must be one of {', '.join(_COMPARATORS)}"
        literal = args.get("value")
        if not isinstance(literal, (int, float)) or isinstance(literal, bool):
            return "error: value must be a number"
        cmp = _COMPARATORS[comparator]
        hits = [r for r in table.rows if cmp(r.counters[counter], literal)]
        return _render(_row_headers(table), [_row_cells(table, r) for r in hits], render_rows)

    def aggregate(args: dict) -> str:
        table = _table(args.get("table"))
        if isinstance(table, str):
            return table
        agg = args.get("agg")
        if agg not in ("sum", "mean", "min", "max", "count"):
            return "error: agg must be one of sum, mean, min, max, count"
        counter = args.get("counter")
        if agg != "count" and counter not in table.counter_names():
            return f"error: unknown counter {counter!r} in table {args['table']!r}"
        group_keys = args.get("group_keys") or []
        if not isinstance(group_keys, list) or any(
            k not in _GROUP_FIELDS for k in group_keys
        ):
            return f"error: group_keys must be a list drawn from {', '.join(_GROUP_FIELDS)}"
        groups: dict[tuple, list[TableRow]] = {}
        for row in table.rows:
            key = tuple(str(getattr(row, k)) for k in group_keys)
            groups.setdefault(key, []).append(row)
        label = f"{agg}({counter})" if agg != "count" else "count"
        out_rows = []
        for key in sorted(groups):
            members = groups[key]
            if agg == "count":
                value: Number = len(members)
            else:
                values = [r.counters[counter] for r in members]
                if agg == "sum":
                    value = sum(values)
                elif agg == "mean":
                    value = sum(values) / len(values)
                elif agg == "min":
                    value = min(values)
                else:
                    value = max(values)
            out_rows.append(list(key) + [_fmt(value)])
        return _render(list(group_keys) + [label], out_rows, render_rows)

    def top_n(args: dict) -> str:
        table = _table(args.get("table"))
        if isinstance(table, str):
            return table
        counter = args.get("counter")
        if counter not in table.counter_names():
            return f"error: unknown counter {counter!r} in table {args['table']!r}"
        n = args.get("n")
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            return "error: n must be >= 1"
        ranked = sorted(
            range(len(table.rows)), key=lambda i: (-table.rows[i].counters[counter], i)
        )[:n]
        cells = [_row_cells(table, table.rows[i]) for i in ranked]
        return _render(_row_headers(table), cells, render_rows)

    tools = [
        ToolDef(
            "list_tables",
            "List the counter tables in the trace with row and counter counts.",
            {"type": "object", "properties": {}},
        ),
        ToolDef(
            "describe_columns",
            "Show every counter of a table with its description.",
            {
                "type": "object",
                "properties": {"table": {"type": "string"}},
                "required": ["table"],
            },
        ),
        ToolDef(
            "filter",
            "Rows of a table where a counter satisfies a comparison with a literal.",
            {
                "type": "object",
                "properties": {
                    "table": {"type": "string"},
                    "counter": {"type": "string"},
                    "comparator": {"type": "string", "enum": list(_COMPARATORS)},
                    "value": {"type": "number"},
                },
                "required": ["table", "counter", "comparator", "value"],
            },
        ),
        ToolDef(
            "aggregate",
            "Aggregate a counter over rows, optionally grouped by rank, "
            "record_id, or file_name.",
            {
                "type": "object",
                "properties": {
                    "table": {"type": "string"},
                    "group_keys": {"type": "array", "items": {"type": "string"}},
                    "agg": {
                        "type": "string",
                        "enum": ["sum", "mean", "min", "max", "count"],
                    },
                    "counter": {"type": "string"},
                },
                "required": ["table", "agg"],
            },
        ),
        ToolDef(
            "top_n",
            "The n rows with the largest value of a counter.",
            {
                "type": "object",
                "properties": {
                    "table": {"type": "string"},
                    "counter": {"type": "string"},
                    "n": {"type": "integer"},
                },
                "required": ["table", "counter", "n"],
            },
        ),
    ]
    handlers = {
        "list_tables": list_tables,
        "describe_columns": describe_columns,
        "filter": filter_rows,
        "aggregate": aggregate,
        "top_n": top_n,
    }
    return tools, handlers


# ---------------------------------------------------------------------------
# Highlights and classification
# ---------------------------------------------------------------------------

_READ_OPS = {"POSIX_READS", "STDIO_READS", "MPIIO_INDEP_READS", "MPIIO_COLL_READS"}
_WRITE_OPS = {"POSIX_WRITES", "STDIO_WRITES", "MPIIO_INDEP_WRITES", "MPIIO_COLL_WRITES"}
_OPEN_OPS = {"POSIX_OPENS", "STDIO_OPENS", "MPIIO_INDEP_OPENS", "MPIIO_COLL_OPENS"}
_STAT_OPS = {"POSIX_STATS"}
_BYTES_READ = {"POSIX_BYTES_READ", "STDIO_BYTES_READ", "MPIIO_BYTES_READ"}
_BYTES_WRITTEN = {"POSIX_BYTES_WRITTEN", "STDIO_BYTES_WRITTEN", "MPIIO_BYTES_WRITTEN"}
_SEQ_READS = {"POSIX_SEQ_READS"}
_SEQ_WRITES = {"POSIX_SEQ_WRITES"}


def _sum_counters(bundle: TraceBundle, names: set[str]) -> float:
    total = 0.0
    for table in bundle.tables.values():
        for name in names:
            if name in table.counter_names():
                total += float(table.total(name))
    return total


def compute_highlights(bundle: TraceBundle) -> list[tuple[str, float, str]]:
    """Deterministic metrics computed straight from the tables; the model
    never gets to invent these."""
    reads = _sum_counters(bundle, _READ_OPS)
    writes = _sum_counters(bundle, _WRITE_OPS)
    opens = _sum_counters(bundle, _OPEN_OPS)
    stats = _sum_counters(bundle, _STAT_OPS)
    bytes_read = _sum_counters(bundle, _BYTES_READ)
    bytes_written = _sum_counters(bundle, _BYTES_WRITTEN)
    seq_reads = _sum_counters(bundle, _SEQ_READS)
    seq_writes = _sum_counters(bundle, _SEQ_WRITES)
    data_ops = reads + writes
    total_bytes = bytes_read + bytes_written
    return [
        ("total_bytes", total_bytes, "bytes moved through all interfaces"),
        ("total_bytes_read", bytes_read, "bytes read"),
        ("total_bytes_written", bytes_written, "bytes written"),
        ("read_ops", reads, "read operations"),
        ("write_ops", writes, "write operations"),
        ("open_ops", opens, "open operations"),
        ("stat_ops", stats, "stat operations"),
        ("file_count", float(len(bundle.file_names())), "distinct files in the trace"),
        (
            "mean_transfer_bytes",
            total_bytes / max(data_ops, 1.0),
            "bytes per read or write",
        ),
        (
            "metadata_data_ratio",
            (opens + stats) / max(data_ops, 1.0),
            "metadata ops per data op",
        ),
        (
            "seq_read_fraction",
            seq_reads / max(reads, 1.0),
            "reads at or past the previous offset",
        ),
        (
            "seq_write_fraction",
            seq_writes / max(writes, 1.0),
            "writes at or past the previous offset",
        ),
        (
            "read_byte_fraction",
            bytes_read / max(total_bytes, 1.0),
            "share of bytes moved by reads",
        ),
    ]


def classify_workload(highlights: Sequence[tuple[str, float, str]]) -> str:
    """Label the workload from its highlights: ``metadata``, ``data``,
    ``mixed``, or ``balanced`` when neither signal fires."""
    values = {name: value for name, value, _ in highlights}
    metadata_heavy = values.get("metadata_data_ratio", 0.0) >= METADATA_RATIO_THRESHOLD
    data_heavy = values.get("total_bytes", 0.0) >= DATA_BYTES_THRESHOLD
    if metadata_heavy and data_heavy:
        return "mixed"
    if metadata_heavy:
        return "metadata"
    if data_heavy:
        return "data"
    return "balanced"


def render_highlights(highlights: Sequence[tuple[str, float, str]]) -> str:
    lines = ["Measured highlights:"]
    for name, value, note in highlights:
        lines.append(f"- {name} = {_fmt(value)} ({note})")
    lines.append(f"Workload classification: {classify_workload(highlights)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Report generation
# ---------------------------------------------------------------------------


def _overview(bundle: TraceBundle) -> str:
    lines = ["Trace header:", bundle.header or "(none)", "", "Tables:"]
    for name, table in bundle.tables.items():
        counters = ", ".join(table.counter_names())
        lines.append(f"- {name}: {len(table.rows)} rows; counters: {counters}")
    return "\n".join(lines)


def _run_analysis(
    bundle: TraceBundle,
    task: str,
    model: ChatProvider,
    tool_budget: int,
    render_rows: int,
) -> str:
    if tool_budget < 0:
        raise ValueError("tool_budget must be >= 0")
    prompt = prompt_text("analysis_system")
    seed = f"{_overview(bundle)}\n\n{task}"
    if tool_budget == 0:
        reply = model.complete(
            [
                system(prompt),
                user(
                    seed
                    + "\n\nNo query tools are available; answer from the header "
                    "and schemas above alone."
                ),
            ]
        )
        text = reply.content
    else:
        tools, handlers = table_tools(bundle, render_rows)
        result = run_tool_loop(
            model, prompt, seed, tools, handlers, tool_call_budget=tool_budget
        )
        text = result.final.content
    if not text.strip():
        text = f"(the model returned no text)\n\n{_overview(bundle)}"
    return text


def generate_io_report(
    bundle: TraceBundle,
    model: ChatProvider,
    tool_budget: int = DEFAULT_TOOL_BUDGET,
    render_rows: int = DEFAULT_RENDER_ROWS,
) -> IOReport:
    """Report text comes from the model (through the query tools when the
    budget allows); highlights are computed directly from the tables."""
    text = _run_analysis(
        bundle,
        "Write the I/O report for this trace.",
        model,
        tool_budget,
        render_rows,
    )
    return IOReport(text=text, highlights=compute_highlights(bundle))


def answer_followup(
    bundle: TraceBundle,
    question: str,
    model: ChatProvider,
    tool_budget: int = DEFAULT_TOOL_BUDGET,
    render_rows: int = DEFAULT_RENDER_ROWS,
) -> str:
    if not question.strip():
        raise ValueError("question must be nonempty")
    return _run_analysis(
        bundle, f"Question: {question}", model, tool_budget, render_rows
    )
