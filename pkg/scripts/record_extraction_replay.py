#!/usr/bin/env python3
"""Record the replay fixtures for the manual extraction pipeline.

The pipeline under test talks to a chat model twice per parameter: once to
assess the retrieved manual context and describe the parameter, once to
classify it as binary/low-impact.  For offline tests we record those
exchanges once and replay them by request digest.  The "model" here is a
scripted table keyed on the parameter name, so the recording is
deterministic and regenerating it never needs network access.

Run from the repo root; output lands in tests/fixtures/replay/extraction/.
"""

import json
import pathlib
import re
import shutil
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from pfstuner.agent import RecordingProvider, assistant  # noqa: E402
from pfstuner.core import specs_from_json  # noqa: E402
from pfstuner.manual_index import (  # noqa: E402
    extract_pipeline,
    parse_candidates,
    score_extraction,
)

MANUAL_DIR = ROOT / "tests" / "fixtures" / "manual"
REPLAY_DIR = ROOT / "tests" / "fixtures" / "replay" / "extraction"

KEY = {s["name"]: s for s in json.loads((MANUAL_DIR / "answer_key.json").read_text())}

# Assessment replies.  The six answer-key parameters are echoed from the key
# so the fixture stays consistent with it; the rest are hand-written.
ASSESSMENTS = {
    name: {
        "sufficient": True,
        "description": entry["description"],
        "io_impact": entry["io_impact"],
        "range": entry["range"],
    }
    for name, entry in KEY.items()
}
ASSESSMENTS["checksums"] = {
    "sufficient": True,
    "description": "On/off toggle protecting bulk transfers with checksums.",
    "io_impact": "Small CPU cost per transfer when enabled.",
    "range": {"kind": "choices", "values": [0, 1]},
}
ASSESSMENTS["debug_rpc_trace"] = {
    "sufficient": True,
    "description": "Verbosity of wire-level request logging, for diagnosing "
    "protocol problems.",
    "io_impact": "None in steady state; logging overhead only while raised.",
    "range": {"kind": "static_int", "min": 0, "max": 16},
}
ASSESSMENTS["max_cached_pct"] = {"sufficient": False}

CLASSIFICATIONS = {
    name: {
        "is_binary": False,
        "impact": "high",
        "reasoning": "Numeric control the guide ties directly to transfer or "
        "metadata throughput.",
    }
    for name in KEY
}
CLASSIFICATIONS["checksums"] = {
    "is_binary": True,
    "impact": "low",
    "reasoning": "Two-state toggle; not a tunable range.",
}
CLASSIFICATIONS["debug_rpc_trace"] = {
    "is_binary": False,
    "impact": "low",
    "reasoning": "Diagnostic log verbosity with no steady-state I/O effect.",
}

ASSESS_RE = re.compile(r"Parameter '(\w+)' is settable at")
CLASSIFY_RE = re.compile(r"^Parameter: (\w+)\n")


class ScriptedModel:
    """Table-driven stand-in for the chat model."""

    def complete(self, messages, tools=()):
        content = messages[-1].content
        m = ASSESS_RE.search(content)
        if m:
            name = m.group(1)
            # refuse to answer about a parameter the retrieved text never
            # mentions; that would record an ungrounded fixture
            ctx = content.split("Manual context:\n", 1)[-1]
            ctx = ctx.split("\n\nParameter '", 1)[0]
            if ASSESSMENTS[name].get("sufficient") and name not in ctx:
                raise SystemExit(f"retrieved context for {name} does not mention it")
            return assistant(json.dumps(ASSESSMENTS[name]))
        m = CLASSIFY_RE.match(content)
        if m:
            return assistant(json.dumps(CLASSIFICATIONS[m.group(1)]))
        raise SystemExit(f"unexpected request: {content[:120]!r}")


def main():
    if REPLAY_DIR.exists():
        shutil.rmtree(REPLAY_DIR)
    model = RecordingProvider(ScriptedModel(), REPLAY_DIR)

    manual = (MANUAL_DIR / "mini_manual.txt").read_text(encoding="utf-8")
    candidates = parse_candidates((MANUAL_DIR / "candidates.txt").read_text())
    result = extract_pipeline(manual, candidates, model)

    counts = result.stage_counts()
    expected = {"candidates": 10, "writable": 9, "sufficient": 8, "final": 6}
    if counts != expected:
        raise SystemExit(f"stage counts {counts} != {expected}")

    key = specs_from_json((MANUAL_DIR / "answer_key.json").read_text())
    score = score_extraction(result.specs, key)
    if score.precision != 1.0 or score.recall != 1.0 or score.range_mismatches:
        raise SystemExit(f"extraction does not match the key: {score}")

    n = len(list(REPLAY_DIR.glob("*.json")))
    print(f"recorded {n} exchanges into {REPLAY_DIR.relative_to(ROOT)}")
    print(f"stage counts: {counts}")


if __name__ == "__main__":
    main()
