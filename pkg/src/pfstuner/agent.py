"""Model providers, chat message types, the tool-calling loop, transcripts.

All model access goes through the ``ChatProvider`` protocol so the rest of
the engine never cares whether replies come from an HTTP endpoint, a replay
fixture, or an offline policy.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Sequence

import requests


class ProviderError(Exception):
    """A provider could not produce a response."""


class ReplayMissError(ProviderError):
    """A replayed conversation diverged from its recording."""


# ---------------------------------------------------------------------------
# Messages and tools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: str  # raw JSON text, exactly as the model produced it

    def parsed_arguments(self) -> dict[str, Any]:
        try:
            out = json.loads(self.arguments)
        except json.JSONDecodeError as exc:
            raise ProviderError(f"tool call {self.name}: bad JSON arguments: {exc}") from exc
        if not isinstance(out, dict):
            raise ProviderError(f"tool call {self.name}: arguments must be an object")
        return out


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant | tool
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: str = ""
    name: str = ""

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"bad role {self.role!r}")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("only assistant messages may carry tool calls")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages need a tool_call_id")

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            wire["tool_calls"] = [
                {
                    "id": tc.id,
                    "type": "function",
                    "function": {"name": tc.name, "arguments": tc.arguments},
                }
                for tc in self.tool_calls
            ]
        if self.role == "tool":
            wire["tool_call_id"] = self.tool_call_id
            if self.name:
                wire["name"] = self.name
        return wire

    @classmethod
    def from_wire(cls, wire: dict[str, Any]) -> "Message":
        calls = tuple(
            ToolCall(
                id=c.get("id", ""),
                name=c["function"]["name"],
                arguments=c["function"].get("arguments", "{}"),
            )
            for c in wire.get("tool_calls") or ()
        )
        return cls(
            role=wire["role"],
            content=wire.get("content") or "",
            tool_calls=calls,
            tool_call_id=wire.get("tool_call_id", ""),
            name=wire.get("name", ""),
        )


@dataclass(frozen=True)
class ToolDef:
    name: str
    description: str
    parameters: dict[str, Any] = field(default_factory=dict)

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters or {"type": "object", "properties": {}},
            },
        }


def system(content: str) -> Message:
    return Message(role="system", content=content)


def user(content: str) -> Message:
    return Message(role="user", content=content)


def assistant(content: str, tool_calls: Sequence[ToolCall] = ()) -> Message:
    return Message(role="assistant", content=content, tool_calls=tuple(tool_calls))


def tool_result(call: ToolCall, content: str) -> Message:
    return Message(role="tool", content=content, tool_call_id=call.id, name=call.name)


# ---------------------------------------------------------------------------
# Token accounting
# ---------------------------------------------------------------------------


def count_tokens(message: Message) -> int:
    """A token is a whitespace-separated word; tool calls contribute their
    name and argument text."""
    n = len(message.content.split())
    for tc in message.tool_calls:
        n += len(tc.name.split()) + len(tc.arguments.split())
    return n


def _normalized(message: Message) -> tuple:
    return (
        message.role,
        " ".join(message.content.split()),
        tuple((tc.name, " ".join(tc.arguments.split())) for tc in message.tool_calls),
        message.tool_call_id,
    )


@dataclass
class Exchange:
    request: tuple[Message, ...]
    response: Message


@dataclass
class Transcript:
    """Every request/response pair a provider handled, in order."""

    exchanges: list[Exchange] = field(default_factory=list)
    provider_id: str = ""

    def record(self, request: Sequence[Message], response: Message) -> None:
        self.exchanges.append(Exchange(request=tuple(request), response=response))

    def input_tokens(self) -> int:
        return sum(count_tokens(m) for ex in self.exchanges for m in ex.request)

    def output_tokens(self) -> int:
        return sum(count_tokens(ex.response) for ex in self.exchanges)

    def exchange_token_counts(self) -> list[tuple[int, int, int]]:
        """Per exchange: (input, output, cached_input) token counts.

        Cached input is the token count of the longest message prefix the
        request shares with the immediately preceding request; the first
        exchange is never cached.
        """
        counts = []
        prev_request: Optional[tuple[Message, ...]] = None
        for ex in self.exchanges:
            inp = sum(count_tokens(m) for m in ex.request)
            cached = 0
            if prev_request is not None:
                for mine, held in zip(ex.request, prev_request):
                    if _normalized(mine) != _normalized(held):
                        break
                    cached += count_tokens(mine)
            counts.append((inp, count_tokens(ex.response), cached))
            prev_request = ex.request
        return counts

    def cache_stats(self) -> dict[str, float]:
        """Totals over ``exchange_token_counts``; ``fraction`` is cached
        over input and is 0.0 for an empty or single-exchange transcript."""
        counts = self.exchange_token_counts()
        total_in = sum(c[0] for c in counts)
        total_cached = sum(c[2] for c in counts)
        fraction = (total_cached / total_in) if total_in else 0.0
        return {
            "input_tokens": float(total_in),
            "cached_tokens": float(total_cached),
            "fraction": fraction,
        }


def cache_stats(transcript: Transcript) -> float:
    """Fraction of input tokens resolved by the prompt-prefix cache."""
    return transcript.cache_stats()["fraction"]


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class ChatProvider(Protocol):
    def complete(
        self, messages: Sequence[Message], tools: Sequence[ToolDef] = ()
    ) -> Message: ...


def request_digest(messages: Sequence[Message]) -> str:
    """Stable key for a request: the sequence of (role, whitespace-normalized
    content, tool-call names).  Tool offerings and call arguments are
    deliberately excluded so recordings survive serialization noise."""
    payload = [
        [m.role, " ".join(m.content.split()), [tc.name for tc in m.tool_calls]]
        for m in messages
    ]
    blob = json.dumps(payload, separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class HttpChatProvider:
    """OpenAI-compatible chat-completions client.

    Credentials and routing come from ``STELLAR_API_KEY``,
    ``STELLAR_API_BASE``, and ``STELLAR_MODEL`` unless given explicitly.
    Transient failures (connection errors, 429, 5xx) are retried up to
    ``max_retries`` times with exponential backoff starting at one second.
    """

    def __init__(
        self,
        api_key: Optional[str] = None,
        base_url: Optional[str] = None,
        model: Optional[str] = None,
        *,
        max_retries: int = 3,
        timeout_s: float = 120.0,
        transcript: Optional[Transcript] = None,
        _sleep: Callable[[float], None] = time.sleep,
        _session: Optional[Any] = None,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get("STELLAR_API_KEY", "")
        self.base_url = (
            base_url if base_url is not None else os.environ.get("STELLAR_API_BASE", "")
        ).rstrip("/")
        self.model = model if model is not None else os.environ.get("STELLAR_MODEL", "")
        if not self.base_url:
            raise ProviderError("no API base URL (set STELLAR_API_BASE)")
        if not self.model:
            raise ProviderError("no model name (set STELLAR_MODEL)")
        self.max_retries = max_retries
        self.timeout_s = timeout_s
        self.transcript = transcript if transcript is not None else Transcript()
        self._sleep = _sleep
        self._session = _session or requests.Session()

    def complete(self, messages: Sequence[Message], tools: Sequence[ToolDef] = ()) -> Message:
        body = {
            "model": self.model,
            "messages": [m.to_wire() for m in messages],
            "tools": [t.to_wire() for t in tools],
            "tool_choice": "auto" if tools else "none",
        }
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Optional[str] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(2 ** (attempt - 1))
            try:
                resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            try:
                reply = Message.from_wire(resp.json()["choices"][0]["message"])
            except (KeyError, IndexError, ValueError, json.JSONDecodeError) as exc:
                raise ProviderError(f"malformed completion payload: {exc}") from exc
            self.transcript.record(messages, reply)
            return reply
        raise ProviderError(f"gave up after {self.max_retries + 1} attempts: {last_error}")


class CallbackProvider:
    """Wraps a plain function; the workhorse for scripted tests."""

    def __init__(
        self,
        fn: Callable[[Sequence[Message], Sequence[ToolDef]], Message],
        transcript: Optional[Transcript] = None,
    ):
        self.fn = fn
        self.transcript = transcript if transcript is not None else Transcript()

    def complete(self, messages: Sequence[Message], tools: Sequence[ToolDef] = ()) -> Message:
        reply = self.fn(messages, tools)
        self.transcript.record(messages, reply)
        return reply


class ReplayProvider:
    """Replays responses recorded by ``RecordingProvider``.

    Each fixture file is named ``<request digest>.json`` and holds one
    response message.  Repeated identical requests replay the recorded
    responses in recording order, then stick on the last one.
    """

    def __init__(self, fixture_dir: str | Path, transcript: Optional[Transcript] = None):
        self.fixture_dir = Path(fixture_dir)
        self.transcript = transcript if transcript is not None else Transcript()
        self._cursor: dict[str, int] = {}

    def complete(self, messages: Sequence[Message], tools: Sequence[ToolDef] = ()) -> Message:
        digest = request_digest(messages)
        path = self.fixture_dir / f"{digest}.json"
        if not path.exists():
            preview = messages[-1].content[:200] if messages else ""
            raise ReplayMissError(
                f"no recording for digest {digest} (last message: {preview!r})"
            )
        recorded = json.loads(path.read_text(encoding="utf-8"))
        responses = recorded["responses"]
        i = self._cursor.get(digest, 0)
        reply = Message.from_wire(responses[min(i, len(responses) - 1)])
        self._cursor[digest] = i + 1
        self.transcript.record(messages, reply)
        return reply


class RecordingProvider:
    """Delegates to another provider and writes replay fixtures."""

    def __init__(self, inner: ChatProvider, fixture_dir: str | Path):
        self.inner = inner
        self.fixture_dir = Path(fixture_dir)
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        self.transcript = Transcript()

    def complete(self, messages: Sequence[Message], tools: Sequence[ToolDef] = ()) -> Message:
        reply = self.inner.complete(messages, tools)
        digest = request_digest(messages)
        path = self.fixture_dir / f"{digest}.json"
        if path.exists():
            recorded = json.loads(path.read_text(encoding="utf-8"))
        else:
            recorded = {"digest": digest, "responses": []}
        recorded["responses"].append(reply.to_wire())
        path.write_text(json.dumps(recorded, indent=2) + "\n", encoding="utf-8")
        self.transcript.record(messages, reply)
        return reply


# ---------------------------------------------------------------------------
# The tool loop
# ---------------------------------------------------------------------------

ToolHandler = Callable[[dict[str, Any]], str]


@dataclass
class LoopResult:
    messages: list[Message]
    final: Message
    steps: int
    tool_calls_made: int
    truncated: bool
    terminal_call: Optional[ToolCall] = None
    terminal_output: str = ""


def run_tool_loop(
    provider: ChatProvider,
    system_prompt: str,
    initial_user: str,
    tools: Sequence[ToolDef],
    handlers: dict[str, ToolHandler],
    *,
    max_steps: int = 24,
    tool_call_budget: int = 16,
    terminal_tool: Optional[str] = None,
) -> LoopResult:
    """Drive a conversation until the model stops calling tools.

    Handler exceptions become tool-error messages instead of crashing the
    loop, so the model can react.  When ``tool_call_budget`` runs out,
    pending calls get a budget-exhausted error and the model is asked once
    more, without tools, to wrap up.  A ``terminal_tool`` call ends the loop
    immediately after its handler runs, but only when the handler succeeded;
    a raised exception means the terminal request was rejected and the
    conversation continues.  ``truncated`` is set whenever the loop ends for
    any reason other than the model stopping on its own.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    history: list[Message] = [system(system_prompt), user(initial_user)]
    names = {t.name for t in tools}
    unknown = set(handlers) - names
    if unknown:
        raise ValueError(f"handlers for undeclared tools: {sorted(unknown)}")

    calls_made = 0
    for step in range(1, max_steps + 1):
        reply = provider.complete(history, tools)
        history.append(reply)
        if not reply.tool_calls:
            return LoopResult(history, reply, step, calls_made, truncated=False)

        over_budget = False
        terminal: Optional[tuple[ToolCall, str]] = None
        for call in reply.tool_calls:
            if calls_made >= tool_call_budget:
                over_budget = True
                history.append(tool_result(call, "error: tool call budget exhausted"))
                continue
            calls_made += 1
            handler = handlers.get(call.name)
            if handler is None:
                history.append(tool_result(call, f"error: unknown tool {call.name!r}"))
                continue
            failed = False
            try:
                output = handler(call.parsed_arguments())
            except Exception as exc:  # the model sees the failure and adapts
                output = f"error: {exc}"
                failed = True
            history.append(tool_result(call, output))
            if call.name == terminal_tool and not failed:
                terminal = (call, output)
        if terminal is not None:
            call, output = terminal
            return LoopResult(
                history,
                history[-1],
                step,
                calls_made,
                truncated=False,
                terminal_call=call,
                terminal_output=output,
            )
        if over_budget:
            history.append(
                user("The tool call budget is exhausted. Summarize your findings now.")
            )
            reply = provider.complete(history, ())
            history.append(reply)
            return LoopResult(history, reply, step + 1, calls_made, truncated=True)

    return LoopResult(history, history[-1], max_steps, calls_made, truncated=True)
