"""Offline RAG pipeline over the file-system manual.

The manual is split into overlapping whitespace-token chunks, embedded, and
indexed for cosine retrieval.  For each writable candidate parameter the
pipeline retrieves context for the fixed usage question, asks the model
whether that context is sufficient and, if so, for a structured description
with a value range; binary switches and low-impact parameters are then
filtered out.  Parameters the manual cannot support are dropped rather than
guessed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import string
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .agent import ChatProvider, Message, system, user
from .core import Impact, ParameterSpec, range_from_dict, range_to_dict
from .resources import prompt_text

log = logging.getLogger(__name__)

DEFAULT_CHUNK_TOKENS = 1024
DEFAULT_OVERLAP_TOKENS = 20
DEFAULT_TOP_K = 20
DEFAULT_EMBED_DIM = 256

QUESTION_TEMPLATE = "How do I use the parameter {name}?"


class ExtractionError(Exception):
    """A pipeline stage failed; the message is prefixed with the stage."""


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------


@dataclass
class Chunk:
    id: int
    text: str
    token_span: tuple[int, int]  # [start, end) in document token indices
    embedding: Optional[np.ndarray] = None

    @property
    def token_count(self) -> int:
        return self.token_span[1] - self.token_span[0]


def chunk_document(
    text: str,
    chunk_tokens: int = DEFAULT_CHUNK_TOKENS,
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS,
) -> list[Chunk]:
    """Split on whitespace into chunks of ``chunk_tokens`` tokens, strided
    ``chunk_tokens - overlap_tokens`` apart, the final chunk truncated at
    the document end.  A 2048-token document at the 1024/20 defaults gives
    spans [0,1024), [1004,2028), [2008,2048)."""
    if chunk_tokens < 1:
        raise ValueError("chunk_tokens must be >= 1")
    if not 0 <= overlap_tokens < chunk_tokens:
        raise ValueError("overlap_tokens must satisfy 0 <= overlap < chunk_tokens")
    tokens = text.split()
    if not tokens:
        raise ValueError("empty document")
    stride = chunk_tokens - overlap_tokens
    chunks = []
    for i, start in enumerate(range(0, max(len(tokens) - overlap_tokens, 1), stride)):
        end = min(start + chunk_tokens, len(tokens))
        chunks.append(Chunk(id=i, text=" ".join(tokens[start:end]), token_span=(start, end)))
    return chunks


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _normalize_token(token: str) -> str:
    return token.strip(string.punctuation).lower()


class HashedEmbedder:
    """Deterministic signed hashed bag-of-words embeddings, L2-normalized.

    No network and no model weights, so the index is reproducible anywhere;
    an empty text embeds to the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for raw in text.split():
            token = _normalize_token(raw)
            if not token:
                continue
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            idx = int.from_bytes(digest[:4], "big") % self.dim
            vec[idx] += 1.0 if digest[4] & 1 else -1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        return vec

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


@dataclass
class VectorIndex:
    chunks: list[Chunk]
    dim: int

    def __post_init__(self) -> None:
        ids = [c.id for c in self.chunks]
        if len(set(ids)) != len(ids):
            raise ValueError("chunk ids must be unique")
        for c in self.chunks:
            if c.embedding is None or c.embedding.shape != (self.dim,):
                raise ValueError(f"chunk {c.id} not embedded at dim {self.dim}")

    def __len__(self) -> int:
        return len(self.chunks)


def embed_chunks(
    chunks: Sequence[Chunk],
    provider: EmbeddingProvider,
    *,
    max_retries: int = 3,
    _sleep: Callable[[float], None] = lambda s: None,
) -> VectorIndex:
    """Embed every chunk (order preserved) and build the index.  Provider
    failures are retried with backoff; a wrong-dimension vector is an error
    naming the chunk."""
    texts = [c.text for c in chunks]
    last_exc: Optional[Exception] = None
    vectors: Optional[list[np.ndarray]] = None
    for attempt in range(max_retries + 1):
        if attempt:
            _sleep(2 ** (attempt - 1))
        try:
            vectors = provider.embed(texts)
            break
        except Exception as exc:
            last_exc = exc
    if vectors is None:
        ids = [c.id for c in chunks]
        raise ExtractionError(f"embedding failed for chunks {ids}: {last_exc}")
    if len(vectors) != len(chunks):
        raise ExtractionError(f"provider returned {len(vectors)} vectors for {len(chunks)} chunks")
    for chunk, vec in zip(chunks, vectors):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (provider.dim,):
            raise ExtractionError(
                f"chunk {chunk.id}: embedding dimension {vec.shape} != {provider.dim}"
            )
        chunk.embedding = vec
    return VectorIndex(chunks=list(chunks), dim=provider.dim)


def query_index(
    index: VectorIndex,
    question: str,
    k: int = DEFAULT_TOP_K,
    provider: Optional[EmbeddingProvider] = None,
) -> list[tuple[Chunk, float]]:
    """Top-k chunks by cosine similarity to the question, ties broken toward
    the lower chunk id.  Stored embeddings are unit-length, so the dot
    product with the normalized query is the cosine."""
    if k <= 0:
        raise ValueError("k must be >= 1")
    if not index.chunks:
        raise ValueError("index is empty")
    provider = provider or HashedEmbedder(index.dim)
    (qvec,) = provider.embed([question])
    matrix = np.vstack([c.embedding for c in index.chunks])
    scores = matrix @ np.asarray(qvec, dtype=np.float64)
    order = sorted(range(len(index.chunks)), key=lambda i: (-scores[i], index.chunks[i].id))
    return [(index.chunks[i], float(scores[i])) for i in order[:k]]


def build_manual_index(
    text: str,
    chunk_tokens: int = DEFAULT_CHUNK_TOKENS,
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS,
    provider: Optional[EmbeddingProvider] = None,
) -> VectorIndex:
    provider = provider or HashedEmbedder()
    return embed_chunks(chunk_document(text, chunk_tokens, overlap_tokens), provider)


# ---------------------------------------------------------------------------
# Candidate lists
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateParameter:
    path: str
    writable: bool

    @property
    def name(self) -> str:
        return self.path.rstrip("/").rsplit("/", 1)[-1]


def parse_candidates(text: str) -> list[CandidateParameter]:
    """One candidate per line: ``<path> <rw|ro>``.  Blank lines and ``#``
    comments are skipped."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("rw", "ro"):
            raise ValueError(f"line {lineno}: expected '<path> <rw|ro>', got {line!r}")
        out.append(CandidateParameter(path=parts[0], writable=parts[1] == "rw"))
    return out


# ---------------------------------------------------------------------------
# Structured model calls
# ---------------------------------------------------------------------------


def parameter_question(name: str) -> str:
    return QUESTION_TEMPLATE.format(name=name)


def _parse_json_object(content: str) -> dict:
    text = content.strip()
    if text.startswith("```"):
        text = text.strip("`")
        if text.startswith("json"):
            text = text[4:]
        text = text.strip()
    try:
        out = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("{"), text.rfind("}")
        if start < 0 or end <= start:
            raise ExtractionError("no JSON object in reply")
        try:
            out = json.loads(text[start : end + 1])
        except json.JSONDecodeError as exc:
            raise ExtractionError(f"invalid JSON: {exc}")
    if not isinstance(out, dict):
        raise ExtractionError("reply must be a single JSON object")
    return out


def structured_call(
    provider: ChatProvider,
    messages: list[Message],
    validate,
    max_retries: int = 3,
):
    """Ask for one JSON object; on a malformed reply, show the model its
    error and re-prompt, at most ``max_retries`` times, then fail hard."""
    history = list(messages)
    last_error = "no reply"
    for _ in range(max_retries + 1):
        reply = provider.complete(history)
        history.append(reply)
        try:
            return validate(_parse_json_object(reply.content))
        except ExtractionError as exc:
            last_error = str(exc)
            history.append(
                user(
                    f"Your reply was rejected: {exc}. "
                    "Respond again with exactly one valid JSON object and nothing else."
                )
            )
    raise ExtractionError(f"schema still violated after {max_retries} retries: {last_error}")


# ---------------------------------------------------------------------------
# Assessment and filtering
# ---------------------------------------------------------------------------


def _validate_assessment(obj: dict, name: str, path: str) -> Optional[ParameterSpec]:
    if not isinstance(obj.get("sufficient"), bool):
        raise ExtractionError("'sufficient' must be a boolean")
    if not obj["sufficient"]:
        return None
    for key in ("description", "io_impact", "range"):
        if key not in obj:
            raise ExtractionError(f"missing key {key!r}")
    if not isinstance(obj["description"], str) or not obj["description"].strip():
        raise ExtractionError("'description' must be a nonempty string")
    if not isinstance(obj["io_impact"], str):
        raise ExtractionError("'io_impact' must be a string")
    if not isinstance(obj["range"], dict):
        raise ExtractionError("'range' must be an object")
    try:
        rng = range_from_dict(obj["range"])
    except Exception as exc:
        raise ExtractionError(f"bad range: {exc}")
    return ParameterSpec(
        name=name,
        path=path,
        description=obj["description"],
        io_impact=obj["io_impact"],
        range=rng,
    )


def assess_and_describe(
    param: CandidateParameter,
    chunks: Sequence[tuple[Chunk, float]],
    model: ChatProvider,
    *,
    max_retries: int = 3,
) -> Optional[ParameterSpec]:
    """One structured call: is the retrieved context sufficient, and if so,
    what are the parameter's description, I/O impact, and range?  Returns
    None when the context is insufficient; raises after persistent schema
    violations."""
    name = param.name
    question = parameter_question(name)
    context = "\n\n".join(f"[chunk {c.id}]\n{c.text}" for c, _ in chunks)
    spec = structured_call(
        model,
        [
            system(prompt_text("extraction_system")),
            user(
                f"Question: {question}\n\n"
                f"Manual context:\n{context}\n\n"
                f"Parameter '{name}' is settable at {param.path}. Reply with one "
                "JSON object with keys: sufficient (boolean), description (string), "
                "io_impact (string), range (object). If the context does not "
                "document this parameter well enough to state its purpose and "
                "valid range, reply with sufficient=false and omit the rest. "
                'The range object is one of {"kind": "static_int", "min": int, '
                '"max": int}, {"kind": "choices", "values": [...]}, or '
                '{"kind": "expr", "min_expr": "...", "max_expr": "..."} where '
                "bound expressions may reference system facts and other "
                "parameter names."
            ),
        ],
        lambda obj: _validate_assessment(obj, name, param.path),
        max_retries,
    )
    if spec is not None:
        spec.source_chunks = tuple(c.id for c, _ in chunks)
    return spec


def _validate_classification(obj: dict) -> tuple[bool, Impact, str]:
    if not isinstance(obj.get("is_binary"), bool):
        raise ExtractionError("'is_binary' must be a boolean")
    if obj.get("impact") not in ("high", "low"):
        raise ExtractionError("'impact' must be 'high' or 'low'")
    if not isinstance(obj.get("reasoning"), str) or not obj["reasoning"].strip():
        raise ExtractionError("'reasoning' must be a nonempty string")
    return obj["is_binary"], Impact(obj["impact"]), obj["reasoning"]


def filter_binary_and_impact(
    specs: Sequence[ParameterSpec],
    model: ChatProvider,
    *,
    max_retries: int = 3,
) -> tuple[list[ParameterSpec], dict[str, str]]:
    """Classify each described parameter; drop binary on/off switches, then
    drop low-impact parameters.  Returns the survivors (impact set to high)
    and a map of dropped parameter -> model reasoning."""
    kept: list[ParameterSpec] = []
    dropped: dict[str, str] = {}
    classify_system = prompt_text("classification_system")
    for spec in specs:
        is_binary, impact, reasoning = structured_call(
            model,
            [
                system(classify_system),
                user(
                    f"Parameter: {spec.name}\n"
                    f"Description: {spec.description}\n"
                    f"I/O impact: {spec.io_impact}\n\n"
                    "Is this a binary on/off switch, and is it likely to have a "
                    "significant performance impact? Reply with one JSON object: "
                    '{"is_binary": true|false, "impact": "high"|"low", '
                    '"reasoning": "..."}'
                ),
            ],
            _validate_classification,
            max_retries,
        )
        if is_binary:
            dropped[spec.name] = f"binary: {reasoning}"
            continue
        if impact is Impact.LOW:
            dropped[spec.name] = f"low impact: {reasoning}"
            continue
        spec.is_binary = False
        spec.impact = Impact.HIGH
        kept.append(spec)
    return kept, dropped


# ---------------------------------------------------------------------------
# The end-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass
class ExtractionResult:
    specs: list[ParameterSpec]
    skipped_readonly: list[str] = field(default_factory=list)
    insufficient: list[str] = field(default_factory=list)
    filtered: dict[str, str] = field(default_factory=dict)  # name -> drop reasoning
    retrieved_chunks: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def stage_counts(self) -> dict[str, int]:
        return {
            "candidates": len(self.skipped_readonly)
            + len(self.insufficient)
            + len(self.filtered)
            + len(self.specs),
            "writable": len(self.insufficient) + len(self.filtered) + len(self.specs),
            "sufficient": len(self.filtered) + len(self.specs),
            "final": len(self.specs),
        }


def extract_pipeline(
    manual_text: str,
    candidates: Sequence[CandidateParameter],
    model: ChatProvider,
    embedder: Optional[EmbeddingProvider] = None,
    *,
    chunk_tokens: int = DEFAULT_CHUNK_TOKENS,
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS,
    k: int = DEFAULT_TOP_K,
    max_retries: int = 3,
) -> ExtractionResult:
    """chunk -> embed -> per-candidate retrieve -> assess/describe -> filter.

    Stage failures carry a stage label in the error message.  The final spec
    set is always a subset of the writable candidates.
    """
    if not candidates:
        log.warning("empty candidate list: extraction produces an empty spec set")
        return ExtractionResult(specs=[])
    embedder = embedder or HashedEmbedder()
    try:
        index = build_manual_index(manual_text, chunk_tokens, overlap_tokens, embedder)
    except (ValueError, ExtractionError) as exc:
        raise ExtractionError(f"indexing: {exc}") from exc

    result = ExtractionResult(specs=[])
    described: list[ParameterSpec] = []
    for cand in candidates:
        if not cand.writable:
            result.skipped_readonly.append(cand.name)
            continue
        hits = query_index(index, parameter_question(cand.name), k, embedder)
        result.retrieved_chunks[cand.name] = tuple(c.id for c, _ in hits)
        try:
            spec = assess_and_describe(cand, hits, model, max_retries=max_retries)
        except ExtractionError as exc:
            raise ExtractionError(f"assess({cand.name}): {exc}") from exc
        if spec is None:
            result.insufficient.append(cand.name)
        else:
            described.append(spec)

    try:
        result.specs, result.filtered = filter_binary_and_impact(
            described, model, max_retries=max_retries
        )
    except ExtractionError as exc:
        raise ExtractionError(f"filter: {exc}") from exc
    return result


# ---------------------------------------------------------------------------
# Scoring against an answer key
# ---------------------------------------------------------------------------


@dataclass
class ExtractionScore:
    precision: float
    recall: float
    matched: list[str]
    spurious: list[str]
    missed: list[str]
    range_mismatches: list[str]


def score_extraction(
    accepted: Sequence[ParameterSpec],
    answer_key: Sequence[ParameterSpec],
) -> ExtractionScore:
    """Precision and recall by parameter name against an answer key, plus
    the matched names whose extracted range differs from the key's."""
    got = {s.name: s for s in accepted}
    want = {s.name: s for s in answer_key}
    matched = sorted(got.keys() & want.keys())
    spurious = sorted(got.keys() - want.keys())
    missed = sorted(want.keys() - got.keys())
    precision = len(matched) / len(got) if got else (1.0 if not want else 0.0)
    recall = len(matched) / len(want) if want else 1.0
    mismatches = [
        name
        for name in matched
        if range_to_dict(got[name].range) != range_to_dict(want[name].range)
    ]
    return ExtractionScore(
        precision=precision,
        recall=recall,
        matched=matched,
        spurious=spurious,
        missed=missed,
        range_mismatches=mismatches,
    )
