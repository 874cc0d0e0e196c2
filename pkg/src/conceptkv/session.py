"""Query-time pipeline: resolve the concept, attach its cache, decode once.

A session owns an external prefix that only ever grows. Attaching the first
concept loads (or builds) its context-free cache; attaching further concepts
prefills only the missing tokens behind the current prefix, so the prefix
always equals the one-shot prefill of the concatenated concept texts in
canonical (lexicographic) order. Turn tokens and generated tokens live in a
transient cache that dies with the turn; only concept evidence is reused.
"""

import re
import time
from dataclasses import dataclass, field

import numpy as np

from .config import (
    DEFAULT_K_ATTR,
    DEFAULT_K_PATCH,
    DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_RESOLVE_FLOOR,
)
from .index import EvidenceStore, EvidenceBundle, select_evidence
from .kernels import ToyDecoder, decoder_forward
from .kvstore import EMPTY_PREFIX, CacheRepository, assemble, extend, prefill_concept

__all__ = [
    "ByteTokenizer",
    "Session",
    "TurnResult",
    "UnresolvedConceptError",
    "concept_prefix_text",
    "resolve_concept",
    "ensure_attached",
    "build_turn_tokens",
    "answer",
    "format_turn_log_line",
    "TURN_LOG_HEADER",
]

_TAG_RE = re.compile(r"<([^<>]+)>")


class UnresolvedConceptError(LookupError):
    pass


class ByteTokenizer:
    """UTF-8 bytes as token ids 0..255; the toy stack needs nothing richer."""

    vocab_size = 256

    def encode(self, text: str) -> list:
        return list(text.encode("utf-8"))

    def decode(self, token_ids) -> str:
        return bytes(int(t) % 256 for t in token_ids).decode("utf-8", errors="replace")


def concept_prefix_text(record) -> str:
    """Deterministic linearization of a record into the cacheable text prefix."""
    lines = [
        f"concept: {record.concept}",
        f"category: {record.category}",
        f"caption: {record.caption}",
        "attributes:",
    ]
    lines.extend(f"- {attr}" for attr in record.fingerprint_attributes)
    return "\n".join(lines) + "\n"


@dataclass
class TurnResult:
    concept_id: str
    output_token_ids: list
    answer_text: str
    latency_s: float
    l_ext: int
    prefill_tokens: int            # all tokens prefilled this turn
    concept_prefill_tokens: int    # subset spent on attaching concept evidence
    decode_tokens: int
    turn_token_ids: list
    first_logits: np.ndarray


@dataclass
class Session:
    session_id: str
    model: ToyDecoder
    store: EvidenceStore
    tokenizer: ByteTokenizer
    cache_repo: CacheRepository | None = None
    k_attr: int = DEFAULT_K_ATTR
    k_patch: int = DEFAULT_K_PATCH
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    resolve_floor: float = DEFAULT_RESOLVE_FLOOR
    prefix: object = field(default_factory=lambda: EMPTY_PREFIX)
    turn_count: int = 0
    turns: list = field(default_factory=list)
    _base_caches: dict = field(default_factory=dict)      # context-free caches by id
    _attached_tokens: dict = field(default_factory=dict)  # concept id -> token stream

    def __post_init__(self):
        if self.model.config.vocab_size < self.tokenizer.vocab_size:
            raise ValueError(
                f"model vocab {self.model.config.vocab_size} smaller than byte "
                f"tokenizer vocab {self.tokenizer.vocab_size}"
            )

    @property
    def attached(self) -> tuple:
        return self.prefix.ordered_concepts

    def prefix_token_ids(self) -> list:
        tokens = []
        for cid in self.prefix.ordered_concepts:
            tokens.extend(self._attached_tokens[cid])
        return tokens


def resolve_concept(query: str, image_embedding, store: EvidenceStore, floor: float) -> str:
    """Explicit <tag> mention wins; otherwise best retrieval score above floor."""
    if not store.records:
        raise UnresolvedConceptError("concept repository is empty")
    for tag in _TAG_RE.findall(query):
        if tag in store.records:
            return tag
    query_vec = store.embed(query)
    ranked = sorted(
        (
            (-store.resolution_score(cid, query_vec, image_embedding), cid)
            for cid in store.records
        )
    )
    best_score, best_cid = -ranked[0][0], ranked[0][1]
    if best_score < floor:
        raise UnresolvedConceptError(
            f"no concept scored above floor {floor}: best {best_cid!r} at {best_score:.4f}"
        )
    return best_cid


def _base_cache(session: Session, concept_id: str):
    """Context-free cache: in-memory pool, then repository, then fresh prefill.

    Returns (cache, tokens_prefilled).
    """
    if concept_id in session._base_caches:
        return session._base_caches[concept_id], 0
    if session.cache_repo is not None and session.cache_repo.has(concept_id):
        cache = session.cache_repo.load(concept_id)
        if cache.model_fingerprint == session.model.fingerprint:
            dtype = "f64" if session.model.dtype == np.dtype(np.float64) else "f32"
            cache = cache.astype(dtype)
            session._base_caches[concept_id] = cache
            return cache, 0
    record = session.store.records.get(concept_id)
    if record is None:
        raise UnresolvedConceptError(
            f"no cache and no record for concept {concept_id!r}"
        )
    tokens = session.tokenizer.encode(concept_prefix_text(record))
    cache = prefill_concept(session.model, concept_id, tokens)
    session._base_caches[concept_id] = cache
    return cache, len(tokens)


def _concept_tokens(session: Session, concept_id: str) -> list:
    """Token stream for a concept without running the model."""
    if concept_id in session._base_caches:
        return list(session._base_caches[concept_id].prefix_tokens)
    if session.cache_repo is not None and session.cache_repo.has(concept_id):
        cache = session.cache_repo.load(concept_id)
        if cache.model_fingerprint == session.model.fingerprint:
            return list(cache.prefix_tokens)
    record = session.store.records.get(concept_id)
    if record is None:
        raise UnresolvedConceptError(f"no cache and no record for concept {concept_id!r}")
    return session.tokenizer.encode(concept_prefix_text(record))


def ensure_attached(session: Session, concept_id: str) -> int:
    """Attach a concept's evidence cache; returns prefill tokens spent.

    Re-attaching costs nothing. A concept that extends the canonical order is
    prefilled behind the current prefix; one that lands mid-order forces a
    rebuild so the prefix stays the exact prefill of the canonical stream.
    """
    if concept_id in session.prefix.ordered_concepts:
        return 0
    if concept_id not in session.store.records and not (
        session.cache_repo is not None and session.cache_repo.has(concept_id)
    ):
        raise UnresolvedConceptError(f"unknown concept {concept_id!r}")
    target_order = sorted(set(session.prefix.ordered_concepts) | {concept_id})
    spent = 0
    if tuple(target_order) == session.prefix.ordered_concepts + (concept_id,):
        if session.prefix.l_ext == 0:
            cache, cost = _base_cache(session, concept_id)
            spent += cost
            session.prefix = assemble([cache])
            session._attached_tokens[concept_id] = list(cache.prefix_tokens)
        else:
            tokens = _concept_tokens(session, concept_id)
            in_context = prefill_concept(
                session.model, concept_id, tokens, past=session.prefix
            )
            spent += len(tokens)
            session.prefix = extend(session.prefix, in_context)
            session._attached_tokens[concept_id] = tokens
    else:
        # rebuild in canonical order; earlier concepts keep their token streams
        prefix = EMPTY_PREFIX
        for i, cid in enumerate(target_order):
            if i == 0:
                base, cost = _base_cache(session, cid)
                spent += cost
                tokens = list(base.prefix_tokens)
                prefix = assemble([base])
            else:
                tokens = _concept_tokens(session, cid)
                in_context = prefill_concept(session.model, cid, tokens, past=prefix)
                spent += len(tokens)
                prefix = extend(prefix, in_context)
            session._attached_tokens[cid] = tokens
        session.prefix = prefix
    return spent


def build_turn_tokens(bundle: EvidenceBundle, query: str, tokenizer: ByteTokenizer) -> list:
    """Fixed frame: selected attributes, then patch descriptors, then the query."""
    if not query:
        raise ValueError("query must be non-empty")
    lines = ["evidence:"]
    lines.extend(f"- {text} ({score:.4f})" for text, score in bundle.attributes)
    lines.extend(f"- {text} ({score:.4f})" for text, score in bundle.patches)
    lines.append(f"query: {query}")
    lines.append("answer:")
    return tokenizer.encode("\n".join(lines) + "\n")


def greedy_decode(model: ToyDecoder, turn_tokens, prefix, max_new_tokens: int):
    """Single-pass decode behind an external prefix, then greedy steps.

    Returns (output_ids, first_logits). Ties in the argmax resolve to the
    lowest token id. The per-turn cache is local to this call.
    """
    logits, new_kv = decoder_forward(
        model, turn_tokens, past=prefix.layers if prefix.l_ext else None
    )
    if prefix.l_ext:
        past = [
            (np.concatenate([pk, nk], axis=0), np.concatenate([pv, nv], axis=0))
            for (pk, pv), (nk, nv) in zip(prefix.layers, new_kv)
        ]
    else:
        past = list(new_kv)
    first_logits = logits[-1].copy()
    output = []
    next_token = int(np.argmax(first_logits))
    for _ in range(max_new_tokens):
        output.append(next_token)
        if len(output) == max_new_tokens:
            break
        step_logits, step_kv = decoder_forward(model, [next_token], past=past)
        past = [
            (np.concatenate([pk, nk], axis=0), np.concatenate([pv, nv], axis=0))
            for (pk, pv), (nk, nv) in zip(past, step_kv)
        ]
        next_token = int(np.argmax(step_logits[-1]))
    return output, first_logits


def answer(session: Session, query: str, image_embedding=None, max_new_tokens=None) -> TurnResult:
    """One turn: resolve, attach, select evidence, decode greedily once."""
    start = time.perf_counter()
    budget = session.max_new_tokens if max_new_tokens is None else max_new_tokens
    concept_id = resolve_concept(query, image_embedding, session.store, session.resolve_floor)
    concept_spent = ensure_attached(session, concept_id)
    record = session.store.records[concept_id]
    bundle = select_evidence(session.store, record, query, session.k_attr, session.k_patch)
    turn_tokens = build_turn_tokens(bundle, query, session.tokenizer)
    output, first_logits = greedy_decode(session.model, turn_tokens, session.prefix, budget)
    latency = time.perf_counter() - start
    result = TurnResult(
        concept_id=concept_id,
        output_token_ids=output,
        answer_text=session.tokenizer.decode(output),
        latency_s=latency,
        l_ext=session.prefix.l_ext,
        prefill_tokens=concept_spent + len(turn_tokens),
        concept_prefill_tokens=concept_spent,
        decode_tokens=len(output),
        turn_token_ids=turn_tokens,
        first_logits=first_logits,
    )
    session.turn_count += 1
    session.turns.append(result)
    return result


TURN_LOG_HEADER = "session_id\tconcept\tl_ext\tprefill_tokens\tdecode_tokens\tlatency_ms"


def format_turn_log_line(session: Session, result: TurnResult) -> str:
    return "\t".join(
        [
            session.session_id,
            result.concept_id,
            str(result.l_ext),
            str(result.prefill_tokens),
            str(result.decode_tokens),
            f"{result.latency_s * 1000.0:.3f}",
        ]
    )
