"""Long-running service wrapping the core package.

The app owns one frozen model, one evidence store, and one cache repository;
clients hold named sessions whose external prefixes persist across requests,
so repeated queries about a concept pay its prefill once.
"""

import threading

from fastapi import FastAPI, HTTPException

from ..config import CliConfig
from ..index import EvidenceStore, UnknownConceptError
from ..kvstore import prefill_concept
from ..metadata import (
    MetadataParseError,
    normalize_record,
    parse_model_response,
    record_from_dict,
)
from ..session import ByteTokenizer, Session, UnresolvedConceptError, answer, concept_prefix_text
from ..workspace import RepoPaths, build_model, build_store
from .models import (
    HealthResponse,
    PrefillResponse,
    QueryRequest,
    QueryResponse,
    RecordModel,
    RegisterRequest,
    RegisterResponse,
    SessionInfo,
    ValidateRequest,
    ValidateResponse,
)


class ServiceState:
    def __init__(self, config: CliConfig):
        self.config = config
        self.paths = RepoPaths(config.repo)
        self.model = build_model(config)
        self.tokenizer = ByteTokenizer()
        if self.paths.metadata.exists():
            self.store = build_store(self.paths, config)
        else:
            self.store = EvidenceStore(
                text_dim=config.embed_dim, text_seed=config.embed_seed, patch_dim=32
            )
        self.cache_repo = self.paths.cache_repository()
        # one session is single-threaded; distinct sessions run concurrently
        self.sessions: dict[str, tuple[Session, threading.Lock]] = {}
        self.lock = threading.Lock()

    def session(self, session_id: str) -> tuple[Session, threading.Lock]:
        with self.lock:
            if session_id not in self.sessions:
                session = Session(
                    session_id=session_id,
                    model=self.model,
                    store=self.store,
                    tokenizer=self.tokenizer,
                    cache_repo=self.cache_repo,
                    k_attr=self.config.k_attr,
                    k_patch=self.config.k_patch,
                    max_new_tokens=self.config.max_new_tokens,
                    resolve_floor=self.config.resolve_floor,
                )
                self.sessions[session_id] = (session, threading.Lock())
            return self.sessions[session_id]


def create_app(config: CliConfig | None = None) -> FastAPI:
    state = ServiceState(config or CliConfig())
    app = FastAPI(title="conceptkv", version="0.1.0")
    app.state.service = state

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(
            status="ok",
            model_fingerprint=state.model.fingerprint.hex(),
            concepts=state.store.concept_ids(),
            sessions=len(state.sessions),
        )

    @app.post("/metadata/validate", response_model=ValidateResponse)
    def validate(request: ValidateRequest):
        parse_error = None
        raw = {}
        try:
            raw = parse_model_response(request.text)
        except MetadataParseError as exc:
            parse_error = str(exc)
        record, report = normalize_record(raw, request.concept_hint)
        payload = report.to_dict()
        return ValidateResponse(
            record=RecordModel(
                concept=record.concept,
                category=record.category,
                caption=record.caption,
                fingerprint_attributes=list(record.fingerprint_attributes),
            ),
            repairs=payload["repairs"],
            warnings=payload["warnings"],
            parse_error=parse_error,
        )

    @app.post("/concepts", response_model=RegisterResponse, status_code=201)
    def register(request: RegisterRequest):
        record = record_from_dict(request.record.model_dump())
        with state.lock:
            try:
                state.store.register_record(request.concept_id, record)
            except ValueError as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
        return RegisterResponse(
            concept_id=request.concept_id,
            indexed_attributes=len(record.fingerprint_attributes),
        )

    @app.get("/concepts", response_model=list[str])
    def list_concepts():
        return state.store.concept_ids()

    @app.post("/concepts/{concept_id}/prefill", response_model=PrefillResponse)
    def prefill(concept_id: str):
        record = state.store.records.get(concept_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown concept {concept_id!r}")
        repo = state.cache_repo
        if repo.has(concept_id) and repo.fingerprint_of(concept_id) == state.model.fingerprint:
            cache = repo.load(concept_id)
            return PrefillResponse(
                concept_id=concept_id,
                prefix_len=cache.prefix_len,
                stored=True,
                skipped_up_to_date=True,
            )
        tokens = state.tokenizer.encode(concept_prefix_text(record))
        cache = prefill_concept(state.model, concept_id, tokens)
        repo.save(cache.astype(state.config.store_dtype))
        return PrefillResponse(
            concept_id=concept_id,
            prefix_len=cache.prefix_len,
            stored=True,
            skipped_up_to_date=False,
        )

    @app.post("/query", response_model=QueryResponse)
    def query(request: QueryRequest):
        session, session_lock = state.session(request.session_id)
        try:
            with session_lock:
                result = answer(session, request.query, max_new_tokens=request.max_new_tokens)
        except (UnresolvedConceptError, UnknownConceptError) as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return QueryResponse(
            session_id=session.session_id,
            concept_id=result.concept_id,
            answer_text=result.answer_text,
            output_token_ids=list(result.output_token_ids),
            l_ext=result.l_ext,
            prefill_tokens=result.prefill_tokens,
            concept_prefill_tokens=result.concept_prefill_tokens,
            decode_tokens=result.decode_tokens,
            latency_ms=result.latency_s * 1000.0,
        )

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def session_info(session_id: str):
        with state.lock:
            entry = state.sessions.get(session_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id!r}")
        session, _ = entry
        return SessionInfo(
            session_id=session.session_id,
            attached_concepts=list(session.attached),
            l_ext=session.prefix.l_ext,
            turn_count=session.turn_count,
        )

    return app
