"""Request/response schemas for the HTTP service."""

from pydantic import BaseModel, Field


class RecordModel(BaseModel):
    concept: str
    category: str
    caption: str
    fingerprint_attributes: list[str]


class HealthResponse(BaseModel):
    status: str
    model_fingerprint: str
    concepts: list[str]
    sessions: int


class ValidateRequest(BaseModel):
    text: str
    concept_hint: str = Field(min_length=1)


class ValidateResponse(BaseModel):
    record: RecordModel
    repairs: list[dict]
    warnings: list[str]
    parse_error: str | None = None


class RegisterRequest(BaseModel):
    concept_id: str = Field(min_length=1)
    record: RecordModel


class RegisterResponse(BaseModel):
    concept_id: str
    indexed_attributes: int


class PrefillResponse(BaseModel):
    concept_id: str
    prefix_len: int
    stored: bool
    skipped_up_to_date: bool


class QueryRequest(BaseModel):
    query: str = Field(min_length=1)
    session_id: str = "default"
    max_new_tokens: int | None = Field(default=None, ge=1)


class QueryResponse(BaseModel):
    session_id: str
    concept_id: str
    answer_text: str
    output_token_ids: list[int]
    l_ext: int
    prefill_tokens: int
    concept_prefill_tokens: int
    decode_tokens: int
    latency_ms: float


class SessionInfo(BaseModel):
    session_id: str
    attached_concepts: list[str]
    l_ext: int
    turn_count: int
