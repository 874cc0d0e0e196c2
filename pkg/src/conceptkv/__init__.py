"""conceptkv: per-concept evidence materialized as reusable external KV caches.

Offline, each concept gets a text profile and a pool of mined hard patches;
profiles are prefilled once into key/value caches. At query time the active
concept is resolved, top-matching evidence is retrieved, and decoding runs
in a single pass behind the assembled external prefix.
"""

from .config import CliConfig
from .index import EvidenceStore, VectorIndex, embed_text, select_evidence
from .kernels import DecoderConfig, ToyDecoder, decoder_forward, seeded_model
from .kvstore import (
    CacheRepository,
    ConceptKVCache,
    ExternalPrefix,
    assemble,
    extend,
    load_cache,
    prefill_concept,
    save_cache,
)
from .metadata import ConceptRecord, normalize_record, parse_model_response
from .mining import HardPatch, MiningParams, mine_concept
from .session import ByteTokenizer, Session, answer, ensure_attached, resolve_concept

__version__ = "0.1.0"

__all__ = [
    "CliConfig",
    "EvidenceStore",
    "VectorIndex",
    "embed_text",
    "select_evidence",
    "DecoderConfig",
    "ToyDecoder",
    "decoder_forward",
    "seeded_model",
    "CacheRepository",
    "ConceptKVCache",
    "ExternalPrefix",
    "assemble",
    "extend",
    "load_cache",
    "prefill_concept",
    "save_cache",
    "ConceptRecord",
    "normalize_record",
    "parse_model_response",
    "HardPatch",
    "MiningParams",
    "mine_concept",
    "ByteTokenizer",
    "Session",
    "answer",
    "ensure_attached",
    "resolve_concept",
]
