"""Exact flat cosine index over attribute strings and patch embeddings.

Evidence pools are tiny by design, so an exhaustive scan with insertion-order
tie-breaking wins over any approximate structure: retrieval is exact,
deterministic, and permutation-stable. Text embeddings come from a seeded
hashed-trigram projection so no external encoder is required; real vectors
can be substituted through the exchange file format.
"""

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "IndexEntry",
    "RetrievalHit",
    "VectorIndex",
    "EvidenceStore",
    "EvidenceBundle",
    "UnknownConceptError",
    "embed_text",
    "write_embedding_file",
    "read_embedding_file",
]

TRIGRAM_BUCKETS = 4096


class UnknownConceptError(KeyError):
    pass


@dataclass
class IndexEntry:
    entry_id: str
    concept_id: str
    kind: str                 # "attribute" | "patch"
    payload: str
    embedding: np.ndarray
    norm: float = 0.0         # set at insert; norms never change afterwards


@dataclass(frozen=True)
class RetrievalHit:
    entry_id: str
    concept_id: str
    kind: str
    payload: str
    score: float
    rank: int


def _bucket(trigram: str) -> int:
    return zlib.crc32(trigram.encode("utf-8")) % TRIGRAM_BUCKETS


def _bucket_vector(bucket: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, bucket])
    return rng.standard_normal(dim)


def embed_text(text: str, dim: int, seed: int) -> np.ndarray:
    """Hashed character-trigram bag under a seeded random projection, L2-normalized."""
    if dim < 8:
        raise ValueError(f"embedding dim must be >= 8, got {dim}")
    counts = {}
    if len(text) >= 3:
        for i in range(len(text) - 2):
            b = _bucket(text[i : i + 3])
            counts[b] = counts.get(b, 0) + 1
    else:
        # too short for trigrams: fall back to one whole-string feature
        counts[_bucket(f"\x00{text}")] = 1
    vec = np.zeros(dim, dtype=np.float64)
    for bucket in sorted(counts):
        vec += counts[bucket] * _bucket_vector(bucket, dim, seed)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # colliding trigrams cancelling out is astronomically unlikely but cheap to guard
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


class VectorIndex:
    """Append-only exact index; top_k is an exhaustive cosine scan."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("index dim must be >= 1")
        self.dim = dim
        self.entries: list[IndexEntry] = []
        self._ids = set()

    def __len__(self):
        return len(self.entries)

    def insert(self, entry: IndexEntry) -> None:
        vec = np.asarray(entry.embedding, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"embedding shape {vec.shape} != ({self.dim},)")
        if entry.entry_id in self._ids:
            raise ValueError(f"duplicate entry id {entry.entry_id!r}")
        entry.embedding = vec
        entry.norm = float(np.linalg.norm(vec))
        self._ids.add(entry.entry_id)
        self.entries.append(entry)

    def top_k(self, query: np.ndarray, k: int, concept_id=None, kind=None) -> list:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ValueError(f"query shape {query.shape} != ({self.dim},)")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q_norm = float(np.linalg.norm(query))
        scored = []
        for order, entry in enumerate(self.entries):
            if concept_id is not None and entry.concept_id != concept_id:
                continue
            if kind is not None and entry.kind != kind:
                continue
            denom = q_norm * entry.norm
            score = float(entry.embedding @ query / denom) if denom > 0 else 0.0
            scored.append((order, entry, score))
        scored.sort(key=lambda item: (-item[2], item[0]))
        return [
            RetrievalHit(
                entry_id=entry.entry_id,
                concept_id=entry.concept_id,
                kind=entry.kind,
                payload=entry.payload,
                score=score,
                rank=rank,
            )
            for rank, (_, entry, score) in enumerate(scored[:k], start=1)
        ]


@dataclass
class EvidenceBundle:
    concept_id: str
    attributes: list          # (attribute string, score)
    patches: list             # (patch descriptor payload, score)

    @property
    def attribute_texts(self):
        return [text for text, _ in self.attributes]

    @property
    def patch_texts(self):
        return [text for text, _ in self.patches]


@dataclass
class EvidenceStore:
    """Per-concept records plus the two retrieval indexes (text and visual)."""

    text_dim: int
    text_seed: int
    patch_dim: int
    records: dict = field(default_factory=dict)
    attr_index: VectorIndex = None
    patch_index: VectorIndex = None

    def __post_init__(self):
        if self.attr_index is None:
            self.attr_index = VectorIndex(self.text_dim)
        if self.patch_index is None:
            self.patch_index = VectorIndex(self.patch_dim)
        self._profile_vectors = {}

    def embed(self, text: str) -> np.ndarray:
        return embed_text(text, self.text_dim, self.text_seed)

    def register_record(self, concept_id: str, record, attr_vectors=None) -> None:
        """Index a record's attributes; `attr_vectors` substitutes precomputed ones."""
        if concept_id in self.records:
            raise ValueError(f"concept {concept_id!r} already registered")
        if attr_vectors is not None and len(attr_vectors) != len(record.fingerprint_attributes):
            raise ValueError(
                f"{len(attr_vectors)} vectors for {len(record.fingerprint_attributes)} attributes"
            )
        self.records[concept_id] = record
        for i, attr in enumerate(record.fingerprint_attributes):
            vec = self.embed(attr) if attr_vectors is None else attr_vectors[i]
            self.attr_index.insert(
                IndexEntry(
                    entry_id=f"{concept_id}/attr/{i}",
                    concept_id=concept_id,
                    kind="attribute",
                    payload=attr,
                    embedding=vec,
                )
            )
        # profile vectors back concept resolution, not evidence selection
        self._profile_vectors[concept_id] = [
            self.embed(record.concept),
            self.embed(record.caption),
        ]

    def register_patch_entries(self, entries) -> None:
        for entry in entries:
            self.patch_index.insert(entry)

    def concept_ids(self) -> list:
        return sorted(self.records)

    def resolution_score(self, concept_id: str, query_vec, image_embedding=None) -> float:
        """Max cosine over the concept's profile vectors and attributes."""
        best = -1.0
        for vec in self._profile_vectors[concept_id]:
            best = max(best, float(vec @ query_vec))
        hits = self.attr_index.top_k(query_vec, 1, concept_id=concept_id)
        if hits:
            best = max(best, hits[0].score)
        if image_embedding is not None and len(self.patch_index):
            img = np.asarray(image_embedding, dtype=np.float64)
            hits = self.patch_index.top_k(img, 1, concept_id=concept_id)
            if hits:
                best = max(best, hits[0].score)
        return best


def select_evidence(
    store: EvidenceStore, record, query: str, k_attr: int, k_patch: int
) -> EvidenceBundle:
    """Top-k attributes and top-k patches of one concept for one turn.

    The query is scored against attribute strings in the text space and,
    as a stand-in for a shared image space, against patch embeddings via the
    patch index's text projection.
    """
    concept_id = None
    for cid, rec in store.records.items():
        if rec is record or rec == record:
            concept_id = cid
            break
    if concept_id is None:
        raise UnknownConceptError(f"record not registered: {record.concept!r}")
    query_vec = store.embed(query)
    attr_hits = store.attr_index.top_k(query_vec, k_attr, concept_id=concept_id, kind="attribute")
    patches = []
    if k_patch > 0 and len(store.patch_index):
        patch_query = embed_text(query, store.patch_dim, store.text_seed)
        patch_hits = store.patch_index.top_k(
            patch_query, k_patch, concept_id=concept_id, kind="patch"
        )
        patches = [(h.payload, h.score) for h in patch_hits]
    return EvidenceBundle(
        concept_id=concept_id,
        attributes=[(h.payload, h.score) for h in attr_hits],
        patches=patches,
    )


# Exchange file: first line "dim=<d>", then one entry per line:
# entry_id<TAB>v1 v2 ... vd

def write_embedding_file(entries, dim: int, path) -> None:
    lines = [f"dim={dim}"]
    for entry_id, vector in entries:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (dim,):
            raise ValueError(f"vector for {entry_id!r} has shape {vector.shape}, want ({dim},)")
        lines.append(entry_id + "\t" + " ".join(repr(float(x)) for x in vector))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embedding_file(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise ValueError(f"embedding file {path} must start with 'dim=<d>'")
    dim = int(lines[0][4:])
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        entry_id, _, rest = line.partition("\t")
        vector = np.array([float(x) for x in rest.split()], dtype=np.float64)
        if vector.shape != (dim,):
            raise ValueError(f"bad vector width for {entry_id!r} in {path}")
        entries.append((entry_id, vector))
    return dim, entries
