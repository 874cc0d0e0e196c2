"""Repository layout on disk and the wiring shared by CLI and service.

A repository root holds everything one deployment needs:

    <root>/metadata.json            concept_id -> normalized record
    <root>/metadata_report.json     normalization repairs/warnings per concept
    <root>/caches/<cid>.jkv         context-free concept KV caches
    <root>/mining/<cid>/patches.tsv patch pool manifest
    <root>/mining/<cid>/patches.emb patch embeddings (exchange format)
    <root>/index/attributes.emb     materialized attribute vectors
    <root>/index/patches.emb        merged patch vectors
    <root>/turns.log                one line per answered turn
    <root>/bench/                   benchmark reports
"""

from pathlib import Path

import numpy as np

from .config import CliConfig
from .index import EvidenceStore, IndexEntry, read_embedding_file, write_embedding_file
from .kernels import seeded_model
from .kvstore import CacheRepository
from .metadata import read_metadata_file
from .mining import patch_descriptor, read_patch_manifest

__all__ = ["RepoPaths", "build_model", "build_store", "write_index_files"]


class RepoPaths:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def metadata(self) -> Path:
        return self.root / "metadata.json"

    @property
    def metadata_report(self) -> Path:
        return self.root / "metadata_report.json"

    @property
    def caches(self) -> Path:
        return self.root / "caches"

    @property
    def index_dir(self) -> Path:
        return self.root / "index"

    @property
    def attributes_emb(self) -> Path:
        return self.index_dir / "attributes.emb"

    @property
    def patches_emb(self) -> Path:
        return self.index_dir / "patches.emb"

    @property
    def turns_log(self) -> Path:
        return self.root / "turns.log"

    @property
    def bench_dir(self) -> Path:
        return self.root / "bench"

    def mining_dir(self, concept_id: str) -> Path:
        return self.root / "mining" / concept_id

    def patch_manifest(self, concept_id: str) -> Path:
        return self.mining_dir(concept_id) / "patches.tsv"

    def patch_embeddings(self, concept_id: str) -> Path:
        return self.mining_dir(concept_id) / "patches.emb"

    def cache_repository(self) -> CacheRepository:
        return CacheRepository(self.caches)


def build_model(config: CliConfig):
    return seeded_model(config.seed, config.decoder_config(), dtype=config.compute_dtype)


def _attr_vectors_from_file(paths: RepoPaths):
    if not paths.attributes_emb.exists():
        return None, None
    dim, entries = read_embedding_file(paths.attributes_emb)
    return dim, {entry_id: vec for entry_id, vec in entries}


def _load_patch_entries(paths: RepoPaths, concept_id: str):
    manifest = paths.patch_manifest(concept_id)
    emb_path = paths.patch_embeddings(concept_id)
    if not manifest.exists() or not emb_path.exists():
        return None, []
    dim, raw = read_embedding_file(emb_path)
    by_line = {i + 1: vec for i, (_, vec) in enumerate(raw)}
    patches = read_patch_manifest(manifest, embeddings=by_line)
    entries = [
        IndexEntry(
            entry_id=f"{concept_id}/patch/{i}",
            concept_id=concept_id,
            kind="patch",
            payload=patch_descriptor(patch),
            embedding=np.asarray(patch.embedding, dtype=np.float64),
        )
        for i, patch in enumerate(patches)
    ]
    return dim, entries


def build_store(paths: RepoPaths, config: CliConfig) -> EvidenceStore:
    """Load records and indexes for query time.

    Attribute vectors come from the materialized index file when present
    (allowing substituted external encoders), otherwise from the built-in
    deterministic text embedder. Patch entries come from mining artifacts.
    """
    if not paths.metadata.exists():
        raise FileNotFoundError(
            f"no metadata file at {paths.metadata}; run the validate command first"
        )
    records = read_metadata_file(paths.metadata)
    attr_dim, attr_vectors = _attr_vectors_from_file(paths)

    patch_dim = None
    patch_entries = {}
    for cid in records:
        dim, entries = _load_patch_entries(paths, cid)
        if dim is not None:
            if patch_dim is not None and dim != patch_dim:
                raise ValueError(f"patch embedding dims differ across concepts: {dim} vs {patch_dim}")
            patch_dim = dim
        patch_entries[cid] = entries

    store = EvidenceStore(
        text_dim=attr_dim or config.embed_dim,
        text_seed=config.embed_seed,
        patch_dim=patch_dim or 32,
    )
    for cid in sorted(records):
        vectors = None
        if attr_vectors is not None:
            vectors = [
                attr_vectors[f"{cid}/attr/{i}"]
                for i in range(len(records[cid].fingerprint_attributes))
                if f"{cid}/attr/{i}" in attr_vectors
            ]
            if len(vectors) != len(records[cid].fingerprint_attributes):
                vectors = None  # stale index file; fall back to recompute
        store.register_record(cid, records[cid], attr_vectors=vectors)
        store.register_patch_entries(patch_entries[cid])
    return store


def write_index_files(paths: RepoPaths, store: EvidenceStore) -> dict:
    """Materialize attribute and patch vectors as exchange files."""
    paths.index_dir.mkdir(parents=True, exist_ok=True)
    attr_entries = [(e.entry_id, e.embedding) for e in store.attr_index.entries]
    write_embedding_file(attr_entries, store.attr_index.dim, paths.attributes_emb)
    patch_entries = [(e.entry_id, e.embedding) for e in store.patch_index.entries]
    write_embedding_file(patch_entries, store.patch_index.dim, paths.patches_emb)
    return {"attributes": len(attr_entries), "patches": len(patch_entries)}
