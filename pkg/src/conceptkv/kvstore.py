"""External key/value caches: build, assemble, extend, persist.

A concept cache is the layer-wise K/V produced by one prefill of the
concept's text prefix on the frozen decoder. Caches concatenate along the
sequence dimension into an external prefix that decoding attends to with a
position offset of the prefix length.

Repository caches are built context-free at positions 0..n-1. When a
session extends a non-empty prefix, the new concept is prefilled *in
context* (behind the existing prefix, at offset positions), so the
assembled result is exactly the prefill of the concatenated token stream.
"""

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import ToyDecoder, decoder_forward

__all__ = [
    "ConceptKVCache",
    "ExternalPrefix",
    "CacheRepository",
    "CacheFormatError",
    "prefill_concept",
    "assemble",
    "extend",
    "save_cache",
    "load_cache",
    "EMPTY_PREFIX",
]

MAGIC = b"JKV1"
FORMAT_VERSION = 1
DTYPE_CODES = {"f16": 0, "f32": 1}
CODE_DTYPES = {0: "f16", 1: "f32"}
NP_DTYPES = {"f16": np.dtype("<f2"), "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CacheFormatError(ValueError):
    """Raised on magic/version mismatch, truncation, or checksum failure."""


@dataclass(eq=False)
class ConceptKVCache:
    concept_id: str
    prefix_tokens: tuple
    layers: list                      # per layer (K, V), each prefix_len x (heads*d_k)
    dtype: str                        # f16 | f32 | f64 (array dtype held in `layers`)
    model_fingerprint: bytes
    num_heads: int
    head_dim: int
    position_offset: int = 0          # absolute position of the first row; 0 for repository caches
    prefix_len: int = field(init=False)

    def __post_init__(self):
        self.prefix_tokens = tuple(int(t) for t in self.prefix_tokens)
        self.prefix_len = len(self.prefix_tokens)
        if self.prefix_len < 1:
            raise ValueError("cache prefix must be non-empty")
        width = self.num_heads * self.head_dim
        for k, v in self.layers:
            if k.shape != (self.prefix_len, width) or v.shape != (self.prefix_len, width):
                raise ValueError(
                    f"layer arrays must be ({self.prefix_len}, {width}), "
                    f"got K {k.shape} V {v.shape}"
                )

    def __eq__(self, other):
        if not isinstance(other, ConceptKVCache):
            return NotImplemented
        return (
            self.concept_id == other.concept_id
            and self.prefix_tokens == other.prefix_tokens
            and self.dtype == other.dtype
            and self.model_fingerprint == other.model_fingerprint
            and self.num_heads == other.num_heads
            and self.head_dim == other.head_dim
            and self.position_offset == other.position_offset
            and len(self.layers) == len(other.layers)
            and all(
                a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
                for a, b in zip(self.layers, other.layers)
            )
        )

    def astype(self, dtype: str) -> "ConceptKVCache":
        """Copy with arrays converted to another dtype (f16 upcasts losslessly)."""
        np_dtype = NP_DTYPES[dtype]
        layers = [(k.astype(np_dtype), v.astype(np_dtype)) for k, v in self.layers]
        return ConceptKVCache(
            concept_id=self.concept_id,
            prefix_tokens=self.prefix_tokens,
            layers=layers,
            dtype=dtype,
            model_fingerprint=self.model_fingerprint,
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            position_offset=self.position_offset,
        )


@dataclass(eq=False)
class ExternalPrefix:
    ordered_concepts: tuple
    l_ext: int
    layers: list  # per layer (K_ext, V_ext); empty list for the empty prefix

    def __eq__(self, other):
        if not isinstance(other, ExternalPrefix):
            return NotImplemented
        return (
            self.ordered_concepts == other.ordered_concepts
            and self.l_ext == other.l_ext
            and len(self.layers) == len(other.layers)
            and all(
                a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
                for a, b in zip(self.layers, other.layers)
            )
        )

    def tobytes(self) -> bytes:
        parts = ["|".join(self.ordered_concepts).encode()]
        for k, v in self.layers:
            parts.append(k.tobytes())
            parts.append(v.tobytes())
        return b"\x00".join(parts)


EMPTY_PREFIX = ExternalPrefix(ordered_concepts=(), l_ext=0, layers=[])


def _dtype_name(np_dtype) -> str:
    table = {np.dtype(np.float16): "f16", np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
    return table[np.dtype(np_dtype)]


def prefill_concept(
    model: ToyDecoder,
    concept_id: str,
    prefix_tokens,
    past: ExternalPrefix | None = None,
) -> ConceptKVCache:
    """One-time prefill of a concept's token prefix; the model is untouched.

    Without `past`, K/V carry rotary positions 0..n-1 and depend on nothing
    but the concept's own tokens. With `past`, the tokens are prefilled
    behind the given prefix (positions past.l_ext..), which is how missing
    concepts join an already attached prefix.
    """
    tokens = list(prefix_tokens)
    if len(tokens) == 0:
        raise ValueError("cannot prefill an empty prefix")
    offset = 0
    layers_past = None
    if past is not None and past.l_ext > 0:
        offset = past.l_ext
        layers_past = past.layers
    _, new_kv = decoder_forward(model, tokens, past=layers_past)
    return ConceptKVCache(
        concept_id=concept_id,
        prefix_tokens=tuple(tokens),
        layers=new_kv,
        dtype=_dtype_name(new_kv[0][0].dtype),
        model_fingerprint=model.fingerprint,
        num_heads=model.config.num_heads,
        head_dim=model.config.head_dim,
        position_offset=offset,
    )


def assemble(caches) -> ExternalPrefix:
    """Concatenate caches along the sequence dimension, in the given order."""
    caches = list(caches)
    if not caches:
        return ExternalPrefix(ordered_concepts=(), l_ext=0, layers=[])
    ids = [c.concept_id for c in caches]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate concept ids in assembly: {ids}")
    first = caches[0]
    for c in caches[1:]:
        if c.model_fingerprint != first.model_fingerprint:
            raise ValueError(
                f"fingerprint mismatch: cache {c.concept_id!r} was built by a "
                f"different model than {first.concept_id!r}"
            )
        if c.dtype != first.dtype:
            raise ValueError(f"dtype mismatch: {c.dtype} vs {first.dtype}")
        if len(c.layers) != len(first.layers):
            raise ValueError("layer count mismatch between caches")
    layers = []
    for layer in range(len(first.layers)):
        k = np.concatenate([c.layers[layer][0] for c in caches], axis=0)
        v = np.concatenate([c.layers[layer][1] for c in caches], axis=0)
        layers.append((k, v))
    return ExternalPrefix(
        ordered_concepts=tuple(ids),
        l_ext=sum(c.prefix_len for c in caches),
        layers=layers,
    )


def extend(prefix: ExternalPrefix, cache: ConceptKVCache) -> ExternalPrefix:
    """Append one cache; exactly assemble(existing order + [cache])."""
    if cache.concept_id in prefix.ordered_concepts:
        raise ValueError(f"concept {cache.concept_id!r} already in prefix")
    if prefix.l_ext == 0:
        return assemble([cache])
    layers = []
    for layer, (k_ext, v_ext) in enumerate(prefix.layers):
        if cache.dtype != _dtype_name(k_ext.dtype):
            raise ValueError(f"dtype mismatch: prefix {k_ext.dtype} vs cache {cache.dtype}")
        k = np.concatenate([k_ext, cache.layers[layer][0]], axis=0)
        v = np.concatenate([v_ext, cache.layers[layer][1]], axis=0)
        layers.append((k, v))
    return ExternalPrefix(
        ordered_concepts=prefix.ordered_concepts + (cache.concept_id,),
        l_ext=prefix.l_ext + cache.prefix_len,
        layers=layers,
    )


# Cache file layout (little-endian, bit-exact):
#   magic "JKV1" | u16 version | u8 dtype code (0=f16, 1=f32)
#   u32 num_layers | u32 num_heads | u32 head_dim | u32 prefix_len
#   32-byte model fingerprint
#   prefix_len x u32 token ids
#   per layer: K payload then V payload, row-major prefix_len x (heads*d_k)
#   u32 CRC32 over everything above

def save_cache(cache: ConceptKVCache, path) -> None:
    if cache.position_offset != 0:
        raise ValueError(
            "only context-free caches (position_offset 0) are persistable; "
            "in-context caches are session-transient"
        )
    if cache.dtype not in DTYPE_CODES:
        raise ValueError(f"file format stores f16/f32 payloads, not {cache.dtype}")
    np_dtype = NP_DTYPES[cache.dtype]
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HB", FORMAT_VERSION, DTYPE_CODES[cache.dtype])
    buf += struct.pack(
        "<IIII", len(cache.layers), cache.num_heads, cache.head_dim, cache.prefix_len
    )
    buf += cache.model_fingerprint
    buf += struct.pack(f"<{cache.prefix_len}I", *cache.prefix_tokens)
    for k, v in cache.layers:
        buf += np.ascontiguousarray(k, dtype=np_dtype).tobytes()
        buf += np.ascontiguousarray(v, dtype=np_dtype).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_cache(path) -> ConceptKVCache:
    data = Path(path).read_bytes()
    if len(data) < 4 + 3 + 16 + 32 + 4:
        raise CacheFormatError(f"truncated cache file: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CacheFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CacheFormatError(
            f"checksum failure: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    off = 4
    version, dtype_code = struct.unpack_from("<HB", data, off)
    off += 3
    if version != FORMAT_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    if dtype_code not in CODE_DTYPES:
        raise CacheFormatError(f"unknown dtype code {dtype_code}")
    dtype = CODE_DTYPES[dtype_code]
    np_dtype = NP_DTYPES[dtype]
    num_layers, num_heads, head_dim, prefix_len = struct.unpack_from("<IIII", data, off)
    off += 16
    fingerprint = data[off : off + 32]
    off += 32
    tokens = struct.unpack_from(f"<{prefix_len}I", data, off)
    off += 4 * prefix_len
    width = num_heads * head_dim
    payload = prefix_len * width * np_dtype.itemsize
    expected = off + num_layers * 2 * payload + 4
    if len(data) != expected:
        raise CacheFormatError(f"truncated cache file: {len(data)} bytes, expected {expected}")
    layers = []
    for _ in range(num_layers):
        k = np.frombuffer(data, dtype=np_dtype, count=prefix_len * width, offset=off)
        off += payload
        v = np.frombuffer(data, dtype=np_dtype, count=prefix_len * width, offset=off)
        off += payload
        layers.append((k.reshape(prefix_len, width).copy(), v.reshape(prefix_len, width).copy()))
    return ConceptKVCache(
        concept_id=Path(path).stem,
        prefix_tokens=tokens,
        layers=layers,
        dtype=dtype,
        model_fingerprint=fingerprint,
        num_heads=num_heads,
        head_dim=head_dim,
    )


class CacheRepository:
    """One `<concept_id>.jkv` file per concept under a root directory.

    Writes go through a temp file and an atomic rename, so concurrent
    readers always see a complete file (last write wins per concept).
    """

    SUFFIX = ".jkv"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, concept_id: str) -> Path:
        if "/" in concept_id or "\\" in concept_id or concept_id in ("", ".", ".."):
            raise ValueError(f"invalid concept id for file storage: {concept_id!r}")
        return self.root / f"{concept_id}{self.SUFFIX}"

    def has(self, concept_id: str) -> bool:
        return self.path_for(concept_id).exists()

    def save(self, cache: ConceptKVCache) -> Path:
        path = self.path_for(cache.concept_id)
        save_cache(cache, path)
        return path

    def load(self, concept_id: str) -> ConceptKVCache:
        path = self.path_for(concept_id)
        if not path.exists():
            raise FileNotFoundError(f"no cache for concept {concept_id!r} under {self.root}")
        return load_cache(path)

    def concept_ids(self) -> list:
        return sorted(p.stem for p in self.root.glob(f"*{self.SUFFIX}"))

    def fingerprint_of(self, concept_id: str) -> bytes:
        # Header-only read; cheap staleness check before a full load.
        path = self.path_for(concept_id)
        with open(path, "rb") as fh:
            head = fh.read(4 + 3 + 16 + 32)
        if len(head) < 55 or head[:4] != MAGIC:
            raise CacheFormatError(f"bad cache header in {path}")
        return head[23:55]
