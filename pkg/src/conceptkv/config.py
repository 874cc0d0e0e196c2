"""Shipped defaults and the key=value configuration file.

Every run is reproducible from one config file plus explicit flag overrides;
only the repository root may additionally come from the environment
(CONCEPTKV_REPO).
"""

from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "DEFAULT_GRID_SIZE",
    "DEFAULT_FUSION_EXPONENT",
    "DEFAULT_TOP_K_PATCHES",
    "DEFAULT_EVIDENCE_IMAGES",
    "DEFAULT_MIN_MASK_AREA",
    "DEFAULT_MIN_COVERAGE",
    "DEFAULT_K_ATTR",
    "DEFAULT_K_PATCH",
    "DEFAULT_CACHE_DTYPE",
    "DEFAULT_DECODING",
    "DEFAULT_RESOLVE_FLOOR",
    "DEFAULT_ROPE_BASE",
    "DEFAULT_MAX_NEW_TOKENS",
    "DEFAULT_EMBED_DIM",
    "DEFAULT_EMBED_SEED",
    "REPO_ENV_VAR",
    "CliConfig",
    "parse_config_file",
]

# Evidence construction defaults.
DEFAULT_GRID_SIZE = 12
DEFAULT_FUSION_EXPONENT = 1.0
DEFAULT_TOP_K_PATCHES = 4
DEFAULT_EVIDENCE_IMAGES = 5
DEFAULT_MIN_MASK_AREA = 0.01
DEFAULT_MIN_COVERAGE = 0.5

# Retrieval and decoding defaults.
DEFAULT_K_ATTR = 4
DEFAULT_K_PATCH = 4
DEFAULT_CACHE_DTYPE = "f16"
DEFAULT_DECODING = "greedy"
DEFAULT_RESOLVE_FLOOR = 0.2
DEFAULT_MAX_NEW_TOKENS = 16

# Deterministic text embedder defaults.
DEFAULT_EMBED_DIM = 64
DEFAULT_EMBED_SEED = 1301

DEFAULT_ROPE_BASE = 10000.0

REPO_ENV_VAR = "CONCEPTKV_REPO"


@dataclass
class CliConfig:
    repo: Path = Path("repo")
    seed: int = 0
    precision: str = "f16"            # f16: compute f32, store f16; f32; f64 (stores f32)
    decoder_layers: int = 2
    decoder_heads: int = 2
    decoder_head_dim: int = 8
    decoder_vocab: int = 256
    rope_base: float = DEFAULT_ROPE_BASE
    grid_size: int = DEFAULT_GRID_SIZE
    fusion_exponent: float = DEFAULT_FUSION_EXPONENT
    top_k_patches: int = DEFAULT_TOP_K_PATCHES
    evidence_images: int = DEFAULT_EVIDENCE_IMAGES
    min_mask_area: float = DEFAULT_MIN_MASK_AREA
    min_coverage: float = DEFAULT_MIN_COVERAGE
    k_attr: int = DEFAULT_K_ATTR
    k_patch: int = DEFAULT_K_PATCH
    resolve_floor: float = DEFAULT_RESOLVE_FLOOR
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    embed_dim: int = DEFAULT_EMBED_DIM
    embed_seed: int = DEFAULT_EMBED_SEED
    decoding: str = field(default=DEFAULT_DECODING, init=False)

    def __post_init__(self):
        self.repo = Path(self.repo)
        if self.precision not in ("f16", "f32", "f64"):
            raise ValueError(f"precision must be f16, f32, or f64, got {self.precision!r}")
        if self.k_attr < 1 or self.k_patch < 1:
            raise ValueError("k_attr and k_patch must be >= 1")

    @property
    def compute_dtype(self):
        import numpy as np

        return np.float64 if self.precision == "f64" else np.float32

    @property
    def store_dtype(self) -> str:
        # the cache file format holds f16 or f32 payloads
        return "f16" if self.precision == "f16" else "f32"

    def decoder_config(self):
        from .kernels import DecoderConfig

        return DecoderConfig(
            num_layers=self.decoder_layers,
            num_heads=self.decoder_heads,
            head_dim=self.decoder_head_dim,
            model_dim=self.decoder_heads * self.decoder_head_dim,
            vocab_size=self.decoder_vocab,
            rope_base=self.rope_base,
        )


_FIELD_TYPES = {
    "repo": str,
    "seed": int,
    "precision": str,
    "decoder_layers": int,
    "decoder_heads": int,
    "decoder_head_dim": int,
    "decoder_vocab": int,
    "rope_base": float,
    "grid_size": int,
    "fusion_exponent": float,
    "top_k_patches": int,
    "evidence_images": int,
    "min_mask_area": float,
    "min_coverage": float,
    "k_attr": int,
    "k_patch": int,
    "resolve_floor": float,
    "max_new_tokens": int,
    "embed_dim": int,
    "embed_seed": int,
}


def parse_config_file(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    for lineno, raw_line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _FIELD_TYPES[key](value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    return values
