"""Concept-only hard patch mining.

Per image: subject mask (largest connected component, minimum area), a
difficulty map normalized to [0,1], text relevance with background
suppression, fusion inside the mask, then grid scoring with an in-mask
coverage threshold. A single global top-k over all images yields the patch
pool; each selected crop is embedded and becomes an index entry.

Everything here is deterministic: identical inputs produce byte-identical
pools, and cell scores use exact summation so an independent scalar oracle
reproduces them bit-for-bit.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import (
    DEFAULT_FUSION_EXPONENT,
    DEFAULT_GRID_SIZE,
    DEFAULT_MIN_COVERAGE,
    DEFAULT_MIN_MASK_AREA,
    DEFAULT_TOP_K_PATCHES,
)

__all__ = [
    "MiningParams",
    "HardPatch",
    "Candidate",
    "largest_cc",
    "normalize_map",
    "suppress_background",
    "fuse",
    "grid_cell_box",
    "grid_candidates",
    "select_topk",
    "mine_concept",
    "read_float_map",
    "write_float_map",
    "read_mask",
    "write_mask",
    "write_patch_manifest",
    "read_patch_manifest",
]

MAP_MAGIC = b"JMAP"


@dataclass(frozen=True)
class MiningParams:
    grid_size: int = DEFAULT_GRID_SIZE
    top_k: int = DEFAULT_TOP_K_PATCHES
    fusion_exponent: float = DEFAULT_FUSION_EXPONENT
    min_mask_area: float = DEFAULT_MIN_MASK_AREA   # fraction of image area
    min_coverage: float = DEFAULT_MIN_COVERAGE     # fraction of cell inside mask

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError(f"grid_size must be >= 1, got {self.grid_size}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.fusion_exponent < 0:
            raise ValueError(f"fusion_exponent must be >= 0, got {self.fusion_exponent}")
        if not 0 < self.min_coverage <= 1:
            raise ValueError(f"min_coverage must be in (0, 1], got {self.min_coverage}")
        if self.min_mask_area < 0:
            raise ValueError(f"min_mask_area must be >= 0, got {self.min_mask_area}")


@dataclass(frozen=True)
class Candidate:
    image_id: str
    u: int
    v: int
    box: tuple      # (y0, x0, y1, x1), half-open
    coverage: float
    score: float


@dataclass(frozen=True)
class HardPatch:
    concept_id: str
    image_id: str
    u: int
    v: int
    box: tuple
    score: float
    coverage: float
    embedding: tuple
    cell_mean: float
    cell_max: float


def _check_map(values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError(f"{name} contains non-finite values")
    return values


def largest_cc(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected component; empty stays empty."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    labels, count = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    # equal sizes resolve to the component first reached in raster order
    return labels == int(np.argmax(sizes))


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0,1]; a constant map becomes all zeros."""
    values = _check_map(values, "map")
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def suppress_background(r_plus: np.ndarray, negatives) -> np.ndarray:
    """normalize(relu(R+ - max over negative maps)); empty negatives act as 0."""
    r_plus = _check_map(r_plus, "positive relevance")
    negatives = [_check_map(n, "negative relevance") for n in negatives]
    for n in negatives:
        if n.shape != r_plus.shape:
            raise ValueError(f"negative map shape {n.shape} != {r_plus.shape}")
    if negatives:
        neg_max = negatives[0]
        for n in negatives[1:]:
            neg_max = np.maximum(neg_max, n)
        diff = r_plus - neg_max
    else:
        diff = r_plus
    return normalize_map(np.maximum(diff, 0.0))


def fuse(difficulty: np.ndarray, relevance: np.ndarray, gamma: float, mask: np.ndarray) -> np.ndarray:
    """normalize(C * R^gamma) zeroed outside the mask (in that order)."""
    difficulty = _check_map(difficulty, "difficulty")
    relevance = _check_map(relevance, "relevance")
    mask = np.asarray(mask, dtype=bool)
    if difficulty.shape != relevance.shape or difficulty.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: difficulty {difficulty.shape}, relevance "
            f"{relevance.shape}, mask {mask.shape}"
        )
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma == 1.0:
        weighted = difficulty * relevance
    elif gamma == 0.0:
        weighted = difficulty.copy()
    else:
        weighted = difficulty * np.power(relevance, gamma)
    return normalize_map(weighted) * mask


def grid_cell_box(height: int, width: int, g: int, u: int, v: int) -> tuple:
    """Pixel box of grid cell (u, v): boundaries at floor(i*H/g), sizes differ by <= 1."""
    y0 = (u * height) // g
    y1 = ((u + 1) * height) // g
    x0 = (v * width) // g
    x1 = ((v + 1) * width) // g
    return (y0, x0, y1, x1)


def grid_candidates(
    cw: np.ndarray, mask: np.ndarray, g: int, eta: float, image_id: str
) -> list:
    """Score every g x g cell; keep cells with in-mask coverage >= eta.

    coverage = |box intersect mask| / |box|; score = mean of cw over the box
    (exact sum, so a scalar-loop oracle reproduces it bit-for-bit).
    """
    cw = _check_map(cw, "fused map")
    mask = np.asarray(mask, dtype=bool)
    if cw.shape != mask.shape:
        raise ValueError(f"map shape {cw.shape} != mask shape {mask.shape}")
    height, width = cw.shape
    if g > min(height, width):
        raise ValueError(f"grid size {g} exceeds image side min({height}, {width})")
    out = []
    for u in range(g):
        for v in range(g):
            y0, x0, y1, x1 = grid_cell_box(height, width, g, u, v)
            area = (y1 - y0) * (x1 - x0)
            inside = int(mask[y0:y1, x0:x1].sum())
            coverage = inside / area
            if coverage < eta:
                continue
            score = math.fsum(cw[y0:y1, x0:x1].ravel().tolist()) / area
            out.append(
                Candidate(
                    image_id=image_id, u=u, v=v, box=(y0, x0, y1, x1),
                    coverage=coverage, score=score,
                )
            )
    return out


def select_topk(candidates, k: int) -> list:
    """k highest-scoring candidates, ties broken by (image_id, u, v) ascending."""
    ranked = sorted(candidates, key=lambda c: (-c.score, c.image_id, c.u, c.v))
    return ranked[:k]


def mine_concept(concept_id, image_ids, record, providers, params: MiningParams):
    """Run the full mining pipeline for one concept.

    Returns (patches, index_entries): the global top-k HardPatch pool and
    matching entries ready for insertion into the visual index. Images whose
    largest mask component covers less than min_mask_area of the image
    contribute no candidates.
    """
    from .index import IndexEntry  # local import; index also imports mining types

    candidates = []
    fused_maps = {}
    for image_id in image_ids:
        mask = largest_cc(providers.subject_mask(image_id))
        height, width = mask.shape
        if int(mask.sum()) < params.min_mask_area * height * width:
            continue
        difficulty = normalize_map(providers.difficulty_map(image_id))
        if difficulty.shape != mask.shape:
            raise ValueError(
                f"difficulty map shape {difficulty.shape} != mask shape {mask.shape} "
                f"for image {image_id!r}"
            )
        r_plus = providers.relevance_map(image_id)
        negatives = providers.negative_relevance_maps(image_id)
        relevance = suppress_background(r_plus, negatives)
        if relevance.shape != mask.shape:
            raise ValueError(f"relevance map shape mismatch for image {image_id!r}")
        cw = fuse(difficulty, relevance, params.fusion_exponent, mask)
        fused_maps[image_id] = cw
        candidates.extend(
            grid_candidates(cw, mask, params.grid_size, params.min_coverage, image_id)
        )

    selected = select_topk(candidates, params.top_k)
    patches = []
    entries = []
    for rank, cand in enumerate(selected):
        y0, x0, y1, x1 = cand.box
        block = fused_maps[cand.image_id][y0:y1, x0:x1]
        embedding = providers.embed_patch(cand.image_id, cand.box)
        patch = HardPatch(
            concept_id=concept_id,
            image_id=cand.image_id,
            u=cand.u,
            v=cand.v,
            box=cand.box,
            score=cand.score,
            coverage=cand.coverage,
            embedding=tuple(float(x) for x in embedding),
            cell_mean=cand.score,
            cell_max=float(block.max()),
        )
        patches.append(patch)
        entries.append(
            IndexEntry(
                entry_id=f"{concept_id}/patch/{rank}",
                concept_id=concept_id,
                kind="patch",
                payload=patch_descriptor(patch),
                embedding=np.asarray(patch.embedding, dtype=np.float64),
            )
        )
    return patches, entries


def patch_descriptor(patch: HardPatch) -> str:
    y0, x0, y1, x1 = patch.box
    return (
        f"patch {patch.image_id} cell=({patch.u},{patch.v}) "
        f"box=({y0},{x0},{y1},{x1}) score={patch.score:.4f} coverage={patch.coverage:.4f}"
    )


# ------------------------------------------------------------------- file IO
# Float map: magic "JMAP", u32 H, u32 W, then row-major little-endian f32.
# Mask: same header, then one byte per pixel in {0, 1}.

def write_float_map(values: np.ndarray, path) -> None:
    values = _check_map(values, "map")
    h, w = values.shape
    payload = MAP_MAGIC + struct.pack("<II", h, w)
    payload += np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_float_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = _map_header(data, path)
    expected = 12 + h * w * 4
    if len(data) != expected:
        raise ValueError(f"bad float map size in {path}: {len(data)} != {expected}")
    values = np.frombuffer(data, dtype="<f4", count=h * w, offset=12)
    return values.reshape(h, w).astype(np.float64)


def write_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    payload = MAP_MAGIC + struct.pack("<II", h, w)
    payload += mask.astype(np.uint8).tobytes()
    Path(path).write_bytes(payload)


def read_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = _map_header(data, path)
    expected = 12 + h * w
    if len(data) != expected:
        raise ValueError(f"bad mask size in {path}: {len(data)} != {expected}")
    bits = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=12)
    if bits.max(initial=0) > 1:
        raise ValueError(f"mask bytes must be 0 or 1 in {path}")
    return bits.reshape(h, w).astype(bool)


def _map_header(data: bytes, path) -> tuple:
    if len(data) < 12 or data[:4] != MAP_MAGIC:
        raise ValueError(f"not a JMAP file: {path}")
    return struct.unpack_from("<II", data, 4)


# Patch pool manifest: tab-separated, one row per patch, embeddings stored in
# a sibling exchange file referenced by 1-based line ordinal.
MANIFEST_COLUMNS = (
    "concept_id", "image_id", "u", "v", "y0", "x0", "y1", "x1",
    "coverage", "score", "cell_mean", "cell_max", "embedding_line",
)


def write_patch_manifest(patches, path) -> None:
    lines = ["#" + "\t".join(MANIFEST_COLUMNS)]
    for i, p in enumerate(patches):
        y0, x0, y1, x1 = p.box
        lines.append(
            "\t".join(
                [
                    p.concept_id, p.image_id, str(p.u), str(p.v),
                    str(y0), str(x0), str(y1), str(x1),
                    repr(p.coverage), repr(p.score), repr(p.cell_mean), repr(p.cell_max),
                    str(i + 1),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_patch_manifest(path, embeddings=None) -> list:
    """Rebuild HardPatch rows; `embeddings` maps line ordinal -> vector."""
    patches = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise ValueError(f"bad manifest row: {line!r}")
        ordinal = int(cols[12])
        vector = () if embeddings is None else tuple(embeddings.get(ordinal, ()))
        patches.append(
            HardPatch(
                concept_id=cols[0],
                image_id=cols[1],
                u=int(cols[2]),
                v=int(cols[3]),
                box=(int(cols[4]), int(cols[5]), int(cols[6]), int(cols[7])),
                coverage=float(cols[8]),
                score=float(cols[9]),
                cell_mean=float(cols[10]),
                cell_max=float(cols[11]),
                embedding=vector,
            )
        )
    return patches
