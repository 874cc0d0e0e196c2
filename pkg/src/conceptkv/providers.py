"""Perception providers feeding the mining pipeline.

The real systems behind these maps (detection+segmentation for masks,
diffusion inversion for difficulty, text-image relevance, a patch encoder)
are out of scope; providers supply equivalent arrays either from files or
from seeded synthetic generators.
"""

import hashlib
from pathlib import Path
from typing import Protocol

import numpy as np

from .mining import read_float_map, read_mask

__all__ = ["PerceptionProviders", "FileProviders", "SyntheticProviders", "ProviderError"]


class ProviderError(RuntimeError):
    pass


class PerceptionProviders(Protocol):
    def subject_mask(self, image_id: str) -> np.ndarray: ...

    def difficulty_map(self, image_id: str) -> np.ndarray: ...

    def relevance_map(self, image_id: str) -> np.ndarray: ...

    def negative_relevance_maps(self, image_id: str) -> list: ...

    def embed_patch(self, image_id: str, box: tuple) -> np.ndarray: ...


def hashed_patch_embedding(image_id: str, box: tuple, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit vector derived from (image_id, box)."""
    key = f"{image_id}|{box[0]},{box[1]},{box[2]},{box[3]}".encode()
    digest = hashlib.sha256(key).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    rng = np.random.default_rng([seed] + words)
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class FileProviders:
    """Maps read from `<root>/<image_id>/` as JMAP files.

    Expected files per image: mask.jmap, difficulty.jmap, relevance_pos.jmap
    and zero or more relevance_neg_<i>.jmap (consecutive from 0). Patch
    embeddings come from an optional exchange file keyed by
    "<image_id>:<y0>,<x0>,<y1>,<x1>"; without one, a seeded hash embedder
    stands in.
    """

    def __init__(self, root, patch_embeddings: dict | None = None, embed_dim=32, embed_seed=97):
        self.root = Path(root)
        self.patch_embeddings = patch_embeddings
        self.embed_dim = embed_dim
        self.embed_seed = embed_seed

    def _read(self, image_id, name, reader):
        path = self.root / image_id / name
        if not path.exists():
            raise ProviderError(f"missing {name} for image {image_id!r} under {self.root}")
        try:
            return reader(path)
        except ValueError as exc:
            raise ProviderError(f"unreadable {name} for image {image_id!r}: {exc}") from exc

    def subject_mask(self, image_id):
        return self._read(image_id, "mask.jmap", read_mask)

    def difficulty_map(self, image_id):
        return self._read(image_id, "difficulty.jmap", read_float_map)

    def relevance_map(self, image_id):
        return self._read(image_id, "relevance_pos.jmap", read_float_map)

    def negative_relevance_maps(self, image_id):
        maps = []
        i = 0
        while (self.root / image_id / f"relevance_neg_{i}.jmap").exists():
            maps.append(self._read(image_id, f"relevance_neg_{i}.jmap", read_float_map))
            i += 1
        return maps

    def embed_patch(self, image_id, box):
        if self.patch_embeddings is not None:
            key = f"{image_id}:{box[0]},{box[1]},{box[2]},{box[3]}"
            if key not in self.patch_embeddings:
                raise ProviderError(f"no embedding for patch {key!r}")
            return np.asarray(self.patch_embeddings[key], dtype=np.float64)
        return hashed_patch_embedding(image_id, box, self.embed_dim, self.embed_seed)


def _gaussian_bump(height, width, cy, cx, sigma):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)))


class SyntheticProviders:
    """Seeded Gaussian-bump maps for tests and the synthetic workload.

    Each image gets an elliptical subject mask plus difficulty/relevance maps
    built from a few bumps. Values are quantized to multiples of 1/1024,
    which float32 represents exactly, so maps survive the 32-bit map file
    format bit-for-bit.
    """

    QUANT = 1024.0

    def __init__(self, seed: int, image_ids, height=48, width=48, num_negatives=2,
                 embed_dim=32):
        self.seed = seed
        self.height = height
        self.width = width
        self.num_negatives = num_negatives
        self.embed_dim = embed_dim
        self.image_ids = list(image_ids)
        self._cache = {}

    def _rng(self, image_id, channel):
        digest = hashlib.sha256(f"{self.seed}|{image_id}|{channel}".encode()).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        return np.random.default_rng(words)

    def _quantize(self, values):
        return np.round(values * self.QUANT) / self.QUANT

    def _bumps(self, image_id, channel, count, lo_sigma, hi_sigma):
        rng = self._rng(image_id, channel)
        acc = np.zeros((self.height, self.width))
        for _ in range(count):
            cy = rng.uniform(0.15, 0.85) * self.height
            cx = rng.uniform(0.15, 0.85) * self.width
            sigma = rng.uniform(lo_sigma, hi_sigma)
            acc += rng.uniform(0.4, 1.0) * _gaussian_bump(self.height, self.width, cy, cx, sigma)
        peak = acc.max()
        if peak > 0:
            acc = acc / peak
        return self._quantize(acc)

    def subject_mask(self, image_id):
        if image_id not in self.image_ids:
            raise ProviderError(f"unknown synthetic image {image_id!r}")
        rng = self._rng(image_id, "mask")
        cy = rng.uniform(0.35, 0.65) * self.height
        cx = rng.uniform(0.35, 0.65) * self.width
        ry = rng.uniform(0.22, 0.38) * self.height
        rx = rng.uniform(0.22, 0.38) * self.width
        yy, xx = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    def difficulty_map(self, image_id):
        return self._bumps(image_id, "difficulty", 4, 2.0, 6.0)

    def relevance_map(self, image_id):
        return self._bumps(image_id, "relevance", 3, 3.0, 8.0)

    def negative_relevance_maps(self, image_id):
        return [
            self._bumps(image_id, f"negative{i}", 2, 4.0, 10.0) * 0.5
            for i in range(self.num_negatives)
        ]

    def embed_patch(self, image_id, box):
        return hashed_patch_embedding(image_id, box, self.embed_dim, self.seed)

    def write_to(self, root) -> None:
        """Materialize every image's maps as JMAP files (FileProviders layout)."""
        from .mining import write_float_map, write_mask

        root = Path(root)
        for image_id in self.image_ids:
            folder = root / image_id
            folder.mkdir(parents=True, exist_ok=True)
            write_mask(self.subject_mask(image_id), folder / "mask.jmap")
            write_float_map(self.difficulty_map(image_id), folder / "difficulty.jmap")
            write_float_map(self.relevance_map(image_id), folder / "relevance_pos.jmap")
            for i, neg in enumerate(self.negative_relevance_maps(image_id)):
                write_float_map(neg, folder / f"relevance_neg_{i}.jmap")
