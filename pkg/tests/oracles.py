"""Independent scalar-loop oracles shared by unit and acceptance tests.

Everything here recomputes results with plain Python arithmetic, staying
structurally independent of the library implementations it checks.
"""

import math

import numpy as np


def flood_fill_components(mask):
    """4-connected component labelling by explicit stack-based flood fill."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=int)
    sizes = {}
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            stack = [(sy, sx)]
            labels[sy, sx] = current
            size = 0
            while stack:
                y, x = stack.pop()
                size += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        stack.append((ny, nx))
            sizes[current] = size
    return labels, sizes


def oracle_largest_cc(mask):
    labels, sizes = flood_fill_components(np.asarray(mask, dtype=bool))
    if not sizes:
        return np.zeros_like(mask, dtype=bool)
    best = min(label for label, size in sizes.items() if size == max(sizes.values()))
    return labels == best


def oracle_normalize(values):
    lo = min(float(v) for row in values for v in row)
    hi = max(float(v) for row in values for v in row)
    out = np.zeros_like(values, dtype=np.float64)
    if hi == lo:
        return out
    for y in range(values.shape[0]):
        for x in range(values.shape[1]):
            out[y, x] = (float(values[y, x]) - lo) / (hi - lo)
    return out


def oracle_suppress(r_plus, negatives):
    h, w = r_plus.shape
    diff = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            neg = max((float(n[y, x]) for n in negatives), default=0.0)
            diff[y, x] = max(float(r_plus[y, x]) - neg, 0.0)
    return oracle_normalize(diff)


def oracle_fuse(difficulty, relevance, gamma, mask):
    h, w = difficulty.shape
    weighted = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            r = float(relevance[y, x])
            factor = r if gamma == 1.0 else (1.0 if gamma == 0.0 else r**gamma)
            weighted[y, x] = float(difficulty[y, x]) * factor
    normalized = oracle_normalize(weighted)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                normalized[y, x] = 0.0
    return normalized


def oracle_pipeline(image_maps, params):
    """Whole mining pipeline, scalar loops only.

    image_maps: image_id -> (mask, difficulty, positive relevance, negatives).
    Returns (all candidates, selected top-k) as plain tuples
    (image_id, u, v, box, coverage, score).
    """
    candidates = []
    for image_id in sorted(image_maps):
        mask_raw, difficulty_raw, r_plus, negatives = image_maps[image_id]
        mask = oracle_largest_cc(np.asarray(mask_raw, dtype=bool))
        h, w = mask.shape
        area_px = sum(1 for y in range(h) for x in range(w) if mask[y, x])
        if area_px < params.min_mask_area * h * w:
            continue
        difficulty = oracle_normalize(np.asarray(difficulty_raw, dtype=np.float64))
        rel = oracle_suppress(
            np.asarray(r_plus, dtype=np.float64),
            [np.asarray(n, dtype=np.float64) for n in negatives],
        )
        fused = oracle_fuse(difficulty, rel, params.fusion_exponent, mask)
        g = params.grid_size
        for u in range(g):
            for v in range(g):
                y0 = (u * h) // g
                y1 = ((u + 1) * h) // g
                x0 = (v * w) // g
                x1 = ((v + 1) * w) // g
                box_area = (y1 - y0) * (x1 - x0)
                inside = sum(
                    1 for y in range(y0, y1) for x in range(x0, x1) if mask[y, x]
                )
                kappa = inside / box_area
                if kappa < params.min_coverage:
                    continue
                score = math.fsum(
                    float(fused[y, x]) for y in range(y0, y1) for x in range(x0, x1)
                ) / box_area
                candidates.append((image_id, u, v, (y0, x0, y1, x1), kappa, score))
    ranked = sorted(candidates, key=lambda c: (-c[5], c[0], c[1], c[2]))
    return candidates, ranked[: params.top_k]


def collect_maps(providers, image_ids):
    return {
        image_id: (
            providers.subject_mask(image_id),
            providers.difficulty_map(image_id),
            providers.relevance_map(image_id),
            providers.negative_relevance_maps(image_id),
        )
        for image_id in image_ids
    }


def bruteforce_topk(entries, query, k):
    """Exhaustive cosine scan; entries are (entry_id, vector) in insertion order."""
    scored = []
    q_norm = np.linalg.norm(query)
    for order, (entry_id, vec) in enumerate(entries):
        score = float(np.dot(vec, query) / (np.linalg.norm(vec) * q_norm))
        scored.append((order, entry_id, score))
    scored.sort(key=lambda t: (-t[2], t[0]))
    return [(entry_id, score) for _, entry_id, score in scored[:k]]
