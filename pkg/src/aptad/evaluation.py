"""Rank-based AUROC and pixel-level evaluation of score maps."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .scoring import upsample_scores


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"auroc: {scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def upsample_all(maps, size: int) -> np.ndarray:
    return np.stack([upsample_scores(m, size, size) for m in maps])


def eval_pixel_auroc(maps, masks) -> dict:
    """Pooled pixel AUROC over all images plus the mean per-image AUROC over
    images whose mask has both classes.

    ``maps`` are patch-grid (B, g, g) or full-resolution (B, H, W) scores.
    """
    masks = np.asarray(masks)
    maps = np.asarray(maps, dtype=np.float64)
    if maps.shape[1:] != masks.shape[1:]:
        maps = upsample_all(maps, masks.shape[1])
    pooled = auroc(maps.ravel(), masks.ravel())
    per = [auroc(m, y) for m, y in zip(maps, masks) if 0 < y.sum() < y.size]
    return {"pooled": pooled, "per_image": float(np.mean(per)) if per else float("nan")}
