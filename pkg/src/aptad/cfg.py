"""Contextual anomaly feature generation: Gaussian noise injected into the
feature rows that the object prompt marks as belonging to the object."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import DTYPE

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class CfgConfig:
    sigma_mode: str = "relative"  # "relative" (x element std of F) or "absolute"
    sigma_value: float = 1.0
    threshold: float = THRESHOLD
    regenerate_noise_each_epoch: bool = True
    anomaly_fraction_cap: float = 1.0

    def __post_init__(self):
        if self.sigma_mode not in ("relative", "absolute"):
            raise ValueError(f"sigma_mode must be relative or absolute, got {self.sigma_mode!r}")
        if self.sigma_value < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 < self.anomaly_fraction_cap <= 1:
            raise ValueError("anomaly_fraction_cap must lie in (0, 1]")

    def resolve_sigma(self, F: np.ndarray) -> float:
        if self.sigma_mode == "absolute":
            return float(self.sigma_value)
        return float(self.sigma_value * np.std(F))


@dataclass
class SyntheticSample:
    F_prime: np.ndarray
    mask_a: np.ndarray
    source: int
    seed: int
    perturbation: np.ndarray | None = None

    @property
    def mask_n(self) -> np.ndarray:
        return 1 - self.mask_a


def target_focus_mask(F: np.ndarray, z_obj: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    """1 where the raw feature/object-prompt inner product exceeds ``threshold``."""
    return target_focus_from_scores(np.asarray(F) @ np.asarray(z_obj), threshold)


def target_focus_from_scores(scores: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    m = (np.asarray(scores) > threshold).astype(np.int8)
    if not m.any():
        log.warning("target focus found no object locations; no anomalies injected")
    return m


def _blob(mask_obj, grid, frac, rng):
    """Connected subset of the object cells grown from a random seed cell."""
    cells = np.flatnonzero(mask_obj)
    want = max(1, int(round(frac * cells.size)))
    on = set(cells.tolist())
    start = int(rng.choice(cells))
    chosen, frontier = {start}, [start]
    while frontier and len(chosen) < want:
        c = frontier.pop(int(rng.integers(len(frontier))))
        r, q = divmod(c, grid)
        for dr, dq in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, qq = r + dr, q + dq
            n = rr * grid + qq
            if 0 <= rr < grid and 0 <= qq < grid and n in on and n not in chosen:
                chosen.add(n)
                frontier.append(n)
                if len(chosen) >= want:
                    break
    out = np.zeros_like(mask_obj)
    out[sorted(chosen)] = 1
    return out


def inject_noise(F: np.ndarray, mask_obj: np.ndarray, cfg: CfgConfig, seed: int,
                 source: int = 0) -> SyntheticSample:
    """Add N(0, sigma^2) to every channel of the selected rows, then re-normalise
    those rows. Unselected rows are returned bit-identical."""
    F = np.asarray(F, dtype=DTYPE)
    mask_obj = np.asarray(mask_obj, dtype=np.int8).ravel()
    rng = np.random.default_rng(seed)
    sigma = cfg.resolve_sigma(F)
    mask_a = mask_obj.copy()
    if cfg.anomaly_fraction_cap < 1 and mask_obj.any():
        grid = int(round(np.sqrt(mask_obj.size)))
        mask_a = _blob(mask_obj, grid, cfg.anomaly_fraction_cap, rng)
    noise = rng.normal(0.0, 1.0, F.shape) * sigma
    F_prime = F.copy()
    rows = mask_a.astype(bool)
    if sigma > 0 and rows.any():
        pert = F[rows].astype(np.float64) + noise[rows]
        pert /= np.maximum(np.linalg.norm(pert, axis=1, keepdims=True), 1e-12)
        F_prime[rows] = pert.astype(DTYPE)
    return SyntheticSample(F_prime, mask_a, source, seed, perturbation=noise[rows])
