"""Score maps from features and prompt embeddings, the normal-memory bank,
and resizing of patch-grid maps to image resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError
from .encoders import VisualEncoder, encode_image


def _check_unit(x, what, tol=1e-3):
    n = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    if np.any(np.abs(n - 1) > tol):
        raise ValueError(f"{what}: rows must be unit-norm (max deviation {np.max(np.abs(n - 1)):.3g})")


def prompt_score_map(F, z, tau: float):
    """sigmoid(F @ z / tau) per location.

    Accepts numpy arrays or graph Tensors for ``z`` (shape (d,) or (d, n)),
    returning the same kind.
    """
    if isinstance(z, dc.Tensor):
        Ft = F if isinstance(F, dc.Tensor) else z.graph.constant(F)
        zz = z if len(z.shape) == 2 else dc.reshape(z, (z.shape[0], 1))
        return dc.sigmoid(dc.scale(Ft @ zz, 1.0 / tau))
    F = np.asarray(F)
    z = np.asarray(z)
    _check_unit(F, "prompt_score_map F")
    _check_unit(z.T if z.ndim == 2 else z, "prompt_score_map z")
    return _sigmoid(F @ z / tau)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def fuse_scores(s_a_logits, s_n_logits, tau: float) -> np.ndarray:
    """Anomaly probability sigmoid((a - n)/tau), i.e. the anomaly entry of a
    two-class softmax over (a/tau, n/tau)."""
    a = np.asarray(s_a_logits, dtype=np.float64)
    n = np.asarray(s_n_logits, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"fuse_scores: {a.shape} vs {n.shape}")
    return _sigmoid((a - n) / tau)


def anomaly_map(F, z_n, z_a, tau: float) -> np.ndarray:
    """Fused anomaly map for features F (..., s, d)."""
    return fuse_scores(F @ z_a, F @ z_n, tau)


@dataclass
class MemoryBank:
    layers: list  # one (n_rows, d_v) array per tap layer

    def size(self) -> int:
        return self.layers[0].shape[0]


def build_memory_bank(shots, enc: VisualEncoder, enable_la: bool = True) -> MemoryBank:
    """Store all tap-layer patch features of the normal shots."""
    shots = np.asarray(shots)
    if shots.ndim == 2:
        shots = shots[None]
    if shots.shape[0] == 0:
        raise ValueError("build_memory_bank: need at least one shot")
    _, taps, _ = encode_image(shots, enc, enable_la=enable_la)
    layers = []
    for t in taps:
        rows = t.reshape(-1, t.shape[-1]).astype(np.float64)
        rows /= np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
        layers.append(rows)
    return MemoryBank(layers)


def vision_guided_score(taps, bank: MemoryBank) -> np.ndarray:
    """(1 - max cosine to the bank) / 2 per location, averaged over layers.

    ``taps`` is a list of (s, d_v) or (B, s, d_v) arrays, one per bank layer.
    """
    if len(taps) != len(bank.layers):
        raise ShapeError(f"vision_guided_score: {len(taps)} tap maps vs {len(bank.layers)} bank layers")
    scores = []
    for t, r in zip(taps, bank.layers):
        t = np.asarray(t, dtype=np.float64)
        if t.shape[-1] != r.shape[1]:
            raise ShapeError(f"vision_guided_score: feature dim {t.shape[-1]} vs bank {r.shape[1]}")
        t = t / np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
        best = np.clip((t @ r.T).max(axis=-1), -1.0, 1.0)
        scores.append((1.0 - best) / 2.0)
    return np.mean(scores, axis=0)


def fuse_vg(S, S_v) -> np.ndarray:
    S, S_v = np.asarray(S), np.asarray(S_v)
    if S.shape != S_v.shape:
        raise ShapeError(f"fuse_vg: {S.shape} vs {S_v.shape}")
    return S + S_v


def upsample_scores(S, H: int, W: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a (gh, gw) map to (H, W)."""
    S = np.asarray(S, dtype=np.float64)
    gh, gw = S.shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.linspace(0.0, n_in - 1, n_out)

    y, x = coords(H, gh), coords(W, gw)
    y0 = np.clip(np.floor(y).astype(int), 0, gh - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, gw - 1)
    y1, x1 = np.minimum(y0 + 1, gh - 1), np.minimum(x0 + 1, gw - 1)
    wy, wx = (y - y0)[:, None], (x - x0)[None, :]
    top = S[y0][:, x0] * (1 - wx) + S[y0][:, x1] * wx
    bot = S[y1][:, x0] * (1 - wx) + S[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy
