"""Finite-difference audit of the prompt-loss gradients on small random
problems (random text encoder, features, prompts and masks)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoders import TextEncoder, bind
from .smgs import _prompt_scores, anomaly_loss, divergence_loss


@dataclass
class GradCase:
    index: int
    d: int
    t: int
    grid: int
    tau: float
    errors: dict  # "L_ano/lnp" -> relative error, etc.

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def random_case_graph(rng: np.random.Generator, d: int, t: int, grid: int, tau: float):
    """Float64 graph with marked outputs ``L_ano`` and ``L_div`` over the
    leaves lnp and lap."""
    enc = TextEncoder(dim=d, depth=2).init_params(int(rng.integers(2**31)))
    s = grid * grid
    F = rng.normal(size=(s, d))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    F = F.astype(np.float32)
    prompts = rng.normal(size=(4, t, d)).astype(np.float32)
    mask = (rng.random(s) < 0.3).astype(np.float32)
    target = np.stack([1 - mask, mask], axis=1)

    gm = dc.Graph(dtype=np.float64)
    Pm = bind(gm, enc.params)
    S_meta = _prompt_scores(gm, Pm, gm.constant(prompts[2]), gm.constant(prompts[3]), F, tau).data

    g = dc.Graph(dtype=np.float64)
    P = bind(g, enc.params)
    S = _prompt_scores(g, P, g.param(prompts[0], "lnp"), g.param(prompts[1], "lap"), F, tau)
    g.mark_output("L_ano", anomaly_loss(S, target))
    g.mark_output("L_div", divergence_loss(S_meta, S))
    return g


def run_gradcheck(n_cases: int = 100, seed: int = 0, tolerance: float = 1e-4, h: float = 1e-3,
                  min_d: int = 8, max_d: int = 16, max_t: int = 4, max_grid: int = 6) -> list:
    """Check d L_ano and d L_div with respect to lnp and lap on ``n_cases`` random problems."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        # narrow LayerNorms are so curved that the h = 1e-3 central
        # difference itself is off by more than 1e-4 (its error scales as h^2)
        d = int(rng.integers(min_d, max_d + 1))
        t = int(rng.integers(1, max_t + 1))
        grid = int(rng.integers(2, max_grid + 1))
        tau = float(rng.uniform(0.1, 1.0))
        g = random_case_graph(rng, d, t, grid, tau)
        errors = {}
        for out in ("L_ano", "L_div"):
            rep = dc.finite_diff_check(g, out, tolerance, wrt=("lnp", "lap"), h=h)
            errors.update({f"{out}/{k}": v for k, v in rep.errors.items()})
        cases.append(GradCase(i, d, t, grid, tau, errors))
    return cases
