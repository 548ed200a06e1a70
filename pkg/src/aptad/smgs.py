"""Self-optimizing meta-prompt guiding: losses, gradient calibration, the
epoch loop and meta-round replacement of the meta prompts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .cfg import CfgConfig, inject_noise
from .diffcore import AdamState, DTYPE, NonFiniteError, ShapeError, adam_step, cosine_flat
from .encoders import TextEncoder, bind, text_forward
from .prompts import PromptBank

P_MIN = 1e-7
P_MAX = 1 - 1e-7


@dataclass
class TrainConfig:
    epochs_per_meta_round: int = 20
    meta_rounds: int = 5
    lam: float = 1.0
    lr: float = 1e-4
    seed: int = 0
    enable_so: bool = True
    enable_mg: bool = True
    enable_tf: bool = True
    enable_la: bool = True
    calibration: str = "per_block"  # or "joint"
    samples_per_shot: int = 1

    def __post_init__(self):
        if self.samples_per_shot < 1:
            raise ValueError("samples_per_shot must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.calibration not in ("per_block", "joint"):
            raise ValueError(f"calibration must be per_block or joint, got {self.calibration!r}")

    @property
    def total_epochs(self) -> int:
        return self.epochs_per_meta_round * self.meta_rounds


@dataclass
class StepDiagnostics:
    L_ano: float
    L_div: float
    C: dict
    calibrated: dict
    grad_norms: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _as_tensor(graph, x):
    return x if isinstance(x, dc.Tensor) else graph.constant(x)


def _bce(S, M):
    g = S.graph
    q = dc.clip(S, P_MIN, P_MAX)
    M = _as_tensor(g, M)
    ll = M * dc.log(q) + (1.0 - M) * dc.log(1.0 - q)
    return ll


def anomaly_loss(S, M):
    """Mean binary cross-entropy over locations (probabilities clamped).

    ``S`` and ``M`` may be numpy arrays or, for ``S``, a graph Tensor. If
    they carry a trailing class axis the per-class means are summed.
    """
    if not isinstance(S, dc.Tensor):
        S = np.clip(np.asarray(S, dtype=np.float64), P_MIN, P_MAX)
        M = np.asarray(M, dtype=np.float64)
        if S.shape != M.shape:
            raise ShapeError(f"anomaly_loss: {S.shape} vs {M.shape}")
        ll = M * np.log(S) + (1 - M) * np.log(1 - S)
        return float(-ll.sum() / S.shape[0])
    if tuple(S.shape) != np.shape(M):
        raise ShapeError(f"anomaly_loss: {S.shape} vs {np.shape(M)}")
    return dc.scale(dc.sum(_bce(S, M)), -1.0 / S.shape[0])


def bernoulli_kl(p, q):
    """Per-location KL(Bern(p) || Bern(q)) in float64, both clamped."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_MIN, P_MAX)
    q = np.clip(np.asarray(q, dtype=np.float64), P_MIN, P_MAX)
    return p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))


def divergence_loss(S_meta, S):
    """Mean over locations of KL(Bern(S_meta) || Bern(S)); S_meta is constant."""
    p = np.clip(np.asarray(S_meta, dtype=np.float64), P_MIN, P_MAX)
    if not isinstance(S, dc.Tensor):
        if p.shape != np.shape(S):
            raise ShapeError(f"divergence_loss: {p.shape} vs {np.shape(S)}")
        return float(bernoulli_kl(p, S).sum() / p.shape[0])
    if tuple(S.shape) != p.shape:
        raise ShapeError(f"divergence_loss: {p.shape} vs {S.shape}")
    g = S.graph
    q = dc.clip(S, P_MIN, P_MAX)
    p32 = np.clip(p.astype(S.data.dtype), P_MIN, P_MAX)
    kl = (g.constant(p32) * (g.constant(np.log(p32)) - dc.log(q))
          + g.constant(1 - p32) * (g.constant(np.log(1 - p32)) - dc.log(1.0 - q)))
    return dc.scale(dc.sum(kl), 1.0 / p.shape[0])


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def calibrate_gradient(g_ano, g_div, lam: float):
    """Return ``(g_cal, C)``: subtract lam*C*g_div from g_ano when C < 0.

    When C >= 0 the very same ``g_ano`` array is returned.
    """
    g_ano = np.asarray(g_ano)
    g_div = np.asarray(g_div)
    if g_ano.size != g_div.size:
        raise ShapeError(f"calibrate_gradient: {g_ano.size} vs {g_div.size} elements")
    C = cosine_flat(g_ano, g_div)
    if C < 0:
        return g_ano - (lam * C) * g_div.reshape(g_ano.shape), C
    return g_ano, C


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _prompt_scores(graph, P_txt, a, b, F, tau):
    """(s, 2) score map of two prompts evaluated on features F."""
    t, d = a.shape
    toks = dc.concatenate([dc.reshape(a, (1, t, d)), dc.reshape(b, (1, t, d))], axis=0)
    z = text_forward(graph, P_txt, toks)
    return dc.sigmoid(dc.scale(graph.constant(F) @ dc.transpose(z), 1.0 / tau))


def meta_score_maps(bank: PromptBank, F: np.ndarray, text_enc: TextEncoder, tau: float) -> np.ndarray:
    """(s, 2) maps [S^M_n, S^M_a] of the current meta prompts on F."""
    g = dc.Graph()
    P = bind(g, text_enc.params)
    return _prompt_scores(g, P, g.constant(bank.mnp), g.constant(bank.map), F, tau).data.copy()


def prompt_step(bank: PromptBank, F_prime: np.ndarray, mask_a: np.ndarray,
                text_enc: TextEncoder, tau: float, config: TrainConfig,
                adam: AdamState, lr: float | None = None) -> StepDiagnostics:
    """One calibrated Adam update of (lnp, lap) on a synthetic sample."""
    mask_a = np.asarray(mask_a, dtype=DTYPE).ravel()
    target = np.stack([1 - mask_a, mask_a], axis=1)
    S_meta = meta_score_maps(bank, F_prime, text_enc, tau)

    g = dc.Graph()
    P = bind(g, text_enc.params)
    lnp, lap = g.param(bank.lnp, "lnp"), g.param(bank.lap, "lap")
    S = _prompt_scores(g, P, lnp, lap, F_prime, tau)
    L_ano = g.mark_output("L_ano", anomaly_loss(S, target))
    L_div = g.mark_output("L_div", divergence_loss(S_meta, S))
    la, ld = float(L_ano.data[0]), float(L_div.data[0])
    if not (np.isfinite(la) and np.isfinite(ld)):
        raise NonFiniteError(f"non-finite loss (L_ano={la}, L_div={ld})")

    g_ano = dc.backward(g, L_ano)
    g_div = dc.backward(g, L_div)

    lam = config.lam if config.enable_mg else 0.0
    g_cal, C, cal = {}, {}, {}
    if config.calibration == "joint":
        names = ("lnp", "lap")
        flat_a = np.concatenate([g_ano[n].ravel() for n in names])
        flat_d = np.concatenate([g_div[n].ravel() for n in names])
        out, c = calibrate_gradient(flat_a, flat_d, lam) if config.enable_mg else (flat_a, cosine_flat(flat_a, flat_d))
        cuts = np.cumsum([g_ano[n].size for n in names])[:-1]
        for n, part in zip(names, np.split(out, cuts)):
            g_cal[n] = part.reshape(g_ano[n].shape)
            C[n], cal[n] = c, bool(config.enable_mg and c < 0 and lam > 0)
    else:
        for n in ("lnp", "lap"):
            if config.enable_mg:
                g_cal[n], C[n] = calibrate_gradient(g_ano[n], g_div[n], lam)
            else:
                g_cal[n], C[n] = g_ano[n], cosine_flat(g_ano[n], g_div[n])
            cal[n] = bool(config.enable_mg and C[n] < 0 and lam > 0)

    new, _ = adam_step(bank.learnable(), g_cal, adam, lr=lr)
    bank.lnp, bank.lap = new["lnp"], new["lap"]
    norms = {f"{n}_{k}": float(np.linalg.norm(v[n])) for k, v in
             (("ano", g_ano), ("div", g_div), ("cal", g_cal)) for n in ("lnp", "lap")}
    return StepDiagnostics(la, ld, C, cal, norms)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass
class EpochRecord:
    epoch: int
    meta_round: int
    L_ano: float
    L_div: float
    C_lnp: float
    C_lap: float
    calibrated_lnp: int
    calibrated_lap: int
    lr: float


def train_epoch(bank: PromptBank, shots: list, obj_masks: list, cfg: CfgConfig,
                config: TrainConfig, seed: int, text_enc: TextEncoder, tau: float,
                adam: AdamState, lr: float | None = None) -> StepDiagnostics:
    """One pass over the shots: ``samples_per_shot`` fresh synthetic anomalies
    per shot, one step each.

    ``shots`` are (s, d) feature maps; ``obj_masks`` the cached Target Focus
    masks (all-ones when Target Focus is disabled). Returns diagnostics
    averaged over the samples.
    """
    diags = []
    n = config.samples_per_shot
    for i, (F, m) in enumerate(zip(shots, obj_masks)):
        for j in range(n):
            sample = inject_noise(F, m, cfg, seed=seed + i * n + j, source=i)
            try:
                diags.append(prompt_step(bank, sample.F_prime, sample.mask_a, text_enc, tau,
                                         config, adam, lr=lr))
            except NonFiniteError as e:
                raise NonFiniteError(f"shot {i}, sample {j}, seed {seed}: {e}") from e
    n = len(diags)
    return StepDiagnostics(
        L_ano=sum(d.L_ano for d in diags) / n,
        L_div=sum(d.L_div for d in diags) / n,
        C={k: sum(d.C[k] for d in diags) / n for k in ("lnp", "lap")},
        calibrated={k: any(d.calibrated[k] for d in diags) for k in ("lnp", "lap")},
        grad_norms={k: sum(d.grad_norms[k] for d in diags) / n for k in diags[0].grad_norms},
    )


@dataclass
class TuningResult:
    bank: PromptBank
    history: list  # EpochRecord per epoch
    snapshots: list  # (round, lnp, lap, mnp, map) copies taken right after each boundary
    adam: AdamState | None = None


def run_meta_rounds(bank: PromptBank, shots: list, obj_masks: list, cfg: CfgConfig,
                    config: TrainConfig, text_enc: TextEncoder, tau: float,
                    log_fn=None) -> TuningResult:
    """Tune ``bank`` in place for ``meta_rounds`` x ``epochs_per_meta_round`` epochs."""
    adam = AdamState(lr=config.lr, horizon=config.total_epochs)
    history, snapshots = [], []
    epoch = 0
    for r in range(config.meta_rounds):
        for _ in range(config.epochs_per_meta_round):
            lr = adam.lr_at(epoch)
            es = epoch_seed(config.seed, epoch if cfg.regenerate_noise_each_epoch else 0)
            d = train_epoch(bank, shots, obj_masks, cfg, config, es, text_enc, tau, adam, lr=lr)
            rec = EpochRecord(epoch, r, d.L_ano, d.L_div, d.C["lnp"], d.C["lap"],
                              int(d.calibrated["lnp"]), int(d.calibrated["lap"]), lr)
            history.append(rec)
            if log_fn is not None:
                log_fn(rec)
            epoch += 1
        if config.enable_so:
            bank.self_optimize()
        snapshots.append((r, bank.lnp.copy(), bank.lap.copy(), bank.mnp.copy(), bank.map.copy()))
    return TuningResult(bank, history, snapshots, adam)
