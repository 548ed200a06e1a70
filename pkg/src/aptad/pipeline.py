"""End-to-end desk-scale run: synthetic data, pretraining, prompt tuning and
pixel-level evaluation, all driven by one :class:`RunConfig`."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cfg import CfgConfig, target_focus_mask
from .checkpoint import CheckpointError
from .config import RunConfig
from .data import DatasetSplit, SyntheticSpec, gen_dataset, gen_pretrain_set
from .encoders import TextEncoder, VisualEncoder, encode_image, encode_text
from .evaluation import eval_pixel_auroc
from .pretrain import PretrainConfig, pretrain_contrastive
from .prompts import ObjectPrompt, PromptBank, make_prompt_bank, object_embedding
from .scoring import anomaly_map, build_memory_bank, fuse_vg, vision_guided_score
from .diffcore import AdamState
from .smgs import TrainConfig, TuningResult, run_meta_rounds

log = logging.getLogger(__name__)


@dataclass
class Backbone:
    vis: VisualEncoder
    txt: TextEncoder
    tau: float
    losses: list = field(default_factory=list)


def _pretrain_key(cfg: RunConfig):
    return (cfg.seed, cfg.image_size, cfg.patch_size, cfg.depth, cfg.d, cfg.k_radius,
            tuple(cfg.tap_layers), cfg.t, cfg.tau, cfg.pretrain_steps, cfg.pretrain_batch,
            cfg.pretrain_lr, cfg.pretrain_images)


_BACKBONES: dict = {}


def pretrain_seed(cfg: RunConfig) -> int:
    return cfg.seed + 10_000


def build_backbone(cfg: RunConfig, cache: bool = True, log_fn=None) -> Backbone:
    """Initialise and contrastively pretrain the dual encoder for ``cfg``."""
    key = _pretrain_key(cfg)
    if cache and key in _BACKBONES:
        return _BACKBONES[key]
    ps = pretrain_seed(cfg)
    vis = VisualEncoder(cfg.image_size, cfg.patch_size, cfg.depth, cfg.d, cfg.d,
                        cfg.k_radius, tuple(cfg.tap_layers)).init_params(ps)
    txt = TextEncoder(cfg.d).init_params(ps + 1)
    pairs = gen_pretrain_set(cfg.pretrain_images, ps + 2, SyntheticSpec(image_size=cfg.image_size))
    pc = PretrainConfig(cfg.pretrain_steps, cfg.pretrain_batch, cfg.pretrain_lr, cfg.tau, ps + 3)
    res = pretrain_contrastive(pairs, vis, txt, pc, t=cfg.t, log_fn=log_fn)
    bb = Backbone(vis, txt, res.tau, res.losses)
    if cache:
        _BACKBONES[key] = bb
    return bb


def make_split(cfg: RunConfig) -> DatasetSplit:
    spec = SyntheticSpec(image_size=cfg.image_size, object_kind=cfg.object_kind, seed=cfg.seed)
    return gen_dataset(spec, cfg.shots, cfg.n_test, seed=cfg.seed)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg.epochs_per_meta_round, cfg.meta_rounds, cfg.lam, cfg.lr, cfg.seed,
                       cfg.enable_so, cfg.enable_mg, cfg.enable_tf, cfg.enable_la, cfg.calibration,
                       cfg.samples_per_shot)


def cfg_config(cfg: RunConfig) -> CfgConfig:
    return CfgConfig(cfg.sigma_mode, cfg.sigma_value, anomaly_fraction_cap=cfg.anomaly_fraction_cap)


def initial_bank(cfg: RunConfig, bb: Backbone) -> PromptBank:
    return make_prompt_bank(bb.txt, cfg.t, cfg.init_mode, cfg.seed,
                            cfg.normal_template, cfg.abnormal_template)


def tune(cfg: RunConfig, bb: Backbone, split: DatasetSplit, bank: PromptBank | None = None,
         log_fn=None) -> TuningResult:
    """Run prompt tuning on the few-shot normal images of ``split``."""
    bank = initial_bank(cfg, bb) if bank is None else bank
    shots = np.stack([s.image for s in split.train])
    F, _, _ = encode_image(shots, bb.vis, enable_la=cfg.enable_la)
    if cfg.enable_tf:
        z_obj = object_embedding(ObjectPrompt(cfg.object_kind), bb.txt)
        masks = [target_focus_mask(f, z_obj) for f in F]
    else:
        masks = [np.ones(F.shape[1], dtype=np.int8) for _ in F]
    return run_meta_rounds(bank, list(F), masks, cfg_config(cfg), train_config(cfg),
                           bb.txt, bb.tau, log_fn=log_fn)


def prompt_embeddings(bank: PromptBank, bb: Backbone, meta: bool = False):
    n, a = (bank.mnp, bank.map) if meta else (bank.lnp, bank.lap)
    return encode_text(n, bb.txt), encode_text(a, bb.txt)


def _encode_chunks(images, enc, enable_la, jobs):
    """encode_image over contiguous chunks, reassembled in input order."""
    if jobs <= 1 or len(images) < 2:
        F, taps, _ = encode_image(images, enc, enable_la=enable_la)
        return F, taps
    chunks = np.array_split(np.arange(len(images)), min(jobs, len(images)))
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(lambda ix: encode_image(images[ix], enc, enable_la=enable_la), chunks))
    F = np.concatenate([p[0] for p in parts])
    taps = [np.concatenate([p[1][k] for p in parts]) for k in range(len(parts[0][1]))]
    return F, taps


def score_test(cfg: RunConfig, bb: Backbone, split: DatasetSplit, bank: PromptBank,
               meta: bool = False, jobs: int = 1) -> dict:
    """Patch-grid maps S (and S_v, S_VG when use_vg) for every test image."""
    images = np.stack([s.image for s in split.test])
    F, taps = _encode_chunks(images, bb.vis, cfg.enable_la, jobs)
    z_n, z_a = prompt_embeddings(bank, bb, meta)
    g = bb.vis.grid
    S = anomaly_map(F, z_n, z_a, bb.tau).reshape(-1, g, g)
    out = {"S": S}
    if cfg.use_vg:
        mem = build_memory_bank(np.stack([s.image for s in split.train]), bb.vis, cfg.enable_la)
        S_v = vision_guided_score(taps, mem).reshape(-1, g, g)
        out["S_v"] = S_v
        out["S_VG"] = fuse_vg(S, S_v)
    return out


def evaluate_maps(split: DatasetSplit, maps: dict) -> dict:
    masks = np.stack([s.mask for s in split.test])
    res = {}
    for key, name in (("S", "s"), ("S_VG", "svg"), ("S_v", "sv")):
        if key in maps:
            r = eval_pixel_auroc(maps[key], masks)
            res[f"auroc_pixel_{name}"] = r["pooled"]
            res[f"auroc_pixel_{name}_per_image"] = r["per_image"]
    return res


@dataclass
class RunResult:
    metrics: dict
    baseline: dict
    tuning: TuningResult
    backbone: Backbone
    split: DatasetSplit
    maps: dict
    timings: dict


def run(cfg: RunConfig, cache: bool = True) -> RunResult:
    """Pretrain (cached per seed), tune, and evaluate tuned prompts and the
    zero-shot meta-prompt baseline."""
    t0 = time.perf_counter()
    bb = build_backbone(cfg, cache=cache)
    t1 = time.perf_counter()
    split = make_split(cfg)
    tuning = tune(cfg, bb, split)
    t2 = time.perf_counter()
    maps = score_test(cfg, bb, split, tuning.bank)
    metrics = evaluate_maps(split, maps)
    base_bank = initial_bank(cfg, bb)
    baseline = evaluate_maps(split, score_test(cfg.replace(use_vg=False), bb, split, base_bank, meta=True))
    t3 = time.perf_counter()
    return RunResult(metrics, baseline, tuning, bb, split, maps,
                     {"pretrain": t1 - t0, "tune": t2 - t1, "eval": t3 - t2})


# ---------------------------------------------------------------------------
# checkpoint entries
# ---------------------------------------------------------------------------


def _require(entries: dict, names, what: str):
    missing = [n for n in names if n not in entries]
    if missing:
        raise CheckpointError(f"{what} checkpoint lacks entries {missing[:5]}")


def backbone_entries(bb: Backbone) -> dict:
    return {**bb.vis.params, **bb.txt.params, "tau": np.array([bb.tau], np.float32)}


def backbone_from_entries(cfg: RunConfig, entries: dict) -> Backbone:
    """Rebuild the frozen encoders described by ``cfg`` from checkpoint entries."""
    vis = VisualEncoder(cfg.image_size, cfg.patch_size, cfg.depth, cfg.d, cfg.d,
                        cfg.k_radius, tuple(cfg.tap_layers)).init_params(0)
    txt = TextEncoder(cfg.d).init_params(0)
    for enc in (vis, txt):
        _require(entries, list(enc.params) + ["tau"], "backbone")
        for k, v in enc.params.items():
            if entries[k].shape != v.shape:
                raise CheckpointError(f"entry {k!r} has shape {entries[k].shape}, config implies {v.shape}")
        enc.params = {k: entries[k].copy() for k in enc.params}
    return Backbone(vis, txt, float(entries["tau"][0]))


PROMPT_NAMES = ("lnp", "lap", "mnp", "map")


def prompt_entries(bank: PromptBank, adam: AdamState | None = None) -> dict:
    out = {n: getattr(bank, n) for n in PROMPT_NAMES}
    if adam is not None:
        out["adam.step"] = np.array([adam.step_count], np.float32)
        for n in sorted(adam.first_moment):
            out[f"adam.m.{n}"] = adam.first_moment[n]
            out[f"adam.v.{n}"] = adam.second_moment[n]
    return out


def bank_from_entries(entries: dict) -> PromptBank:
    _require(entries, PROMPT_NAMES, "prompt")
    return PromptBank(*(entries[n].copy() for n in PROMPT_NAMES))
