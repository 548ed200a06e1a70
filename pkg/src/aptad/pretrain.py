"""Contrastive image-caption pretraining of the toy dual encoder.

Stands in for a web-scale pretrained vision-language model: after this step
both encoders are frozen and only prompts are tuned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, NonFiniteError, adam_step
from .encoders import (TextEncoder, VisualEncoder, bind, embed_tokens, image_forward, patchify,
                       text_forward, tokenize_template)

log = logging.getLogger(__name__)

TAU_MIN = 0.01


@dataclass
class PretrainConfig:
    steps: int = 500
    batch: int = 16
    lr: float = 1e-3
    tau_init: float = 0.07
    seed: int = 0
    train_embeddings: bool = False
    patch_weight: float = 1.0
    patch_tau: float = 0.2


@dataclass
class PretrainResult:
    tau: float
    losses: list


# Several phrasings per caption class give the toy text encoder a wider
# vocabulary than the dataset captions alone, like a web-scale model has.
PHRASINGS = {
    "none": ("a photo of the background", "this is a photo of the background", "an empty background"),
    "normal": ("a photo of a {kind}", "this is a photo of {kind}", "a {kind} without defect",
               "an object without defect"),
    "defect": ("a photo of a {kind} with a defect", "this is a {kind} with a defect",
               "a {kind} with a defect", "an object with a defect"),
}
DEFECT_COVER = 0.25


def class_phrasings(kind: str, defect: bool) -> list:
    if kind == "none":
        return list(PHRASINGS["none"])
    return [p.format(kind=kind) for p in PHRASINGS["defect" if defect else "normal"]]


def caption_ids(captions, t: int, enc: TextEncoder) -> np.ndarray:
    rows = []
    for c in captions:
        ids = tokenize_template(c, enc.vocab_size)
        if len(ids) > t:
            raise ValueError(f"caption {c!r} longer than {t} tokens")
        rows.append(ids + [0] * (t - len(ids)))
    return np.asarray(rows)


def _targets(keys):
    same = np.array([[a == b for b in keys] for a in keys], dtype=np.float32)
    return same / same.sum(axis=1, keepdims=True)


def info_nce(graph, img, txt, logit_scale, keys):
    """Symmetric InfoNCE; pairs sharing a key share the target mass."""
    sim = img @ dc.transpose(txt)
    logits = dc.exp(logit_scale) * sim
    y = graph.constant(_targets(keys))
    lp_i = dc.log(dc.clip(dc.softmax(logits), 1e-30, 1.0))
    lp_t = dc.log(dc.clip(dc.softmax(dc.transpose(logits)), 1e-30, 1.0))
    b = len(keys)
    total = dc.sum(y * lp_i) + dc.sum(dc.transpose(y) * lp_t)
    return dc.scale(total, -0.5 / b)


def image_class(sample) -> tuple:
    return (sample.object_kind, bool(sample.label))


def patch_labels(samples, patch: int):
    """Per-patch caption classes and the phrasings that name them.

    A patch more than half covered by the object belongs to the object's
    kind, or to its defective variant when at least a quarter of the patch
    is defect; any other patch is background. Returns
    ``(labels (N, s), texts, member (n_texts, n_classes))`` where
    ``member[i, c]`` marks ``texts[i]`` as a phrasing of class ``c``.
    """
    classes = [("none", False)]
    rows = []
    for s in samples:
        cover = patchify(s.object_mask[None].astype(np.float32), patch)[0].mean(axis=1)
        bad = patchify(s.mask[None].astype(np.float32), patch)[0].mean(axis=1) >= DEFECT_COVER
        row = np.zeros(len(cover), dtype=np.int64)
        for j in np.flatnonzero(cover > 0.5):
            key = (s.object_kind, bool(bad[j]))
            if key not in classes:
                classes.append(key)
            row[j] = classes.index(key)
        rows.append(row)
    texts = []
    for key in classes:
        texts.extend(p for p in class_phrasings(*key) if p not in texts)
    member = np.array([[t in class_phrasings(*key) for key in classes] for t in texts], dtype=np.float32)
    return np.asarray(rows), texts, member


def patch_caption_loss(graph, F, z_texts, tau, labels, member):
    """Mean cross-entropy of every patch feature against the phrasing set;
    all phrasings of a patch's class share its target mass.

    A fixed, fairly warm ``tau`` makes a confident answer need a wide cosine
    margin, so matching patch-text pairs end up with large raw cosines.
    """
    b, s, d = F.shape
    logits = dc.scale(dc.reshape(F, (b * s, d)) @ dc.transpose(z_texts), 1.0 / tau)
    y = member.T[labels.ravel()]
    y = y / y.sum(axis=1, keepdims=True)
    lp = dc.log(dc.clip(dc.softmax(logits), 1e-30, 1.0))
    return dc.scale(dc.sum(graph.constant(y) * lp), -1.0 / (b * s))


def pretrain_contrastive(samples: list, vis: VisualEncoder, txt: TextEncoder, config: PretrainConfig,
                         t: int = 8, log_fn=None) -> PretrainResult:
    """Train both encoders in place on ``samples``; returns the learned
    temperature.

    Each step pairs every image with a randomly drawn phrasing of its
    caption class. With ``patch_weight`` > 0 the dense features are also
    trained to name what each patch shows.
    """
    rng = np.random.default_rng(config.seed)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    keys = [image_class(s) for s in samples]
    phrasings = {k: class_phrasings(k[0], k[1] and k[0] != "none") for k in set(keys)}
    dense = config.patch_weight > 0
    if dense:
        p_labels, p_texts, p_member = patch_labels(samples, vis.patch_size)
        p_ids = caption_ids(p_texts, t, txt)
    params = {**vis.params, **txt.params, "logit_scale": np.array([math.log(1 / config.tau_init)], np.float32)}
    frozen = set() if config.train_embeddings else {"txt.embed"}
    adam = AdamState(lr=config.lr, horizon=config.steps)
    losses = []
    for step in range(config.steps):
        idx = rng.choice(len(images), size=config.batch, replace=False)
        caps = []
        for i in idx:
            options = phrasings[keys[i]]
            caps.append(options[int(rng.integers(len(options)))])
        g = dc.Graph()
        P = {k: (g.constant(v) if k in frozen else g.param(v, k)) for k, v in params.items()}
        out = image_forward(g, P, vis, images[idx], dense=dense)
        z = text_forward(g, P, embed_tokens(g, P, caption_ids(caps, t, txt)))
        loss = info_nce(g, out["cls"], z, P["logit_scale"], [keys[i] for i in idx])
        if dense:
            zp = text_forward(g, P, embed_tokens(g, P, p_ids))
            lp = patch_caption_loss(g, out["F"], zp, config.patch_tau, p_labels[idx], p_member)
            loss = loss + dc.scale(lp, config.patch_weight)
        val = float(loss.data[0])
        if not np.isfinite(val):
            raise NonFiniteError(f"pretraining loss non-finite at step {step}")
        grads = dc.backward(g, loss)
        trainable = {k: v for k, v in params.items() if k not in frozen}
        new, _ = adam_step(trainable, grads, adam)
        params.update(new)
        params["logit_scale"] = np.minimum(params["logit_scale"], np.float32(math.log(1 / TAU_MIN)))
        losses.append(val)
        if log_fn is not None:
            log_fn(step, val)
    vis.params = {k: v for k, v in params.items() if k.startswith("vis.")}
    txt.params = {k: v for k, v in params.items() if k.startswith("txt.")}
    tau = float(np.exp(-params["logit_scale"][0]))
    return PretrainResult(tau, losses)


def alignment_gap(images, captions, vis: VisualEncoder, txt: TextEncoder, t: int = 8) -> float:
    """Mean cosine of matched image-caption pairs minus that of pairs whose
    captions differ."""
    g = dc.Graph()
    P = bind(g, {**vis.params, **txt.params})
    img = image_forward(g, P, vis, np.asarray(images, np.float32), dense=False)["cls"].data
    z = text_forward(g, P, embed_tokens(g, P, caption_ids(captions, t, txt))).data
    sim = img @ z.T
    same = np.array([[a == b for b in captions] for a in captions])
    return float(sim[same].mean() - sim[~same].mean())
