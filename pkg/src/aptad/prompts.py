"""The four prompt blocks (learnable/meta x normal/abnormal) and the object
prompt used to locate the inspected item."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import DTYPE
from .encoders import TextEncoder, encode_text, tokenize_template

NORMAL_TEMPLATE = "this is an object without defect"
ABNORMAL_TEMPLATE = "this is an object with defect"
SIMPLE_NORMAL_TEMPLATE = "object good"
SIMPLE_ABNORMAL_TEMPLATE = "object bad"
OBJECT_TEMPLATE = "This is a photo of {object}."


@dataclass
class PromptBank:
    """Learnable (lnp, lap) and frozen meta (mnp, map) prompts, each t x d."""

    lnp: np.ndarray
    lap: np.ndarray
    mnp: np.ndarray
    map: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.lnp, self.lap, self.mnp, self.map)}
        if len(shapes) != 1:
            raise ValueError(f"prompt blocks must share shape, got {shapes}")

    @property
    def t(self) -> int:
        return self.lnp.shape[0]

    @property
    def d(self) -> int:
        return self.lnp.shape[1]

    def copy(self) -> "PromptBank":
        return PromptBank(self.lnp.copy(), self.lap.copy(), self.mnp.copy(), self.map.copy())

    def learnable(self) -> dict:
        return {"lnp": self.lnp, "lap": self.lap}

    def self_optimize(self) -> None:
        """Replace the meta prompts with copies of the current learnable ones."""
        self.mnp = self.lnp.copy()
        self.map = self.lap.copy()


def init_meta_prompts(enc: TextEncoder, t: int = 8,
                      normal_template: str = NORMAL_TEMPLATE,
                      abnormal_template: str = ABNORMAL_TEMPLATE) -> tuple:
    """Token-embedding rows of the two templates, right-padded to length t."""
    rows = []
    for text in (normal_template, abnormal_template):
        ids = tokenize_template(text, enc.vocab_size)
        if len(ids) > t:
            raise ValueError(f"template {text!r} has {len(ids)} tokens, prompt length is {t}")
        rows.append(enc.embed_ids(ids, t).astype(DTYPE))
    return rows[0], rows[1]


def init_learnable_prompts(mnp: np.ndarray, map_: np.ndarray, mode: str = "from_meta",
                           seed: int = 0, std: float = 0.02) -> tuple:
    """Initial (lnp, lap): copies of the meta prompts or N(0, std^2) draws."""
    if mode == "from_meta":
        return mnp.copy(), map_.copy()
    if mode == "random":
        rng = np.random.default_rng(seed)
        return (rng.normal(0, std, mnp.shape).astype(DTYPE),
                rng.normal(0, std, map_.shape).astype(DTYPE))
    raise ValueError(f"unknown init mode {mode!r}")


def make_prompt_bank(enc: TextEncoder, t: int = 8, mode: str = "from_meta", seed: int = 0,
                     normal_template: str = NORMAL_TEMPLATE,
                     abnormal_template: str = ABNORMAL_TEMPLATE) -> PromptBank:
    mnp, map_ = init_meta_prompts(enc, t, normal_template, abnormal_template)
    lnp, lap = init_learnable_prompts(mnp, map_, mode, seed)
    return PromptBank(lnp, lap, mnp, map_)


@dataclass
class ObjectPrompt:
    object_name: str
    template: str = OBJECT_TEMPLATE
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def text(self) -> str:
        return self.template.format(object=self.object_name)


def object_embedding(op: ObjectPrompt, enc: TextEncoder) -> np.ndarray:
    """Unit-norm embedding of the object prompt, cached per encoder."""
    if not op.object_name.strip():
        raise ValueError("object name must be non-empty")
    key = id(enc)
    if key not in op._cache:
        op._cache[key] = encode_text(tokenize_template(op.text, enc.vocab_size), enc)
    return op._cache[key]
