"""Toy dual encoder: a Locality-Aware Transformer for images and a small
transformer text encoder, both mapping into a shared joint space.

Parameters live in plain ``dict[str, np.ndarray]`` banks so they can be
checkpointed, bound into a :class:`~aptad.diffcore.Graph` as trainable leaves
during pretraining, or as constants once frozen.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DTYPE, MASK_NEG, ShapeError

VOCAB_SIZE = 4096
HASH_SEED = 1729
PAD_ID = 0
MAX_TOKENS = 16
PIXEL_MEAN = 0.4
PIXEL_STD = 0.2


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def word_id(word: str, vocab_size: int = VOCAB_SIZE, seed: int = HASH_SEED) -> int:
    """64-bit BLAKE2b of the word (salted with ``seed``) folded into [1, V).

    Id 0 is reserved for padding.
    """
    salt = seed.to_bytes(8, "little")
    h = hashlib.blake2b(word.encode("utf-8"), digest_size=8, salt=salt).digest()
    return 1 + int.from_bytes(h, "little") % (vocab_size - 1)


def tokenize_template(text: str, vocab_size: int = VOCAB_SIZE, seed: int = HASH_SEED) -> list:
    """Lowercase, split on whitespace, strip surrounding punctuation, hash."""
    words = [w.strip(".,;:!?\"'()") for w in text.lower().split()]
    words = [w for w in words if w]
    if not words:
        raise ValueError("tokenize_template: empty text")
    return [word_id(w, vocab_size, seed) for w in words]


# ---------------------------------------------------------------------------
# locality mask
# ---------------------------------------------------------------------------


@dataclass
class LocalityMask:
    g: int
    k: float
    mask: np.ndarray  # (g*g + 1, g*g + 1), token 0 is CLS

    def admissible(self) -> np.ndarray:
        return self.mask == 0


def build_locality_mask(g: int, k: float) -> LocalityMask:
    """Additive attention mask over CLS + a g x g patch grid.

    Patch pairs within Euclidean grid distance ``k`` get 0, all others
    ``MASK_NEG``. The CLS row and column are all zero.
    """
    if g < 1 or k < 0:
        raise ValueError(f"build_locality_mask: need g >= 1 and k >= 0, got g={g}, k={k}")
    ii, jj = np.divmod(np.arange(g * g), g)
    dist = np.sqrt((ii[:, None] - ii[None, :]) ** 2 + (jj[:, None] - jj[None, :]) ** 2)
    m = np.zeros((g * g + 1, g * g + 1), dtype=DTYPE)
    m[1:, 1:] = np.where(dist <= k, 0.0, MASK_NEG)
    return LocalityMask(g, float(k), m)


# ---------------------------------------------------------------------------
# parameter initialisation
# ---------------------------------------------------------------------------


def _block_params(rng, prefix: str, width: int, mlp_ratio: int = 4) -> dict:
    std = 1.0 / math.sqrt(width)
    hid = mlp_ratio * width
    p = {
        "ln1.g": np.ones(width), "ln1.b": np.zeros(width),
        "wq": rng.normal(0, std, (width, width)),
        "wk": rng.normal(0, std, (width, width)),
        "wv": rng.normal(0, std, (width, width)),
        "wo": rng.normal(0, std, (width, width)),
        "ln2.g": np.ones(width), "ln2.b": np.zeros(width),
        "w1": rng.normal(0, std, (width, hid)), "b1": np.zeros(hid),
        "w2": rng.normal(0, 1.0 / math.sqrt(hid), (hid, width)), "b2": np.zeros(width),
    }
    return {f"{prefix}.{k}": v.astype(DTYPE) for k, v in p.items()}


@dataclass
class VisualEncoder:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    width: int = 32
    dim: int = 32
    k_radius: float = 1.5
    tap_layers: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if not self.tap_layers:
            self.tap_layers = (self.depth // 2 if self.depth > 2 else 0, self.depth - 1)
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if len(set(self.tap_layers)) != 2 or not all(0 <= t < self.depth for t in self.tap_layers):
            raise ValueError(f"tap_layers must be two distinct indices < depth, got {self.tap_layers}")
        self._masks = {}

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    def init_params(self, seed: int) -> "VisualEncoder":
        rng = np.random.default_rng(seed)
        w, p2 = self.width, self.patch_size ** 2
        p = {
            "vis.patch_w": rng.normal(0, 1.0 / math.sqrt(p2), (p2, w)),
            # a non-zero bias keeps flat-patch intensity visible after LayerNorm
            "vis.patch_b": rng.normal(0, 1.0, w),
            "vis.cls": rng.normal(0, 0.02, (1, w)),
            "vis.pos": rng.normal(0, 0.02, (self.n_patches + 1, w)),
            "vis.ln_pre.g": np.ones(w), "vis.ln_pre.b": np.zeros(w),
            "vis.ln_post.g": np.ones(w), "vis.ln_post.b": np.zeros(w),
            "vis.proj": rng.normal(0, 1.0 / math.sqrt(w), (w, self.dim)),
        }
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in p.items()}
        for b in range(self.depth):
            self.params.update(_block_params(rng, f"vis.block{b}", w))
        return self

    def mask(self, enable_la: bool = True) -> LocalityMask:
        k = self.k_radius if enable_la else math.inf
        if k not in self._masks:
            self._masks[k] = build_locality_mask(self.grid, k)
        return self._masks[k]


@dataclass
class TextEncoder:
    dim: int = 32
    depth: int = 2
    vocab_size: int = VOCAB_SIZE
    max_tokens: int = MAX_TOKENS
    params: dict = field(default_factory=dict)

    def init_params(self, seed: int) -> "TextEncoder":
        rng = np.random.default_rng(seed)
        d = self.dim
        p = {
            "txt.embed": rng.normal(0, 0.02, (self.vocab_size, d)),
            "txt.pos": rng.normal(0, 0.01, (self.max_tokens, d)),
            "txt.ln_final.g": np.ones(d), "txt.ln_final.b": np.zeros(d),
            "txt.proj": rng.normal(0, 1.0 / math.sqrt(d), (d, d)),
        }
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in p.items()}
        for b in range(self.depth):
            self.params.update(_block_params(rng, f"txt.block{b}", d))
        return self

    def embed_ids(self, ids, length: int | None = None) -> np.ndarray:
        """Token-embedding rows for ``ids``, right-padded with the PAD row."""
        ids = list(ids)
        length = len(ids) if length is None else length
        if len(ids) > length:
            raise ValueError(f"{len(ids)} tokens exceed prompt length {length}")
        ids = ids + [PAD_ID] * (length - len(ids))
        return self.params["txt.embed"][np.asarray(ids)].copy()


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def bind(graph: dc.Graph, params: dict, trainable: bool = False) -> dict:
    """Create graph leaves for a parameter bank."""
    if trainable:
        return {k: graph.param(v, k) for k, v in params.items()}
    return {k: graph.constant(v) for k, v in params.items()}


def _attention_logits(h, P, prefix):
    q = h @ P[f"{prefix}.wq"]
    k = h @ P[f"{prefix}.wk"]
    v = h @ P[f"{prefix}.wv"]
    d_k = q.shape[-1]
    return q @ dc.transpose(k), v, d_k


def _mlp(x, P, prefix):
    h = dc.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = dc.quick_gelu(h @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"])
    return h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def lat_block(x, P, prefix: str, mask: LocalityMask | None, with_attn: bool = False):
    """One dual-path block.

    Returns ``(global_out, local_delta[, global_attn, local_attn])``. The
    global path is attention + residual + feed-forward; the locality path
    reuses the same Q, K, V under ``mask`` and contributes only its attention
    output ``local_delta`` (the caller adds the residual).
    """
    h = dc.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    logits, v, d_k = _attention_logits(h, P, prefix)
    inv = 1.0 / math.sqrt(d_k)
    a_glob = dc.softmax(dc.scale(logits, inv))
    x_glob = x + (a_glob @ v) @ P[f"{prefix}.wo"]
    x_glob = x_glob + _mlp(x_glob, P, prefix)
    if mask is None:
        return (x_glob, None, a_glob, None) if with_attn else (x_glob, None)
    if logits.shape[-1] != mask.mask.shape[0]:
        raise ShapeError(f"lat_block: {logits.shape[-1]} tokens vs mask {mask.mask.shape}")
    a_loc = dc.softmax(dc.scale(dc.masked_add(logits, mask.mask), inv))
    delta = (a_loc @ v) @ P[f"{prefix}.wo"]
    return (x_glob, delta, a_glob, a_loc) if with_attn else (x_glob, delta)


def lat_block_forward(tokens: np.ndarray, params: dict, prefix: str, mask: LocalityMask):
    """Numpy convenience wrapper around :func:`lat_block`.

    Returns ``(global_tokens, local_tokens, global_attn, local_attn)`` where
    ``local_tokens = tokens + locality attention output``.
    """
    g = dc.Graph()
    P = bind(g, {k: v for k, v in params.items() if k.startswith(prefix + ".")})
    x = g.constant(tokens)
    xg, delta, ag, al = lat_block(x, P, prefix, mask, with_attn=True)
    return xg.data, tokens + delta.data, ag.data, al.data


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W) -> (B, g*g, p*p), row-major over the patch grid."""
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim == 2:
        images = images[None]
    b, h, w = images.shape
    if h != w or h % patch_size:
        raise ShapeError(f"image must be square with side divisible by {patch_size}, got {h}x{w}")
    g = h // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, g * g, patch_size * patch_size)


def image_forward(graph: dc.Graph, P: dict, enc: VisualEncoder, images: np.ndarray,
                  dense: bool = True, enable_la: bool = True) -> dict:
    """Graph-level image encoder.

    Returns a dict with ``cls`` (B, d) always, and when ``dense``: ``F``
    (B, s, d) and ``taps`` (list of two (B, s, d_v)), all unit-norm rows.
    """
    patches = (patchify(images, enc.patch_size) - PIXEL_MEAN) / PIXEL_STD
    if patches.shape[1] != enc.n_patches:
        raise ShapeError(f"expected {enc.n_patches} patches, got {patches.shape[1]}")
    b = patches.shape[0]
    n = enc.n_patches + 1
    x = graph.constant(patches) @ P["vis.patch_w"] + P["vis.patch_b"]
    cls = P["vis.cls"] + graph.constant(np.zeros((b, 1, enc.width)))
    x = dc.concatenate([cls, x], axis=1) + P["vis.pos"]
    x = dc.layer_norm(x, P["vis.ln_pre.g"], P["vis.ln_pre.b"])
    mask = enc.mask(enable_la) if dense else None
    stream = x
    taps = []
    sel_patch = np.eye(n, dtype=DTYPE)[1:]
    for i in range(enc.depth):
        x, delta = lat_block(x, P, f"vis.block{i}", mask)
        if dense:
            stream = stream + delta
            if i in enc.tap_layers:
                taps.append(dc.l2_normalize(graph.constant(sel_patch) @ stream))
    sel_cls = np.eye(n, dtype=DTYPE)[:1]
    c = dc.layer_norm(graph.constant(sel_cls) @ x, P["vis.ln_post.g"], P["vis.ln_post.b"])
    out = {"cls": dc.l2_normalize(dc.reshape(c @ P["vis.proj"], (b, enc.dim)))}
    if dense:
        s = dc.layer_norm(graph.constant(sel_patch) @ stream, P["vis.ln_post.g"], P["vis.ln_post.b"])
        out["F"] = dc.l2_normalize(s @ P["vis.proj"])
        out["taps"] = taps
    return out


def encode_image(images: np.ndarray, enc: VisualEncoder, enable_la: bool = True):
    """Frozen image encoding.

    ``images`` is (H, W) or (B, H, W) in [0, 1]. Returns ``(F, taps, cls)``
    with shapes (B, s, d), two (B, s, d_v) arrays, and (B, d); a single
    image yields the same with the leading batch axis dropped.
    """
    images = np.asarray(images, dtype=DTYPE)
    single = images.ndim == 2
    g = dc.Graph()
    out = image_forward(g, bind(g, enc.params), enc, images, dense=True, enable_la=enable_la)
    F, cls = out["F"].data, out["cls"].data
    taps = [t.data for t in out["taps"]]
    if single:
        return F[0], [t[0] for t in taps], cls[0]
    return F, taps, cls


def text_forward(graph: dc.Graph, P: dict, tokens) -> dc.Tensor:
    """Graph-level text encoder on continuous prompts.

    ``tokens`` is a Tensor of shape (n, t, d) (or (t, d)); returns (n, d)
    (or (1, d)) unit-norm embeddings.
    """
    if len(tokens.shape) == 2:
        tokens = dc.reshape(tokens, (1,) + tokens.shape)
    n, t, d = tokens.shape
    max_t = P["txt.pos"].shape[0]
    if not 1 <= t <= max_t:
        raise ValueError(f"prompt length {t} outside [1, {max_t}]")
    pos = graph.constant(np.eye(max_t, dtype=DTYPE)[:t]) @ P["txt.pos"]
    x = tokens + pos
    depth = sum(1 for k in P if k.startswith("txt.block") and k.endswith(".wq"))
    for i in range(depth):
        x, _ = lat_block(x, P, f"txt.block{i}", None)
    pooled = dc.mean(x, axis=1)
    pooled = dc.layer_norm(pooled, P["txt.ln_final.g"], P["txt.ln_final.b"])
    return dc.l2_normalize(pooled @ P["txt.proj"])


def encode_text(prompt, enc: TextEncoder, length: int | None = None) -> np.ndarray:
    """Frozen text encoding of token ids (list of ints) or a t x d matrix."""
    arr = np.asarray(prompt)
    if arr.ndim == 1:
        if not 1 <= arr.size <= enc.max_tokens:
            raise ValueError(f"prompt length {arr.size} outside [1, {enc.max_tokens}]")
        arr = enc.embed_ids(arr.tolist(), length)
    if arr.ndim != 2 or arr.shape[1] != enc.dim:
        raise ShapeError(f"encode_text: expected (t, {enc.dim}) prompt, got {arr.shape}")
    if not 1 <= arr.shape[0] <= enc.max_tokens:
        raise ValueError(f"prompt length {arr.shape[0]} outside [1, {enc.max_tokens}]")
    g = dc.Graph()
    z = text_forward(g, bind(g, enc.params), g.constant(arr))
    return z.data[0]


def embed_tokens(graph: dc.Graph, P: dict, ids: np.ndarray) -> dc.Tensor:
    """Differentiable embedding lookup for an (n, t) id array via one-hot matmul."""
    ids = np.asarray(ids)
    vocab = P["txt.embed"].shape[0]
    onehot = np.zeros(ids.shape + (vocab,), dtype=DTYPE)
    np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
    return graph.constant(onehot) @ P["txt.embed"]
