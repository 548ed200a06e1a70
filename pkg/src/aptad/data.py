"""Synthetic inspection images: a textured object on a flat background, with
optional bright-spot, dark-spot or scratch defects strictly inside the object.
Also binary PGM reading and writing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFECT_KINDS = ("bright-spot", "dark-spot", "scratch-line")
OBJECT_KINDS = ("disk", "square", "none")
# (angle in radians, period in pixels): each kind has its own surface grain
KIND_TEXTURE = {"disk": (0.6, 9.0), "square": (2.2, 5.0), "none": (0.0, 1.0)}
MIN_DEFECT_FRAC = 0.005
MAX_DEFECT_FRAC = 0.10
MAX_TRIES = 100


class PlacementError(RuntimeError):
    """No valid defect placement found within the retry cap."""


class PGMError(OSError):
    """Malformed or unsupported PGM file."""


@dataclass
class SyntheticSpec:
    image_size: int = 64
    object_kind: str = "disk"  # "disk", "square", or "none" (background only)
    object_size: tuple = (17.0, 21.0)  # radius / half-side range in pixels
    center_jitter: float = 3.0
    base_intensity: float = 0.6
    texture_amplitude: float = 0.08
    texture_period: float | None = None  # None: per-kind default
    texture_angle: float | None = None
    background: float = 0.2
    pixel_noise: float = 0.01
    defect_kinds: tuple = DEFECT_KINDS
    spot_radius: tuple = (3.0, 6.0)
    scratch_length: tuple = (12.0, 24.0)
    defect_contrast: float = 0.35  # added by bright spots and scratches
    dark_contrast: float = 0.2  # removed by dark spots; stays clear of the background level
    seed: int = 0

    def __post_init__(self):
        if self.object_kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        bad = set(self.defect_kinds) - set(DEFECT_KINDS)
        if bad:
            raise ValueError(f"unknown defect kinds {sorted(bad)}")


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: int
    mask: np.ndarray  # (H, W) uint8 defect ground truth
    object_mask: np.ndarray  # (H, W) uint8
    caption: str
    defect_kind: str | None = None
    object_kind: str = "disk"


@dataclass
class DatasetSplit:
    train: list
    test: list
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)

    @property
    def captions(self) -> list:
        return [s.caption for s in self.train + self.test]


def caption_for(object_kind: str, anomalous: bool) -> str:
    if object_kind == "none":
        return "a photo of the background"
    return f"a photo of a {object_kind} with a defect" if anomalous else f"a photo of a {object_kind}"


def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _object(spec: SyntheticSpec, rng):
    n = spec.image_size
    yy, xx = _grid(n)
    c = n / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, 2)
    size = rng.uniform(*spec.object_size)
    if spec.object_kind == "disk":
        inside = (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= size ** 2
    elif spec.object_kind == "square":
        inside = (np.abs(yy - c[0]) <= size) & (np.abs(xx - c[1]) <= size)
    else:
        inside = np.zeros((n, n), dtype=bool)
    angle, period = KIND_TEXTURE[spec.object_kind]
    angle = angle if spec.texture_angle is None else spec.texture_angle
    period = period if spec.texture_period is None else spec.texture_period
    phase = rng.uniform(0, 2 * math.pi)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    texture = spec.base_intensity + spec.texture_amplitude * np.sin(2 * math.pi * u / period + phase)
    img = np.where(inside, texture, spec.background)
    return img, inside


def _erode(mask):
    m = mask.copy()
    m[1:] &= mask[:-1]
    m[:-1] &= mask[1:]
    m[:, 1:] &= mask[:, :-1]
    m[:, :-1] &= mask[:, 1:]
    return m


def _defect_shape(kind, spec, rng, interior):
    n = spec.image_size
    yy, xx = _grid(n)
    ys, xs = np.nonzero(interior)
    k = int(rng.integers(len(ys)))
    cy, cx = ys[k] + 0.5, xs[k] + 0.5
    if kind in ("bright-spot", "dark-spot"):
        r = rng.uniform(*spec.spot_radius)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    length = rng.uniform(*spec.scratch_length)
    ang = rng.uniform(0, math.pi)
    dy, dx = math.sin(ang), math.cos(ang)
    along = (yy - cy) * dy + (xx - cx) * dx
    across = -(yy - cy) * dx + (xx - cx) * dy
    return (np.abs(along) <= length / 2) & (np.abs(across) <= 1.0)


def _add_defect(img, inside, spec, rng):
    interior = _erode(inside)
    kind = spec.defect_kinds[int(rng.integers(len(spec.defect_kinds)))]
    area = spec.image_size ** 2
    for _ in range(MAX_TRIES):
        shape = _defect_shape(kind, spec, rng, interior)
        frac = shape.sum() / area
        if shape.any() and not (shape & ~interior).any() and MIN_DEFECT_FRAC <= frac <= MAX_DEFECT_FRAC:
            break
    else:
        raise PlacementError(f"could not place a {kind} defect in {MAX_TRIES} tries")
    delta = -spec.dark_contrast if kind == "dark-spot" else spec.defect_contrast
    out = img.copy()
    out[shape] += delta
    return out, shape, kind


def render_sample(spec: SyntheticSpec, rng, anomalous: bool) -> Sample:
    img, inside = _object(spec, rng)
    mask = np.zeros_like(inside)
    kind = None
    if anomalous:
        img, mask, kind = _add_defect(img, inside, spec, rng)
    img = img + rng.normal(0, spec.pixel_noise, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, int(anomalous), mask.astype(np.uint8), inside.astype(np.uint8),
                  caption_for(spec.object_kind, anomalous), kind, spec.object_kind)


def gen_dataset(spec: SyntheticSpec, k_shots: int = 1, n_test: int = 50, seed: int | None = None) -> DatasetSplit:
    """k normal training shots plus n_test test images, half of them defective."""
    if k_shots < 1:
        raise ValueError("k_shots must be >= 1")
    if n_test % 2:
        raise ValueError("n_test must be even")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    train = [render_sample(spec, rng, False) for _ in range(k_shots)]
    labels = np.array([0] * (n_test // 2) + [1] * (n_test // 2))
    rng.shuffle(labels)
    test = [render_sample(spec, rng, bool(y)) for y in labels]
    return DatasetSplit(train, test, replace(spec, seed=seed))


def gen_pretrain_set(n: int, seed: int, base: SyntheticSpec | None = None,
                     object_kinds=OBJECT_KINDS, anomaly_rate: float = 0.5) -> list:
    """Image-caption pairs over several object kinds for encoder pretraining.

    Background-only images are never defective.
    """
    base = base or SyntheticSpec()
    rng = np.random.default_rng(seed)
    specs = {k: replace(base, object_kind=k) for k in object_kinds}
    out = []
    for _ in range(n):
        kind = object_kinds[int(rng.integers(len(object_kinds)))]
        anomalous = bool(rng.random() < anomaly_rate) and kind != "none"
        out.append(render_sample(specs[kind], rng, anomalous))
    return out


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)
# ---------------------------------------------------------------------------


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_pgm(path, array_u8: np.ndarray) -> None:
    a = np.asarray(array_u8, dtype=np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError(f"{path}: truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PGMError(f"{path}: truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: bad header {tokens[1:]!r}") from None
    if maxval != 255:
        raise PGMError(f"{path}: only maxval 255 is supported")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise PGMError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(split: DatasetSplit, out_dir) -> list:
    """Write ``images/``, ``masks/`` (defective tests only), ``captions.txt``
    and ``split.txt`` (``<split> <file> <label>`` per line) under ``out_dir``.

    ``out_dir`` is created if missing but its parent must exist. Returns the
    written paths.
    """
    root = Path(out_dir)
    if not root.parent.is_dir():
        raise FileNotFoundError(f"output parent directory {root.parent} does not exist")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    written, lines, captions = [], [], []
    for part, samples in (("train", split.train), ("test", split.test)):
        for i, s in enumerate(samples):
            name = f"{part}_{i:03d}.pgm"
            write_pgm(root / "images" / name, to_u8(s.image))
            written.append(root / "images" / name)
            if s.label:
                write_pgm(root / "masks" / name, s.mask.astype(np.uint8) * 255)
                written.append(root / "masks" / name)
            lines.append(f"{part} {name} {s.label}")
            captions.append(s.caption)
    (root / "captions.txt").write_text("\n".join(captions) + "\n", encoding="utf-8")
    (root / "split.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written + [root / "captions.txt", root / "split.txt"]


def read_dataset(root, spec: SyntheticSpec | None = None) -> DatasetSplit:
    """Inverse of :func:`write_dataset`, with images as 8-bit-quantised floats.

    Object masks are not stored, so they come back empty.
    """
    root = Path(root)
    spec = spec or SyntheticSpec()
    lines = (root / "split.txt").read_text(encoding="utf-8").splitlines()
    captions = (root / "captions.txt").read_text(encoding="utf-8").splitlines()
    if len(captions) != len(lines):
        raise OSError(f"{root}: {len(lines)} split entries but {len(captions)} captions")
    parts = {"train": [], "test": []}
    for lineno, (line, cap) in enumerate(zip(lines, captions), 1):
        fields = line.split()
        if len(fields) != 3 or fields[0] not in parts or fields[2] not in ("0", "1"):
            raise OSError(f"{root / 'split.txt'}:{lineno}: expected '<train|test> <file> <0|1>'")
        part, name, label = fields[0], fields[1], int(fields[2])
        img = read_pgm(root / "images" / name).astype(np.float32) / 255.0
        mask = (read_pgm(root / "masks" / name) > 127).astype(np.uint8) if label else \
            np.zeros(img.shape, np.uint8)
        parts[part].append(Sample(img, label, mask, np.zeros(img.shape, np.uint8), cap,
                                  object_kind=spec.object_kind))
    return DatasetSplit(parts["train"], parts["test"], spec)
