"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment. Unknown keys and
out-of-range values are rejected with the offending line number.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data
    image_size: int = 64
    object_kind: str = "disk"
    shots: int = 1
    n_test: int = 50
    # visual encoder
    patch_size: int = 8
    depth: int = 4
    d: int = 32
    k_radius: float = 1.5
    tap_layers: tuple = (2, 3)
    # prompts
    t: int = 8
    init_mode: str = "from_meta"
    normal_template: str = "this is an object without defect"
    abnormal_template: str = "this is an object with defect"
    # pretraining
    tau: float = 0.07
    pretrain_steps: int = 500
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3
    pretrain_images: int = 512
    # cfg
    sigma_mode: str = "relative"
    sigma_value: float = 1.0
    anomaly_fraction_cap: float = 1.0
    # smgs
    lam: float = 1.0
    epochs: int = 100
    meta_rounds: int = 5
    lr: float = 1e-4
    calibration: str = "per_block"
    samples_per_shot: int = 1
    enable_so: bool = True
    enable_mg: bool = True
    enable_tf: bool = True
    enable_la: bool = True
    use_vg: bool = True
    # paths
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = "out/pretrained.ckpt"
    prompts_checkpoint: str = "out/prompts.ckpt"

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.image_size > 0 and self.image_size % self.patch_size == 0,
             "image_size must be a positive multiple of patch_size"),
            (self.object_kind in ("disk", "square"), "object_kind must be disk or square"),
            (self.shots >= 1, "shots must be >= 1"),
            (self.n_test >= 2 and self.n_test % 2 == 0, "n_test must be even and >= 2"),
            (self.depth >= 2, "depth must be >= 2"),
            (self.d >= 1, "d must be >= 1"),
            (self.k_radius >= 0, "k_radius must be >= 0"),
            (len(self.tap_layers) == 2 and len(set(self.tap_layers)) == 2
             and all(0 <= x < self.depth for x in self.tap_layers),
             "tap_layers must be two distinct block indices < depth"),
            (1 <= self.t <= 16, "t must lie in [1, 16]"),
            (self.init_mode in ("from_meta", "random"), "init_mode must be from_meta or random"),
            (self.tau > 0, "tau must be positive"),
            (self.pretrain_steps >= 0 and self.pretrain_batch >= 2, "bad pretraining sizes"),
            (self.pretrain_images >= self.pretrain_batch, "pretrain_images must be >= pretrain_batch"),
            (self.sigma_mode in ("relative", "absolute"), "sigma_mode must be relative or absolute"),
            (self.sigma_value >= 0, "sigma_value must be >= 0"),
            (0 < self.anomaly_fraction_cap <= 1, "anomaly_fraction_cap must lie in (0, 1]"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.epochs >= 0 and self.meta_rounds >= 0, "epochs and meta_rounds must be >= 0"),
            (self.meta_rounds == 0 or self.epochs % self.meta_rounds == 0,
             "epochs must be divisible by meta_rounds"),
            (self.lr > 0, "lr must be positive"),
            (self.samples_per_shot >= 1, "samples_per_shot must be >= 1"),
            (self.calibration in ("per_block", "joint"), "calibration must be per_block or joint"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def epochs_per_meta_round(self) -> int:
        return self.epochs // self.meta_rounds if self.meta_rounds else 0

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


# "lambda" is a Python keyword, so the file key maps onto the ``lam`` field
_ALIASES = {"lambda": "lam"}
_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name, raw):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        return v
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    lines = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[name] = _parse_value(name, raw)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {key}: {e}") from None
        lines[name] = lineno
    base = base or RunConfig()
    try:
        return dataclasses.replace(base, **values)
    except ConfigError as e:
        # point at the first line whose key appears in the message
        for name, lineno in lines.items():
            if name in str(e) or (name == "lam" and "lambda" in str(e)):
                raise ConfigError(f"line {lineno}: {e}") from None
        raise


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def format_config(cfg: RunConfig) -> str:
    inv = {v: k for k, v in _ALIASES.items()}
    out = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        out.append(f"{inv.get(f.name, f.name)} = {v}")
    return "\n".join(out) + "\n"
