"""Command-line frontend.

Every command reads a ``key = value`` config file and writes deterministic
files: PGM images, CSV tables and binary checkpoints. Exit codes are 0 on
success, 1 for usage or config errors, 2 for numeric failures and 3 for I/O
errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import SyntheticSpec, read_dataset, to_u8, write_dataset, write_pgm
from .diffcore import NonFiniteError
from .gradcheck import run_gradcheck
from .scoring import upsample_scores

log = logging.getLogger("aptad")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

TRAIN_COLUMNS = ("epoch", "meta_round", "L_ano", "L_div", "C_lnp", "C_lap",
                 "calibrated_lnp", "calibrated_lap", "lr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def fmt(x) -> str:
    """Fixed 9-significant-digit decimal text for CSV cells."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _relocate(cfg: RunConfig, out: str | None, command: str) -> RunConfig:
    if out is None:
        return cfg
    if command == "gen-data":
        return cfg.replace(data_dir=out)
    return cfg.replace(out_dir=out,
                       checkpoint=str(Path(out) / Path(cfg.checkpoint).name),
                       prompts_checkpoint=str(Path(out) / Path(cfg.prompts_checkpoint).name))


def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _save(path, entries) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, entries)


def _load_split(cfg: RunConfig):
    spec = SyntheticSpec(image_size=cfg.image_size, object_kind=cfg.object_kind, seed=cfg.seed)
    split = read_dataset(cfg.data_dir, spec)
    if not split.train or not split.test:
        raise OSError(f"{cfg.data_dir}: dataset needs both train and test images")
    size = split.train[0].image.shape
    if size != (cfg.image_size, cfg.image_size):
        raise OSError(f"{cfg.data_dir}: images are {size}, config expects {cfg.image_size}")
    return split


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    if not cfg.data_dir:
        raise UsageError("gen-data: no output path (set data_dir or pass --out)")
    split = pl.make_split(cfg)
    files = write_dataset(split, cfg.data_dir)
    log.info("wrote %d files to %s", len(files), cfg.data_dir)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    rows = []
    bb = pl.build_backbone(cfg, cache=False, log_fn=lambda step, loss: rows.append((step, loss)))
    _save(cfg.checkpoint, pl.backbone_entries(bb))
    write_csv(_out_dir(cfg) / "pretrain_log.csv", ("step", "loss"), rows)
    log.info("pretrained %d steps, tau %.4g -> %s", len(rows), bb.tau, cfg.checkpoint)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    bb = pl.backbone_from_entries(cfg, load_checkpoint(cfg.checkpoint))
    split = _load_split(cfg)
    res = pl.tune(cfg, bb, split)
    _save(cfg.prompts_checkpoint, pl.prompt_entries(res.bank, res.adam))
    rows = [tuple(getattr(r, c) for c in TRAIN_COLUMNS) for r in res.history]
    write_csv(_out_dir(cfg) / "train_metrics.csv", TRAIN_COLUMNS, rows)
    log.info("tuned %d epochs -> %s", len(rows), cfg.prompts_checkpoint)
    return EXIT_OK


def _score(cfg: RunConfig, args):
    bb = pl.backbone_from_entries(cfg, load_checkpoint(cfg.checkpoint))
    bank = pl.bank_from_entries(load_checkpoint(cfg.prompts_checkpoint))
    split = _load_split(cfg)
    return split, pl.score_test(cfg, bb, split, bank, jobs=args.jobs)


def render_maps(S, size: int, out_dir) -> list:
    """One 8-bit PGM per map: round(255 * clamp(S, 0, 1)) at ``size`` x ``size``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(S):
        p = out / f"test_{i:03d}.pgm"
        write_pgm(p, to_u8(upsample_scores(m, size, size)))
        paths.append(p)
    return paths


def cmd_eval(cfg: RunConfig, args) -> int:
    split, maps = _score(cfg, args)
    metrics = pl.evaluate_maps(split, maps)
    names = [k for k in ("auroc_pixel_s", "auroc_pixel_svg", "auroc_pixel_s_per_image",
                         "auroc_pixel_svg_per_image") if k in metrics]
    write_csv(_out_dir(cfg) / "eval_metrics.csv", names, [[metrics[k] for k in names]])
    for k in names:
        print(f"{k} {fmt(metrics[k])}")
    if args.render:
        render_maps(maps["S"], cfg.image_size, args.render)
    return EXIT_OK


def cmd_render(cfg: RunConfig, args) -> int:
    _, maps = _score(cfg, args)
    render_maps(maps["S"], cfg.image_size, args.render or Path(cfg.out_dir) / "render")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    cases = run_gradcheck(n_cases=100, seed=cfg.seed)
    rows = [(c.index, c.d, c.t, c.grid, c.tau, c.max_error) for c in cases]
    write_csv(_out_dir(cfg) / "gradcheck.csv", ("case", "d", "t", "grid", "tau", "max_rel_error"), rows)
    worst = max(c.max_error for c in cases)
    n_bad = sum(c.max_error >= 1e-4 for c in cases)
    print(f"gradcheck: {len(cases) - n_bad}/{len(cases)} cases pass, worst relative error {worst:.3g}")
    return EXIT_NUMERIC if n_bad else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aptad", description="Few-shot anomaly segmentation by prompt tuning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (data_dir for gen-data, out_dir otherwise)")
        p.add_argument("--render", help="directory for rendered score maps")
        p.add_argument("--jobs", type=int, default=1, help="threads for test-image encoding")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        cfg = _relocate(cfg, args.out, args.command)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
