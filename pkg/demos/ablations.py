"""
Switching components off
========================

Repeats the end-to-end run with one component disabled at a time and with a
terse template pair, printing pooled pixel AUROC per seed. Pretraining is
cached per seed, so each extra variant costs about a second.

Usage: python demos/ablations.py [seeds, e.g. 0,1,2]
"""

import sys

import numpy as np

from aptad import pipeline as pl
from aptad.config import RunConfig

seeds = [int(s) for s in (sys.argv[1] if len(sys.argv) > 1 else "0").split(",")]
simple = {"normal_template": "object good", "abnormal_template": "object bad"}
variants = {
    "full": {},
    "no meta-guiding": {"enable_mg": False},
    "no target focus": {"enable_tf": False},
    "no locality attention": {"enable_la": False},
    "simple templates": simple,
    "no self-optimisation": {"enable_so": False},
    "no self-opt, simple": {"enable_so": False, **simple},
}

table = {name: [] for name in variants}
for seed in seeds:
    for name, over in variants.items():
        table[name].append(pl.run(RunConfig(seed=seed, **over)).metrics["auroc_pixel_s"])

print(f"{'variant':24s}" + "".join(f"  seed {s}" for s in seeds) + "  median")
for name, vals in table.items():
    print(f"{name:24s}" + "".join(f"  {v:6.3f}" for v in vals) + f"  {np.median(vals):6.3f}")

# Self-optimisation should make the result less sensitive to the template wording.
with_so = np.median(np.abs(np.subtract(table["full"], table["simple templates"])))
without = np.median(np.abs(np.subtract(table["no self-optimisation"], table["no self-opt, simple"])))
print(f"\ncomplex/simple template gap: {with_so:.3f} with self-optimisation, {without:.3f} without")
