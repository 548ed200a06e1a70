"""
Locality-aware attention and gradient checks
============================================

Shows which patches a locality radius admits, how the locality path's
attention differs from global attention, and audits the prompt-loss
gradients against central differences. Runs in well under a minute.
"""

import math

import numpy as np

from aptad.encoders import _block_params, build_locality_mask, lat_block_forward
from aptad.gradcheck import run_gradcheck

# Admissible neighbours of the centre patch on a 5x5 grid, for a few radii.
for k in (1.0, 1.5, 2.0):
    adm = build_locality_mask(5, k).admissible()[1:, 1:][12].reshape(5, 5)
    print(f"k = {k}:")
    for row in adm:
        print("   " + " ".join("#" if v else "." for v in row))

# Random tokens through one block: the locality path keeps all attention mass
# inside the neighbourhood, the global path spreads it over the whole grid.
rng = np.random.default_rng(0)
g, width = 6, 16
tokens = rng.normal(size=(g * g + 1, width)).astype(np.float32)
params = _block_params(rng, "b", width)
m = build_locality_mask(g, 1.5)
_, _, a_glob, a_loc = lat_block_forward(tokens, params, "b", m)
outside = ~m.admissible()
print(f"\nattention mass outside the neighbourhood: global {a_glob[outside].sum() / len(a_glob):.3f} per row, "
      f"locality {a_loc[outside].max():.1e} max")

# With a radius spanning the grid both paths coincide.
_, _, a_glob, a_loc = lat_block_forward(tokens, params, "b", build_locality_mask(g, math.sqrt(2) * (g - 1)))
print(f"radius covering the grid: max |local - global| = {np.abs(a_loc - a_glob).max():.1e}")

# Autodiff against float64 central differences on 20 random prompt problems.
cases = run_gradcheck(20)
worst = max(cases, key=lambda c: c.max_error)
print(f"\ngradient check: worst relative error {worst.max_error:.2e} "
      f"(d={worst.d}, t={worst.t}, grid={worst.grid}x{worst.grid})")
