"""Dyadic frequency blocks: how a field splits and reassembles.

Every field on the torus decomposes into smooth frequency bands
(annuli |xi| ~ 2^j).  The bands overlap only between neighbours, sum
back to the original field, and weighted sums of their sizes give the
smoothness norms used everywhere else in the library.
"""

import numpy as np

from cnslab import (NormSpec, besov_norm, build_cutoffs, decompose,
                    dyadic_block, make_grid, random_field, resolvable_range)

grid = make_grid(2, 64)
rng = np.random.default_rng(0)
u = random_field(grid, rng, amplitude=1.0)

j_min, j_max = resolvable_range(grid)
print(f"grid: d=2, N=64, box 2*pi; resolvable bands j = {j_min} .. {j_max}")

# the bands tile frequency space: their multipliers sum to one away from 0
pair = build_cutoffs()
rho = grid.xi_norm().ravel()
defect = pair.partition_defect(rho[rho > 0], j_min - 2, j_max + 2)
print(f"partition-of-unity defect on the grid: {defect:.2e}")

# reassembly: mean plus sum of blocks returns the field
blocks = decompose(u)
total = blocks.reconstruct()
print(f"reassembly error: {(total - u).l2():.2e}")

# energy per band
print("\n  j   2^j    ||block_j||_L2")
for j in range(j_min, j_max + 1):
    bj = dyadic_block(u, j)
    print(f" {j:+d}  {2.0 ** j:6.2f}  {bj.l2():.4f}")

# a single oscillation lands in the band containing its frequency
x = grid.x_vectors()
mode = u.from_samples(grid, np.cos(8.0 * x[0]))
print("\nsingle mode cos(8 x): block energies around j=3 (2^3 = 8):")
for j in (2, 3, 4):
    print(f"  j={j}: {dyadic_block(mode, j).l2():.4f}")

# Besov norms weight the bands by 2^(j s); higher s emphasises high bands
for s in (0.0, 1.0, 2.0):
    spec = NormSpec(s=s, p=2.0, r=1)
    print(f"B^{s:g}_(2,1) norm of u: {besov_norm(u, spec):.4f}")
