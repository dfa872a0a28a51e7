"""
Reduced versus standard non-local aggregation
=============================================

Standard non-local attention compares every pixel with every other pixel,
so its cost grows with N^2. The reduced form attends to S region keys
instead, and the keys double as values. Here we compare cost and time on
a 32 x 64 x 128 bottleneck.
"""
import time

import numpy as np

from lrnnet.cost import attention_flops, standard_nonlocal_macs
from lrnnet.svn import RegionGrid, SVNConfig, extract_keys, reduced_nonlocal, standard_nonlocal

rng = np.random.default_rng(1)
c, h, w = 32, 64, 128
n = h * w
f = rng.random((c, h, w))
q = f.reshape(c, n)

for grids in [(RegionGrid(8, 8),), (RegionGrid(8, 8), RegionGrid(4, 4))]:
    cfg = SVNConfig(scales=grids)
    bank = extract_keys(f, cfg)
    cost = attention_flops(c, n, cfg.total_keys, cfg.power_iters, len(grids))
    t0 = time.perf_counter()
    out = reduced_nonlocal(q, bank)
    dt = time.perf_counter() - t0
    print(f"{'+'.join(map(str, grids)):>8}: S={cfg.total_keys:3d}  attention {cost['attention_macs'] / 1e6:.1f}M MACs"
          f"  power iteration {cost['power_iter_macs'] / 1e6:.2f}M  {dt * 1e3:.1f} ms  rank {np.linalg.matrix_rank(out)}")

print(f"standard: attention {standard_nonlocal_macs(c, n, n) / 1e9:.2f}G MACs")
t0 = time.perf_counter()
# chunk the queries so the N x N score matrix never exists in full
std = np.concatenate([standard_nonlocal(q[:, i:i + 1024], q, q, "mean") for i in range(0, n, 1024)], axis=1)
print(f"standard took {time.perf_counter() - t0:.2f} s")

# With one key the output is a rank-1 projection of the queries.
one = extract_keys(f, SVNConfig(scales=(RegionGrid(1, 1),)))
out = reduced_nonlocal(q, one)
print(f"\n1x1 grid: output rank {np.linalg.matrix_rank(out)}; equals k k^T Q: "
      f"{np.allclose(out, one @ (one.T @ q))}")
