"""
Dominant singular vectors by power iteration
============================================

Each spatial region of a C x H' x W' feature map is a C x (H'W') matrix.
Its left dominant singular vector summarises the region in C numbers.
Two steps of power iteration are enough when the matrix is nonnegative,
as post-ReLU features are. We check that against a Jacobi SVD.
"""
import numpy as np

from lrnnet.svn import RegionGrid, SVNConfig, extract_keys, partition_regions, power_iteration, svd_oracle

rng = np.random.default_rng(0)

# One region: a nonnegative 32 x 128 matrix.
a = rng.random((32, 128))
u_exact = svd_oracle(a).u[:, 0]
for t in (1, 2, 3, 5):
    u = power_iteration(a, t)
    print(f"T={t}: |cos| to the exact vector = {abs(u @ u_exact):.12f}")

# Signed data converges more slowly: the spectral gap is what matters.
b = rng.standard_normal((32, 128))
s = svd_oracle(b).s
print(f"\nsigned matrix, sigma2/sigma1 = {s[1] / s[0]:.3f}")
for t in (2, 10, 50):
    print(f"T={t}: |cos| = {abs(power_iteration(b, t) @ svd_oracle(b).u[:, 0]):.6f}")

# A whole 32 x 64 x 128 map on an 8x8 grid gives a bank of 64 keys.
f = rng.random((32, 64, 128))
cfg = SVNConfig(scales=(RegionGrid(8, 8),), power_iters=2)
bank = extract_keys(f, cfg)
regions = partition_regions(f, RegionGrid(8, 8))
cos = [abs(bank[:, j] @ svd_oracle(r).u[:, 0]) for j, r in enumerate(regions)]
print(f"\nbank shape {bank.shape}, worst region |cos| {min(cos):.9f}")

# Adding the 4x4 grid appends 16 coarser keys.
multi = extract_keys(f, SVNConfig(scales=(RegionGrid(8, 8), RegionGrid(4, 4))))
print(f"8x8 + 4x4 bank shape {multi.shape}")
