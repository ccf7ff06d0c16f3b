"""Three routes to the polar factor of a gradient matrix, and how fast they get there.

Run: python3 demos/polar_kernels.py
"""

import numpy as np

from moddual import IterationSchedule, inverse_root_dualize, orthogonalize, svd_oracle

rng = np.random.default_rng(0)
g = rng.standard_normal((64, 32))

# The exact answer: keep the singular vectors, set every singular value to one.
exact = svd_oracle(g).polar()

# Newton-Schulz only needs matmuls. Each cubic step maps sigma -> 1.5 sigma - 0.5 sigma^3.
x, report = orthogonalize(g)
print(f"cubic Newton-Schulz: {report.steps} steps, error vs SVD {np.linalg.norm(x - exact):.1e}")

# A tuned per-step quintic gets there in fewer steps.
quintic = IterationSchedule(coefficients=(1.875, -1.25, 0.375), x_max=1.5)
x, report = orthogonalize(g, quintic)
print(f"quintic Newton-Schulz: {report.steps} steps, error vs SVD {np.linalg.norm(x - exact):.1e}")

# The inverse-root route computes (G G^T)^{-1/2} G on the short side.
print(f"inverse root: error vs SVD {np.linalg.norm(inverse_root_dualize(g) - exact):.1e}")

# Singular values before and after: the update "ramps up" the stable rank.
def stable_rank(a):
    return (np.linalg.norm(a) / np.linalg.norm(a, 2)) ** 2

print(f"stable rank {stable_rank(g):.1f} -> {stable_rank(x):.1f} (max {min(g.shape)})")

# On rank-deficient input the null directions stay at zero.
low = rng.standard_normal((64, 5)) @ rng.standard_normal((5, 64))
x, _ = orthogonalize(low)
print("singular values of NS(rank-5 matrix):", np.round(np.linalg.svd(x, compute_uv=False)[:7], 6))
