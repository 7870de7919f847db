"""The interaction functions and the fast second-order forms.

Each pair of active features interacts through a learned weight times a
distance.  For the Mahalanobis and DNN kinds the pairwise sum collapses to a
few matrix products, so a prediction costs O(m k^2) instead of O(m^2 k^2).
"""
import time

import numpy as np

from gmlfm.checks import random_params
from gmlfm.model import KINDS, DistanceSpec, distance, predict, predict_naive, psd_from_factor

rng = np.random.default_rng(0)
p = random_params(n=200, k=8, layers=2, rng=rng)
a, b = rng.normal(size=(2, 8))

print("distance between two random embeddings:")
for kind in KINDS:
    layers = 2 if kind in ("dnn", "manhattan", "chebyshev", "cosine") else 0
    spec = DistanceSpec(kind, kind != "inner", layers)
    print(f"  {kind:12s} {distance(spec, a, b, p): .5f}")

# M = L^T L is positive semi-definite for any L.
M = psd_from_factor(p.L)
print("smallest eigenvalue of M:", f"{np.linalg.eigvalsh(M).min():.3e}")

# fast path against the explicit pairwise sum
idx = np.sort(rng.choice(200, 16, replace=False))
x = rng.uniform(0.5, 1.5, 16)
for spec in (DistanceSpec("mahalanobis"), DistanceSpec("dnn", True, 2)):
    fast, naive = predict(p, (idx, x), spec), predict_naive(p, (idx, x), spec)
    print(f"{spec.kind:12s} fast {fast: .10f}  naive {naive: .10f}")

# timing: the fast form grows slowly with the number of active features
for m in (16, 64, 128):
    idx = np.sort(rng.choice(200, m, replace=False))
    act = (idx, np.ones(m))
    spec = DistanceSpec("mahalanobis")
    t0 = time.perf_counter()
    for _ in range(200):
        predict(p, act, spec)
    fast = (time.perf_counter() - t0) / 200
    t0 = time.perf_counter()
    for _ in range(5):
        predict_naive(p, act, spec)
    slow = (time.perf_counter() - t0) / 5
    print(f"m={m:4d}  fast {fast * 1e6:8.1f} us   pairwise {slow * 1e6:10.1f} us")
