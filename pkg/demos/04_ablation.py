"""The variant comparison on the synthetic set.

Unweighted Euclidean, weighted Mahalanobis and two-layer DNN distances are
trained on one shared dataset (2000 users, 500 items) and averaged over
three seeds, about six minutes on one core.  Expect roughly

    euclidean-nw   0.81
    mahalanobis-w  0.83
    dnn2-w         0.84

Individual seeds are noisy (Mahalanobis moves by ~0.04 between seeds), which
is why the means matter.  ``python3 04_ablation.py quick`` runs one seed on
600 users for a smoke test; at that size the three variants are
indistinguishable, the data is too small to pin down a metric.
"""
import sys
from dataclasses import replace

from gmlfm.experiments import ABLATION_HYPER, run_ablation
from gmlfm.synthetic import make_implicit

quick = sys.argv[1:] == ["quick"]
if quick:
    data, seeds, hyper = make_implicit(n_users=600, seed=0), (0,), replace(ABLATION_HYPER, epochs=10)
else:
    data, seeds, hyper = make_implicit(), (0, 1, 2), ABLATION_HYPER

res = run_ablation(("euclidean-nw", "mahalanobis-w", "dnn2-w"), seeds=seeds, data=data,
                   hyper=hyper, log=print)
print()
print(res.to_text(), end="")
print(f"{res.seconds:.0f}s")
