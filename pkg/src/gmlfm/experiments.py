"""Leave-one-out ablation runs over model variants on the synthetic set."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CandidateBuilder, sample_negatives, split_leave_one_out
from .evaluate import evaluate_topn
from .model import DistanceSpec
from .synthetic import make_implicit
from .train import HyperParams, fit

# the variant rows of the ablation table
VARIANTS = {
    "euclidean-nw": DistanceSpec("euclidean", False, 0),
    "euclidean-w": DistanceSpec("euclidean", True, 0),
    "mahalanobis-nw": DistanceSpec("mahalanobis", False, 0),
    "mahalanobis-w": DistanceSpec("mahalanobis", True, 0),
    "dnn1-w": DistanceSpec("dnn", True, 1),
    "dnn2-w": DistanceSpec("dnn", True, 2),
    "dnn3-w": DistanceSpec("dnn", True, 3),
    "dnn2-nw": DistanceSpec("dnn", False, 2),
    "manhattan-w": DistanceSpec("manhattan", True, 2),
    "chebyshev-w": DistanceSpec("chebyshev", True, 2),
    "cosine-w": DistanceSpec("cosine", True, 2),
    "inner": DistanceSpec("inner", False, 0),
}

# small embeddings match the generator's latent size; see make_implicit
ABLATION_HYPER = HyperParams(lr=0.01, batch_size=256, epochs=20, dropout=0.0, k=4,
                             layers=2, patience=5, init="orthogonal")


@dataclass
class AblationResult:
    rows: dict = field(default_factory=dict)  # name -> list of (seed, hr, ndcg)
    seconds: float = 0.0

    def mean_hr(self, name):
        return float(np.mean([r[1] for r in self.rows[name]]))

    def mean_ndcg(self, name):
        return float(np.mean([r[2] for r in self.rows[name]]))

    def to_text(self):
        lines = ["variant\tseeds\tHR@10\tNDCG@10"]
        for name, runs in self.rows.items():
            lines.append(f"{name}\t{len(runs)}\t{self.mean_hr(name):.4f}\t{self.mean_ndcg(name):.4f}")
        return "\n".join(lines) + "\n"


def prepare_topn(data, seed, neg_ratio=2):
    """Leave-one-out split with seeded training negatives and fixed candidates."""
    split = split_leave_one_out(data.instances, data.layout)
    split.train = sample_negatives(split.train, data.layout, neg_ratio, seed, data.item_attributes)
    split.item_attributes = data.item_attributes
    split.candidates = CandidateBuilder(data.instances, data.n_items, 99, 0)
    return split


def run_ablation(names=("euclidean-nw", "mahalanobis-w", "dnn2-w"), seeds=(0, 1, 2), data=None,
                 hyper=ABLATION_HYPER, log=None):
    """Train each variant once per seed and score HR@10/NDCG@10 on the test users.

    The dataset and the evaluation candidates stay fixed; the seed drives
    initialisation, batch order and the training negatives.
    """
    data = data if data is not None else make_implicit()
    out = AblationResult()
    t0 = time.perf_counter()
    for seed in seeds:
        split = prepare_topn(data, seed)
        for name in names:
            spec = VARIANTS[name]
            h = replace(hyper, seed=seed, layers=spec.layers)
            params, _ = fit(split, spec, h, task="topn")
            rep = evaluate_topn(params, spec, split.test, split.candidates, layout=data.layout,
                                item_attributes=data.item_attributes)
            out.rows.setdefault(name, []).append((seed, rep.hr, rep.ndcg))
            if log:
                log(f"{name} seed={seed} hr={rep.hr:.4f} ndcg={rep.ndcg:.4f}")
    out.seconds = time.perf_counter() - t0
    return out
