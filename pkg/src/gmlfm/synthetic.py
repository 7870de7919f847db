"""Seeded synthetic implicit-feedback data with correlated latent features.

Users and items get unit-length latent vectors whose coordinates are
correlated through a shared covariance; each item also inherits a
category direction.  A user's affinity for an item is a signed bilinear
match multiplied by a squared distance between tanh-warped features, plus
a small item popularity term.  Each user then draws a handful of distinct
items from a softmax over those affinities.

On the unit sphere the norm parts of the distance are nearly constant, so
the affinity matrix has rank roughly ``dim**2`` while staying compact in
the weight-times-distance form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FieldLayout, encode_instance, write_tabular


@dataclass
class SyntheticData:
    instances: list
    layout: FieldLayout
    item_attributes: dict
    affinity: np.ndarray  # (n_users, n_items) true scores

    @property
    def n_items(self):
        return self.affinity.shape[1]


def correlated_cov(dim, rho, rng):
    """Random covariance with off-diagonal correlation of magnitude ~``rho``."""
    A = rng.normal(size=(dim, dim))
    Q, _ = np.linalg.qr(A)
    eig = np.geomspace(1.0, max(1e-3, 1.0 - rho), dim)
    return (Q * eig) @ Q.T


def make_implicit(n_users=2000, n_items=500, n_categories=20, dim=4, per_user=(30, 60),
                  rho=0.5, temperature=0.3, pop_scale=0.3, warp=2.0, seed=0):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(correlated_cov(dim, rho, rng))
    P = rng.normal(size=(n_users, dim)) @ chol.T
    cat_vec = rng.normal(size=(n_categories, dim)) @ chol.T
    item_cat = rng.integers(n_categories, size=n_items)
    Q = 0.7 * rng.normal(size=(n_items, dim)) @ chol.T + cat_vec[item_cat]
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    Q /= np.linalg.norm(Q, axis=1, keepdims=True)
    # signed pair weight times a distance between non-linearly mixed features
    mix = 2.0 * rng.normal(size=(dim, dim)) / np.sqrt(dim)
    h_true = rng.normal(size=dim)
    Pt, Qt = P @ mix.T, Q @ mix.T
    if warp > 0:
        Pt, Qt = np.tanh(warp * Pt) / warp, np.tanh(warp * Qt) / warp
    dist = (
        np.sum(Pt**2, axis=1)[:, None] + np.sum(Qt**2, axis=1)[None, :] - 2 * Pt @ Qt.T
    )
    aff = ((P * h_true) @ Q.T) * dist
    aff = aff / aff.std() + rng.normal(scale=pop_scale, size=n_items)
    aff = (aff - aff.mean()) / aff.std()

    layout = FieldLayout((("user", n_users), ("item", n_items), ("category", n_categories)))
    instances = []
    lo, hi = per_user
    for u in range(n_users):
        count = int(rng.integers(lo, hi + 1))
        logits = aff[u] / temperature
        prob = np.exp(logits - logits.max())
        prob /= prob.sum()
        items = rng.choice(n_items, size=count, replace=False, p=prob)
        times = rng.permutation(count) + 1_000_000 + u * 1000
        for it, ts in zip(items, times):
            instances.append(encode_instance((u, int(it), int(item_cat[it])), layout, 1.0, int(ts)))
    attrs = {i: {2: int(item_cat[i])} for i in range(n_items)}
    return SyntheticData(instances, layout, attrs, aff)


def write_synthetic(path, data, delimiter="\t"):
    rows = [
        (x.user, x.item, 1, x.timestamp, x.categories[2]) for x in data.instances
    ]
    write_tabular(path, rows, ("category",), delimiter)
