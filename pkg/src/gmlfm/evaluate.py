"""RMSE, HR@k, NDCG@k and the rating / leave-one-out ranking harnesses."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import to_arrays, with_item
from .model import predict_batch


class ProtocolError(ValueError):
    pass


@dataclass
class RankedList:
    items: np.ndarray
    scores: np.ndarray

    def rank_of(self, item):
        """1-based position of ``item``."""
        hits = np.flatnonzero(self.items == item)
        if hits.size == 0:
            raise ProtocolError(f"item {item} is not among the candidates")
        return int(hits[0]) + 1


def rank_items(items, scores):
    """Sort by score descending; equal scores keep ascending item id order."""
    items = np.asarray(items)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((items, -scores))
    return RankedList(items[order], scores[order])


def rmse(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return math.sqrt(math.fsum(((p - t) ** 2).tolist()) / p.size)


def hit_ratio_at_k(ranked, positive, k=10):
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1 if ranked.rank_of(positive) <= k else 0


def ndcg_at_k(ranked, positive, k=10):
    if k < 1:
        raise ValueError("k must be >= 1")
    r = ranked.rank_of(positive)
    return 1.0 / math.log2(r + 1) if r <= k else 0.0


@dataclass
class MetricsReport:
    task: str
    count: int
    rmse: float | None = None
    hr: float | None = None
    ndcg: float | None = None
    k: int | None = None
    config: dict = field(default_factory=dict)

    def to_text(self):
        """``key=value`` lines; floats use ``repr`` so they round-trip exactly."""
        lines = [f"task={self.task}", f"count={self.count}"]
        for key in ("rmse", "hr", "ndcg", "k"):
            val = getattr(self, key)
            if val is not None:
                lines.append(f"{key}={val!r}")
        for key in sorted(self.config):
            lines.append(f"config.{key}={json.dumps(self.config[key], sort_keys=True)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        cfg = {k[len("config."):]: json.loads(v) for k, v in kv.items() if k.startswith("config.")}
        return cls(
            task=kv["task"],
            count=int(kv["count"]),
            rmse=float(kv["rmse"]) if "rmse" in kv else None,
            hr=float(kv["hr"]) if "hr" in kv else None,
            ndcg=float(kv["ndcg"]) if "ndcg" in kv else None,
            k=int(kv["k"]) if "k" in kv else None,
            config=cfg,
        )


def candidate_arrays(instance, items, layout, item_attributes=None):
    """Encoded copies of ``instance`` with the item swapped for each of ``items``."""
    base = with_item(instance, int(items[0]), layout, item_attributes)
    enc = to_arrays([base])
    idx = np.repeat(enc.indices, len(items), axis=0)
    offs = layout.offsets
    ip = layout.position(layout.item_field)
    idx[:, ip] = offs[ip] + np.asarray(items)
    if item_attributes:
        for r, it in enumerate(items):
            for p, c in item_attributes.get(int(it), {}).items():
                idx[r, p] = offs[p] + c
    return enc.__class__(idx, np.repeat(enc.values, len(items), axis=0),
                         np.repeat(enc.labels, len(items)))


def evaluate_rating(params, spec, test, config=None):
    if len(test) == 0:
        raise ValueError("empty test set")
    data = to_arrays(test)
    pred = predict_batch(params, data.indices, data.values, spec)
    return MetricsReport("rating", len(data), rmse=rmse(pred, data.labels), config=config or {})


def evaluate_topn(params, spec, test, candidates, k=10, *, layout=None, item_attributes=None,
                  scorer=None, config=None):
    """Leave-one-out ranking: each test positive against its sampled candidates.

    ``candidates(user, positive)`` returns the item ids to rank (the positive
    included).  ``scorer(indices, values)`` replaces model scoring, e.g. for a
    random baseline.  Scoring is always in eval mode.
    """
    if not test:
        raise ValueError("empty test set")
    if layout is None:
        raise ValueError("evaluate_topn needs the field layout")
    if scorer is None:
        def scorer(idx, val):
            return predict_batch(params, idx, val, spec)

    per_user = []
    blocks_idx, blocks_val = [], []
    for inst in test:
        items = candidates(inst.user, inst.item)
        if inst.item not in items:
            raise ProtocolError(f"user {inst.user}: positive item missing from candidates")
        items = np.asarray(items)
        per_user.append((inst.item, items))
        enc = candidate_arrays(inst, items, layout, item_attributes)
        blocks_idx.append(enc.indices)
        blocks_val.append(enc.values)
    scores = np.asarray(scorer(np.concatenate(blocks_idx), np.concatenate(blocks_val)),
                        dtype=np.float64)

    hrs, ndcgs = [], []
    pos = 0
    for positive, items in per_user:
        ranked = rank_items(items, scores[pos : pos + len(items)])
        pos += len(items)
        hrs.append(hit_ratio_at_k(ranked, positive, k))
        ndcgs.append(ndcg_at_k(ranked, positive, k))
    n = len(per_user)
    return MetricsReport(
        "topn", n, hr=math.fsum(hrs) / n, ndcg=math.fsum(ndcgs) / n, k=k, config=config or {}
    )
