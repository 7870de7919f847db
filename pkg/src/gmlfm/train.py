"""Squared-loss training: initialisation, SGD/Adam, mini-batch epochs, early stopping."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EncodedSet, to_arrays
from .gradtape import Tape
from .model import ModelParams, active_param_names, dropout_masks, forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class HyperParams:
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 20
    dropout: float = 0.2
    k: int = 64
    layers: int = 2
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    l2: float = 0.0
    patience: int = 5
    seed: int = 0
    clip_norm: float | None = 10.0
    init: str = "normal"  # or "orthogonal"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("normal", "orthogonal"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.l2 < 0 or self.epochs < 0 or self.layers < 0:
            raise ValueError("l2, epochs and layers must be non-negative")


@dataclass
class TrainState:
    params: ModelParams
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_metric: float | None = None
    since_improvement: int = 0


def _orthogonal(k, rng):
    q, r = np.linalg.qr(rng.normal(size=(k, k)))
    return q * np.sign(np.diag(r))


def init_params(layout, hyper, rng, layers=None):
    """Every learnable tensor ~ N(0, 0.01^2); the global bias starts at 0.

    With ``hyper.init == "orthogonal"`` the metric factor and the MLP
    weights start as random orthogonal matrices and the MLP biases at 0.  At
    0.01 a tanh stack maps every embedding to nearly the same point, so the
    learned distance starts flat and gradient descent can stall there.
    """
    n = layout if isinstance(layout, int) else layout.n
    k = hyper.k
    layers = hyper.layers if layers is None else layers

    def draw(*shape):
        return rng.normal(0.0, 0.01, size=shape)

    w, V, h, L = draw(n), draw(n, k), draw(k), draw(k, k)
    mlp = [(draw(k, k), draw(k)) for _ in range(layers)]
    if hyper.init == "orthogonal":
        L = _orthogonal(k, rng)
        mlp = [(_orthogonal(k, rng), np.zeros(k)) for _ in mlp]
    return ModelParams(0.0, w, V, h, L, mlp)


def squared_loss(pred, y):
    return (pred - y) ** 2


# -------------------------------------------------------------- gradients
def batch_gradients(params, batch, spec, masks=None, l2=0.0):
    """Summed squared loss over ``batch`` and its gradient per active group."""
    tape = Tape()
    values = params.to_dict()
    names = active_param_names(spec, params)
    P = {k: (tape.param(k, v) if k in names else tape.constant(v)) for k, v in values.items()}
    pred = forward(tape, P, batch.indices, batch.values, spec, masks)
    resid = pred - batch.labels
    loss = tape.sum(tape.square(resid))
    if l2 > 0:
        reg = None
        for k in names:
            term = tape.sum(tape.square(P[k])) if P[k].value.ndim else tape.square(P[k])
            reg = term if reg is None else reg + term
        loss = loss + reg * l2
    grads = tape.backward(loss)
    return float(loss.value), pred.value, grads


def clip_gradients(grads, max_norm):
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        return {k: g * s for k, g in grads.items()}
    return grads


# -------------------------------------------------------------- optimisers
def _apply(params, updates):
    d = params.to_dict()
    for k, u in updates.items():
        d[k] = d[k] - u
    return ModelParams.from_dict(d)


def sgd_step(params, grads, lr):
    """``theta <- theta - lr * g`` for every group present in ``grads``."""
    return _apply(params, {k: lr * g for k, g in grads.items()})


def adam_step(state, grads, hyper):
    """Bias-corrected Adam.

    Only entries with a nonzero gradient move (and update their moments), so
    embedding rows absent from a batch stay untouched.
    """
    b1, b2 = hyper.betas
    t = state.step + 1
    values = state.params.to_dict()
    updates = {}
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(values[k])
            v = np.zeros_like(values[k])
        live = g != 0
        m = np.where(live, b1 * m + (1 - b1) * g, m)
        v = np.where(live, b2 * v + (1 - b2) * g * g, v)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        updates[k] = np.where(live, hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps), 0.0)
        state.m[k], state.v[k] = m, v
    state.params = _apply(state.params, updates)
    state.step = t
    return state


# ------------------------------------------------------------------ epochs
def train_epoch(state, train, spec, hyper, rng):
    """One shuffled pass in mini-batches; returns ``(state, mean loss)``."""
    data = to_arrays(train)
    N = len(data)
    if N == 0:
        raise TrainingError("empty training set")
    order = rng.permutation(N)
    total = 0.0
    k = state.params.k
    for b, start in enumerate(range(0, N, hyper.batch_size)):
        rows = order[start : start + hyper.batch_size]
        batch = data.subset(rows)
        masks = None
        if spec.transformed and hyper.dropout > 0:
            masks = dropout_masks((len(rows), batch.indices.shape[1], k), spec.layers, hyper.dropout, rng)
        loss, pred, grads = batch_gradients(state.params, batch, spec, masks, hyper.l2)
        if not np.isfinite(loss):
            bad = int(rows[int(np.argmax(~np.isfinite(pred)))]) if not np.all(np.isfinite(pred)) else int(rows[0])
            raise TrainingError(f"non-finite loss in batch {b} (instance {bad})")
        grads = clip_gradients(grads, hyper.clip_norm)
        if hyper.optimizer == "sgd":
            state.params = sgd_step(state.params, grads, hyper.lr)
            state.step += 1
        else:
            state = adam_step(state, grads, hyper)
        total += float(np.sum((pred - batch.labels) ** 2))
    state.epoch += 1
    return state, total / N


def fit(split, spec, hyper, task="rating", validate=None, callback=None):
    """Train with early stopping on the validation set.

    ``validate(params) -> (value, higher_is_better)`` overrides the default
    metric (RMSE for rating, HR@10 for top-n).  Without validation data every
    epoch runs and the final parameters are returned.
    """
    from .evaluate import evaluate_rating, evaluate_topn  # local: evaluate imports train-free modules

    rng = np.random.default_rng(hyper.seed)
    params = init_params(split.layout, hyper, rng, layers=spec.layers)
    state = TrainState(params)
    train = to_arrays(split.train)

    if validate is None and split.validation:
        if task == "rating":
            def validate(p):
                return evaluate_rating(p, spec, split.validation).rmse, False
        else:
            def validate(p):
                return evaluate_topn(p, spec, split.validation, split.candidates, layout=split.layout,
                                     item_attributes=split.item_attributes).hr, True
    history = []
    best = state.params
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        state, loss = train_epoch(state, train, spec, hyper, rng)
        metric = None
        stop = False
        if validate is not None:
            metric, higher = validate(state.params)
            better = state.best_metric is None or (metric > state.best_metric if higher else metric < state.best_metric)
            if better:
                state.best_metric, state.since_improvement = metric, 0
                best = state.params
            else:
                state.since_improvement += 1
                stop = state.since_improvement >= hyper.patience
        else:
            best = state.params
        rec = {"epoch": epoch, "train_loss": loss, "val_metric": metric,
               "wall_time": time.perf_counter() - t0}
        history.append(rec)
        log.info("epoch %d loss %.6f val %s", epoch, loss, metric)
        if callback is not None:
            callback(state, rec)
        if stop:
            break
    return best, history


def hyper_to_dict(h):
    d = asdict(h)
    d["betas"] = list(h.betas)
    return d


__all__ = [
    "HyperParams", "TrainState", "TrainingError", "init_params", "squared_loss",
    "batch_gradients", "clip_gradients", "sgd_step", "adam_step", "train_epoch", "fit",
    "EncodedSet",
]
