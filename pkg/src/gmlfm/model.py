"""GML-FM prediction.

Two independent routes compute the same model:

* plain numpy, one instance at a time: :func:`predict_naive` (direct pairwise
  double sum, the oracle) and :func:`predict`, which uses the linear-time
  second-order forms for the euclidean, mahalanobis and dnn kinds;
* :func:`forward`, a batched graph recorded on a :class:`~gmlfm.gradtape.Tape`
  that training differentiates and :func:`predict_batch` evaluates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .gradtape import Tape

KINDS = ("inner", "euclidean", "mahalanobis", "dnn", "manhattan", "chebyshev", "cosine")
FAST_KINDS = frozenset({"euclidean", "mahalanobis", "dnn"})
MLP_KINDS = frozenset({"dnn", "manhattan", "chebyshev", "cosine"})
COSINE_EPS = 1e-12


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceSpec:
    """Which interaction function is active.

    ``inner`` is the vanilla FM and never carries the transformation weight.
    ``dnn`` needs at least one layer; ``euclidean`` and ``mahalanobis`` take
    none; the Minkowski/cosine kinds work on MLP outputs when ``layers > 0``.
    """

    kind: str = "dnn"
    use_weight: bool = True
    layers: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown distance kind {self.kind!r} (expected one of {', '.join(KINDS)})")
        layers = int(self.layers)
        if layers < 0:
            raise SpecError("layers must be >= 0")
        if self.kind == "dnn" and layers < 1:
            raise SpecError("kind 'dnn' needs layers >= 1 (zero layers is the 'euclidean' kind)")
        if self.kind in ("euclidean", "mahalanobis", "inner") and layers != 0:
            raise SpecError(f"kind {self.kind!r} takes no MLP layers")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "use_weight", bool(self.use_weight) and self.kind != "inner")

    @property
    def minkowski_p(self):
        return {"manhattan": 1.0, "euclidean": 2.0, "dnn": 2.0, "chebyshev": np.inf}.get(self.kind)

    @property
    def fast_path(self):
        return self.use_weight and self.kind in FAST_KINDS

    @property
    def transformed(self):
        return self.kind in MLP_KINDS and self.layers > 0

    def label(self):
        w = "w" if self.use_weight else "nw"
        return f"{self.kind}-{w}-l{self.layers}"


@dataclass
class ModelParams:
    w0: float
    w: np.ndarray  # (n,)
    V: np.ndarray  # (n, k)
    h: np.ndarray  # (k,)
    L: np.ndarray  # (k, k)
    mlp: list = field(default_factory=list)  # [(W (k, k), b (k,)), ...]

    @property
    def n(self):
        return self.V.shape[0]

    @property
    def k(self):
        return self.V.shape[1]

    @property
    def M(self):
        return psd_from_factor(self.L)

    def to_dict(self):
        d = {"w0": np.array(self.w0, dtype=np.float64), "w": self.w, "V": self.V, "h": self.h, "L": self.L}
        for l, (W, b) in enumerate(self.mlp, start=1):
            d[f"W{l}"] = W
            d[f"b{l}"] = b
        return d

    @classmethod
    def from_dict(cls, d):
        layers = sum(1 for key in d if key.startswith("W"))
        mlp = [(np.asarray(d[f"W{l}"], dtype=np.float64), np.asarray(d[f"b{l}"], dtype=np.float64))
               for l in range(1, layers + 1)]
        return cls(float(d["w0"]), *(np.asarray(d[x], dtype=np.float64) for x in ("w", "V", "h", "L")), mlp)

    def copy(self):
        return ModelParams.from_dict({k: np.array(v, copy=True) for k, v in self.to_dict().items()})

    def assert_finite(self):
        for name, arr in self.to_dict().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"parameter {name} has non-finite entries")


def active_param_names(spec, params):
    """Parameter groups that influence predictions under ``spec``."""
    names = ["w0", "w", "V"]
    if spec.use_weight:
        names.append("h")
    if spec.kind == "mahalanobis":
        names.append("L")
    if spec.transformed:
        for l in range(1, spec.layers + 1):
            names += [f"W{l}", f"b{l}"]
    if spec.transformed and len(params.mlp) < spec.layers:
        raise SpecError(f"spec needs {spec.layers} layers, params have {len(params.mlp)}")
    return names


class ActiveSet(NamedTuple):
    indices: np.ndarray
    values: np.ndarray


def as_active(instance):
    if isinstance(instance, ActiveSet):
        return instance
    if hasattr(instance, "indices"):
        idx, val = instance.indices, instance.values
    else:
        idx, val = instance
    return ActiveSet(np.asarray(idx, dtype=np.intp), np.asarray(val, dtype=np.float64))


# ----------------------------------------------------------- building blocks
def psd_from_factor(L):
    L = np.asarray(L, dtype=np.float64)
    return L.T @ L


def transformation_weight(h, vi, vj):
    return float(np.dot(h, np.multiply(vi, vj)))


def dropout_masks(shape, layers, rate, rng):
    """Inverted-dropout masks for the activations between consecutive layers."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0 or layers < 2:
        return None
    return [(rng.random(shape) >= rate) / (1.0 - rate) for _ in range(layers - 1)]


def transform_mlp(v, params, train_mode=False, dropout=0.0, rng=None, masks=None):
    """Shared tanh MLP applied to the last axis of ``v``.

    In train mode, dropout is applied between consecutive layers; pass
    ``masks`` (from :func:`dropout_masks`) to freeze them, or ``rng``.
    """
    if not 0 <= dropout < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    out = np.asarray(v, dtype=np.float64)
    n_layers = len(params.mlp)
    if train_mode and masks is None and dropout > 0:
        masks = dropout_masks(out.shape, n_layers, dropout, rng or np.random.default_rng())
    for l, (W, b) in enumerate(params.mlp):
        out = np.tanh(out @ W.T + b)
        if train_mode and masks is not None and l < n_layers - 1:
            out = out * masks[l]
    return out


def _pair_distance(kind, ti, tj, L=None):
    d = ti - tj
    if kind in ("euclidean", "dnn"):
        return float(d @ d)
    if kind == "mahalanobis":
        Ld = L @ d
        return float(Ld @ Ld)
    if kind == "manhattan":
        return float(np.sum(np.abs(d)))
    if kind == "chebyshev":
        return float(np.max(np.abs(d)))
    if kind == "cosine":
        return float(ti @ tj / (np.linalg.norm(ti) * np.linalg.norm(tj) + COSINE_EPS))
    if kind == "inner":
        return float(ti @ tj)
    raise SpecError(f"unknown distance kind {kind!r}")


def distance(spec, vi, vj, params=None):
    """Interaction function between two embeddings (eval mode).

    mahalanobis is ``(vi-vj)^T L^T L (vi-vj)``; euclidean and dnn are squared
    distances; ``inner`` is a plain inner product.
    """
    vi = np.asarray(vi, dtype=np.float64)
    vj = np.asarray(vj, dtype=np.float64)
    if vi.shape != vj.shape:
        raise ValueError(f"embedding shapes differ: {vi.shape} vs {vj.shape}")
    if spec.transformed:
        mlp = ModelParams(0.0, None, None, None, None, params.mlp[: spec.layers])
        vi, vj = transform_mlp(vi, mlp), transform_mlp(vj, mlp)
    return _pair_distance(spec.kind, vi, vj, None if params is None else params.L)


# ------------------------------------------------------------ numpy routes
def predict_naive(params, instance, spec, train_mode=False, dropout=0.0, rng=None, masks=None):
    """Direct double sum over active attribute pairs; the reference oracle."""
    idx, x = as_active(instance)
    y = params.w0 + float(params.w[idx] @ x)
    Vs = params.V[idx]
    m = len(idx)
    if spec.transformed and train_mode and masks is None and dropout > 0:
        masks = dropout_masks(Vs.shape, spec.layers, dropout, rng or np.random.default_rng())
    sub = ModelParams(0.0, None, None, None, None, params.mlp[: spec.layers])

    def t(a):
        if not spec.transformed:
            return Vs[a]
        mk = None if masks is None or not train_mode else [mask[a] for mask in masks]
        return transform_mlp(Vs[a], sub, train_mode, 0.0, None, mk)

    for a in range(m):
        for b in range(a + 1, m):
            D = _pair_distance(spec.kind, t(a), t(b), params.L)
            wij = transformation_weight(params.h, Vs[a], Vs[b]) if spec.use_weight else 1.0
            y += wij * D * x[a] * x[b]
    return y


def second_order_mahalanobis_fast(active, V, M, h):
    """Weighted Mahalanobis second-order term in O(m k^2).

    Two independent passes over the active set:
    ``a^T (h * sum_i x_i q_i v_i) - sum_j x_j (h*v_j)^T S (M v_j)``
    with ``q_i = v_i^T M v_i`` and ``S = sum_i x_i v_i v_i^T``.
    """
    idx, x = as_active(active)
    if len(idx) < 2:
        return 0.0
    Vs = V[idx]
    xv = Vs * x[:, None]
    MV = Vs @ M.T
    q = np.einsum("ik,ik->i", Vs, MV)
    first = xv.sum(axis=0) @ (h * (xv * q[:, None]).sum(axis=0))
    S = xv.T @ Vs
    second = np.sum(((xv * h) @ S) * MV)
    return float(first - second)


def second_order_dnn_fast(active, V, Vhat, h):
    """Weighted squared distance on transformed rows, O(m k^2).

    ``Vhat`` holds the transformed embeddings aligned with the active set.
    """
    idx, x = as_active(active)
    if len(idx) < 2:
        return 0.0
    Vs = V[idx]
    Vhat = np.asarray(Vhat, dtype=np.float64)
    xv = Vs * x[:, None]
    q = np.einsum("ik,ik->i", Vhat, Vhat)
    first = xv.sum(axis=0) @ (h * (xv * q[:, None]).sum(axis=0))
    S = xv.T @ Vhat
    second = np.sum(((xv * h) @ S) * Vhat)
    return float(first - second)


def vanilla_fm_predict(params, instance):
    idx, x = as_active(instance)
    xv = params.V[idx] * x[:, None]
    inter = 0.5 * float(np.sum(xv.sum(axis=0) ** 2) - np.sum(xv * xv))
    return params.w0 + float(params.w[idx] @ x) + inter


def predict(params, instance, spec, train_mode=False, dropout=0.0, rng=None, masks=None):
    """Score one instance, using the linear-time form where one exists."""
    if not spec.fast_path:
        if spec.kind == "inner":
            return vanilla_fm_predict(params, instance)
        return predict_naive(params, instance, spec, train_mode, dropout, rng, masks)
    active = as_active(instance)
    linear = params.w0 + float(params.w[active.indices] @ active.values)
    if spec.kind == "mahalanobis":
        return linear + second_order_mahalanobis_fast(active, params.V, params.M, params.h)
    Vs = params.V[active.indices]
    if spec.kind == "dnn":
        sub = ModelParams(0.0, None, None, None, None, params.mlp[: spec.layers])
        Vs = transform_mlp(Vs, sub, train_mode, dropout, rng, masks)
    return linear + second_order_dnn_fast(active, params.V, Vs, params.h)


# -------------------------------------------------------------- tape route
def _mlp(tape, P, X, layers, masks):
    out = X
    for l in range(1, layers + 1):
        out = tape.tanh(tape.matvec(P[f"W{l}"], out) + P[f"b{l}"])
        if masks is not None and l < layers:
            out = out * tape.constant(masks[l - 1])
    return out


def forward(tape: Tape, P, indices, values, spec, masks=None):
    """Record batched predictions, returns a ``(B,)`` node.

    ``P`` maps parameter names to tape nodes; ``indices``/``values`` are
    ``(B, m)`` arrays (zero values pad short rows exactly).  ``masks`` are
    frozen dropout masks of shape ``(B, m, k)`` for each inner layer.
    """
    indices = np.asarray(indices, dtype=np.intp)
    values = np.asarray(values, dtype=np.float64)
    B, m = indices.shape
    x = tape.constant(values)
    y = tape.sum(tape.take(P["w"], indices) * x, axis=1) + P["w0"]
    if m < 2:
        return y
    Vb = tape.take(P["V"], indices)
    T = _mlp(tape, P, Vb, spec.layers, masks) if spec.transformed else Vb

    if spec.fast_path:
        x3 = tape.constant(values[..., None])
        xv = Vb * x3
        if spec.kind == "mahalanobis":
            Z = tape.matvec(P["L"], Vb)
            q = tape.dot(Z, Z)
            right, MV = Vb, tape.matvec(tape.transpose(P["L"]), Z)
        else:
            q = tape.dot(T, T)
            right = MV = T
        qx = tape.reshape(q * x, (B, m, 1))
        first = tape.dot(tape.sum(xv, axis=1), tape.sum(Vb * qx, axis=1) * P["h"])
        S = tape.matmul(tape.transpose(xv), right)
        second = tape.sum(tape.dot(tape.matmul(xv * P["h"], S), MV), axis=1)
        return y + first - second

    iu, ju = np.triu_indices(m, 1)
    Ti, Tj = tape.take(T, iu, axis=1), tape.take(T, ju, axis=1)
    kind = spec.kind
    if kind in ("euclidean", "dnn"):
        d = Ti - Tj
        D = tape.dot(d, d)
    elif kind == "mahalanobis":
        Ld = tape.matvec(P["L"], Ti - Tj)
        D = tape.dot(Ld, Ld)
    elif kind == "manhattan":
        D = tape.sum(tape.abs(Ti - Tj), axis=-1)
    elif kind == "chebyshev":
        D = tape.max_select(tape.abs(Ti - Tj))
    elif kind == "cosine":
        norm = tape.sqrt(tape.dot(Ti, Ti)) * tape.sqrt(tape.dot(Tj, Tj))
        D = tape.dot(Ti, Tj) / (norm + COSINE_EPS)
    else:
        D = tape.dot(Ti, Tj)
    if spec.use_weight:
        Vi, Vj = tape.take(Vb, iu, axis=1), tape.take(Vb, ju, axis=1)
        D = tape.dot(Vi * P["h"], Vj) * D
    xx = tape.constant(values[:, iu] * values[:, ju])
    return y + tape.sum(D * xx, axis=1)


def predict_batch(params, indices, values, spec, chunk=4096):
    """Eval-mode predictions for ``(B, m)`` index/value arrays."""
    indices = np.asarray(indices)
    values = np.asarray(values, dtype=np.float64)
    const = params.to_dict()
    out = np.empty(len(indices))
    for start in range(0, len(indices), chunk):
        tape = Tape()
        P = {k: tape.constant(v) for k, v in const.items()}
        sl = slice(start, start + chunk)
        out[sl] = forward(tape, P, indices[sl], values[sl], spec).value
    return out
