"""Numerical self-checks: fast-vs-pairwise equivalence and gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import to_arrays
from .gradtape import gradient_errors
from .model import (
    DistanceSpec,
    ModelParams,
    active_param_names,
    forward,
    second_order_dnn_fast,
    second_order_mahalanobis_fast,
    transform_mlp,
)

DEFAULT_KS = (4, 8, 16)
DEFAULT_MS = tuple(range(2, 9))
ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4


def pairwise_second_order(V, T, x, h, L=None):
    """Direct weighted double sum over pairs, vectorised over a leading trial axis.

    ``V``/``T`` are ``(trials, m, k)`` raw and transformed embeddings, ``x``
    is ``(trials, m)``.  With ``L`` the distance is Mahalanobis on ``V``,
    otherwise squared Euclidean on ``T``.
    """
    m = V.shape[1]
    iu, ju = np.triu_indices(m, 1)
    w = np.einsum("tpk,tk,tpk->tp", V[:, iu], h, V[:, ju])
    if L is None:
        d = T[:, iu] - T[:, ju]
    else:
        d = np.einsum("tab,tpb->tpa", L, V[:, iu] - V[:, ju])
    D = np.einsum("tpk,tpk->tp", d, d)
    return np.sum(w * D * x[:, iu] * x[:, ju], axis=1)


@dataclass
class OracleCell:
    kind: str
    layers: int
    k: int
    m: int
    trials: int
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error <= ORACLE_TOL


@dataclass
class OracleReport:
    cells: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.cells)

    @property
    def max_rel_error(self):
        return max((c.max_rel_error for c in self.cells), default=0.0)

    def to_text(self):
        lines = ["kind\tlayers\tk\tm\ttrials\tmax_rel_error\tstatus"]
        for c in self.cells:
            lines.append(f"{c.kind}\t{c.layers}\t{c.k}\t{c.m}\t{c.trials}\t{c.max_rel_error:.3e}\t"
                         f"{'ok' if c.passed else 'FAIL'}")
        lines.append(f"overall\t{'PASS' if self.passed else 'FAIL'}\tmax={self.max_rel_error:.3e}")
        return "\n".join(lines) + "\n"


def oracle_check(ks=DEFAULT_KS, ms=DEFAULT_MS, trials=1000, seed=0, layer_counts=(1, 2, 3),
                 mahalanobis_fast=second_order_mahalanobis_fast, dnn_fast=second_order_dnn_fast):
    """Compare the linear-time second-order forms against the pairwise sum.

    Every entry is drawn from U[-1, 1].  The fast functions can be swapped
    out to confirm the checker notices a broken implementation.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    report = OracleReport()
    configs = [("mahalanobis", 0)] + [("dnn", l) for l in layer_counts]
    for kind, layers in configs:
        for k in ks:
            for m in ms:
                U = lambda *s: rng.uniform(-1.0, 1.0, size=s)  # noqa: E731
                V, x, h = U(trials, m, k), U(trials, m), U(trials, k)
                idx = np.arange(m)
                fast = np.empty(trials)
                if kind == "mahalanobis":
                    L = U(trials, k, k)
                    naive = pairwise_second_order(V, V, x, h, L)
                    for t in range(trials):
                        fast[t] = mahalanobis_fast((idx, x[t]), V[t], L[t].T @ L[t], h[t])
                else:
                    Ws = [(U(trials, k, k), U(trials, k)) for _ in range(layers)]
                    T = np.empty_like(V)
                    for t in range(trials):
                        p = ModelParams(0.0, None, None, None, None, [(W[t], b[t]) for W, b in Ws])
                        T[t] = transform_mlp(V[t], p)
                        fast[t] = dnn_fast((idx, x[t]), V[t], T[t], h[t])
                    naive = pairwise_second_order(V, T, x, h)
                err = np.abs(fast - naive) / np.maximum(1.0, np.abs(naive))
                report.cells.append(OracleCell(kind, layers, k, m, trials, float(err.max())))
    return report


# ------------------------------------------------------------------ gradients
GRADCHECK_SPECS = (
    DistanceSpec("inner", False, 0),
    DistanceSpec("euclidean", True, 0),
    DistanceSpec("euclidean", False, 0),
    DistanceSpec("mahalanobis", True, 0),
    DistanceSpec("mahalanobis", False, 0),
    DistanceSpec("dnn", True, 1),
    DistanceSpec("dnn", True, 2),
    DistanceSpec("dnn", True, 3),
    DistanceSpec("dnn", False, 2),
    DistanceSpec("manhattan", True, 0),
    DistanceSpec("manhattan", True, 1),
    DistanceSpec("chebyshev", True, 0),
    DistanceSpec("chebyshev", True, 1),
    DistanceSpec("cosine", True, 0),
    DistanceSpec("cosine", True, 1),
)


def random_params(n, k, layers, rng, scale=0.5):
    U = lambda *s: rng.uniform(-scale, scale, size=s)  # noqa: E731
    return ModelParams(float(U()), U(n), U(n, k), U(k), U(k, k), [(U(k, k), U(k)) for _ in range(layers)])


def random_batch(n_fields, card, batch, rng):
    """One-hot style rows (one index per field) with real values and labels."""
    offs = np.arange(n_fields) * card
    idx = offs + rng.integers(card, size=(batch, n_fields))
    val = rng.uniform(0.5, 1.5, size=(batch, n_fields))
    lab = rng.choice([-1.0, 1.0], size=batch)
    return idx, val, lab


def loss_function(spec, indices, values, labels):
    """Squared loss as a function of named tape leaves (dropout off)."""

    def f(tape, leaves):
        pred = forward(tape, leaves, indices, values, spec)
        return tape.sum(tape.square(pred - labels))

    return f


def gradcheck(specs=GRADCHECK_SPECS, seed=0, n_fields=3, card=3, k=4, batch=2, step=1e-5):
    """Worst relative gradient error per parameter group for each spec."""
    rng = np.random.default_rng(seed)
    results = []
    for spec in specs:
        params = random_params(n_fields * card, k, spec.layers, rng)
        idx, val, lab = random_batch(n_fields, card, batch, rng)
        names = active_param_names(spec, params)
        full = params.to_dict()
        active = {k_: full[k_] for k_ in names}
        frozen = {k_: v for k_, v in full.items() if k_ not in names}

        def f(tape, leaves, _spec=spec, _frozen=frozen, _i=idx, _v=val, _l=lab):
            P = dict(leaves)
            P.update({k_: tape.constant(v) for k_, v in _frozen.items()})
            return loss_function(_spec, _i, _v, _l)(tape, P)

        results.append((spec, gradient_errors(f, active, step)))
    return results


def gradcheck_report(results, tol=GRAD_TOL):
    lines = ["spec\tgroup\tmax_rel_error\tstatus"]
    ok = True
    for spec, errs in results:
        for name, e in errs.items():
            good = e <= tol
            ok &= good
            lines.append(f"{spec.label()}\t{name}\t{e:.3e}\t{'ok' if good else 'FAIL'}")
    lines.append(f"overall\t{'PASS' if ok else 'FAIL'}")
    return ok, "\n".join(lines) + "\n"


__all__ = ["oracle_check", "gradcheck", "gradcheck_report", "pairwise_second_order", "to_arrays"]
