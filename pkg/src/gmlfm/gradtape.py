"""A small reverse-mode differentiation tape over numpy arrays.

Values are float64 arrays (0-d for scalars).  Every op is evaluated eagerly
when recorded and stores a vector-Jacobian product closure; ``backward``
walks the recorded nodes once, in reverse id order, from a scalar output.

Elementwise ops follow numpy broadcasting; gradients are summed back to the
operand's shape.  That is the only broadcasting supported.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "GradientMap",
    "finite_difference_check",
    "gradient_errors",
]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""


GradientMap = dict  # parameter name -> ndarray of the parameter's shape


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    value: np.ndarray
    tape: "Tape" = field(repr=False)
    vjp: Callable | None = field(default=None, repr=False)
    name: str | None = None

    @property
    def shape(self):
        return self.value.shape

    # operator sugar; everything routes through Tape.record
    def __add__(self, other):
        return self.tape.add(self, self.tape.lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self.tape.lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self.tape.lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, self.tape.lift(other))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, self.tape.lift(other))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tape:
    """Records a computation graph.

    Leaves are created with :meth:`param` (differentiable, named) or
    :meth:`constant`.  A tape is meant to be used for one forward/backward
    pass and then discarded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # ------------------------------------------------------------------ leaves
    def _new(self, op, inputs, value, vjp=None, name=None):
        value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), value, self, vjp, name)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self._new("constant", (), np.array(value, dtype=np.float64))

    def param(self, name, value):
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        node = self._new("param", (), np.array(value, dtype=np.float64), name=name)
        self.params[name] = node
        return node

    def lift(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    # -------------------------------------------------------------- dispatch
    def record(self, op, *inputs, **attrs):
        """Record ``op`` applied to ``inputs``; the generic entry point."""
        try:
            fn = getattr(self, _OPS[op])
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        return fn(*[self.lift(x) for x in inputs], **attrs)

    # ------------------------------------------------------------------ ops
    def add(self, a, b):
        _broadcast_shape("add", a, b)
        sa, sb = a.shape, b.shape
        return self._new(
            "add", (a, b), a.value + b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b):
        _broadcast_shape("sub", a, b)
        sa, sb = a.shape, b.shape
        return self._new(
            "sub", (a, b), a.value - b.value,
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        )

    def scale(self, a, c):
        c = float(c)
        return self._new("scale", (a,), c * a.value, lambda g: (c * g,))

    def mul(self, a, b):
        _broadcast_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._new(
            "mul", (a, b), av * bv,
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def div(self, a, b):
        _broadcast_shape("div", a, b)
        av, bv = a.value, b.value
        out = av / bv
        return self._new(
            "div", (a, b), out,
            lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        )

    def dot(self, a, b):
        """Inner product over the last axis (batched over leading axes)."""
        if a.shape != b.shape or a.value.ndim == 0:
            raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.value, b.value
        return self._new(
            "dot", (a, b), np.einsum("...k,...k->...", av, bv),
            lambda g: (g[..., None] * bv, g[..., None] * av),
        )

    def matvec(self, A, v):
        """``A @ v`` for a single k x k matrix applied to every k-vector in ``v``."""
        if A.value.ndim != 2 or v.value.ndim < 1 or A.shape[1] != v.shape[-1]:
            raise ShapeError(f"matvec: incompatible shapes {A.shape} and {v.shape}")
        Av, vv = A.value, v.value

        def vjp(g):
            gA = np.tensordot(g, vv, axes=(list(range(g.ndim - 1)),) * 2)
            return gA, g @ Av

        return self._new("matvec", (A, v), vv @ Av.T, vjp)

    def matmul(self, a, b):
        """Batched matrix product with identical leading dimensions."""
        av, bv = a.value, b.value
        if (
            av.ndim < 2 or bv.ndim < 2 or av.ndim != bv.ndim
            or av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]
        ):
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return self._new(
            "matmul", (a, b), av @ bv,
            lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g),
        )

    def transpose(self, a):
        if a.value.ndim < 2:
            raise ShapeError(f"transpose: needs ndim >= 2, got {a.shape}")
        return self._new(
            "transpose", (a,), np.swapaxes(a.value, -1, -2),
            lambda g: (np.swapaxes(g, -1, -2),),
        )

    def tanh(self, a):
        out = np.tanh(a.value)
        return self._new("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))

    def square(self, a):
        av = a.value
        return self._new("square", (a,), av * av, lambda g: (2.0 * g * av,))

    def sqrt(self, a):
        out = np.sqrt(a.value)
        return self._new("sqrt", (a,), out, lambda g: (0.5 * g / out,))

    def abs(self, a):
        av = a.value
        # np.sign gives subgradient 0 at exactly 0
        return self._new("abs", (a,), np.abs(av), lambda g: (g * np.sign(av),))

    def sum(self, a, axis=None):
        av = a.value
        shape = av.shape
        if axis is None:
            return self._new("sum", (a,), av.sum(), lambda g: (np.broadcast_to(g, shape).copy(),))
        if not -av.ndim <= axis < av.ndim:
            raise ShapeError(f"sum: axis {axis} out of range for shape {shape}")
        axis = axis % av.ndim
        return self._new(
            "sum", (a,), av.sum(axis=axis),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        )

    def max_select(self, a):
        """Max over the last axis; ties route the gradient to the first maximum."""
        av = a.value
        if av.ndim == 0:
            raise ShapeError("max_select: needs ndim >= 1, got a scalar")
        arg = np.argmax(av, axis=-1)

        def vjp(g):
            out = np.zeros_like(av)
            np.put_along_axis(out, arg[..., None], g[..., None], axis=-1)
            return (out,)

        return self._new("max_select", (a,), np.take_along_axis(av, arg[..., None], -1)[..., 0], vjp)

    def take(self, a, indices, axis=0):
        """Gather along ``axis``; the gradient is a scatter-add."""
        av = a.value
        indices = np.asarray(indices, dtype=np.intp)
        if av.ndim == 0:
            raise ShapeError("take: cannot index a scalar")
        axis = axis % av.ndim
        if indices.size and (indices.min() < -av.shape[axis] or indices.max() >= av.shape[axis]):
            raise ShapeError(f"take: index out of range for axis {axis} of shape {av.shape}")

        def vjp(g):
            out = np.zeros_like(av)
            if axis == 0 and indices.ndim == 1 and av.ndim == 1:
                np.add.at(out, indices, g)
            else:
                moved_out = np.moveaxis(out, axis, 0)
                moved_g = np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                                      list(range(indices.ndim)))
                np.add.at(moved_out, indices, moved_g)
            return (out,)

        return self._new("take", (a,), np.take(av, indices, axis=axis), vjp)

    def take_rows(self, a, indices):
        """Per-batch gather: ``out[b, p] = a[b, indices[p]]`` along axis 1."""
        return self.take(a, indices, axis=1)

    def reshape(self, a, shape):
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
        return self._new("reshape", (a,), out, lambda g: (g.reshape(old),))

    # ------------------------------------------------------------- backward
    def backward(self, output):
        """Gradients of scalar ``output`` w.r.t. every named parameter leaf.

        Parameters that do not influence ``output`` are absent from the map.
        """
        if output.value.ndim != 0:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: output.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.op == "param":
                grads[node.id] = g  # keep for collection below
                continue
            if node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp in grads:
                    grads[inp] = grads[inp] + gi
                else:
                    grads[inp] = np.asarray(gi, dtype=np.float64)
        return {
            name: grads[node.id].reshape(node.shape)
            for name, node in self.params.items()
            if node.id in grads
        }


_OPS = {
    "add": "add", "sub": "sub", "scale": "scale", "mul": "mul",
    "elementwise-mul": "mul", "div": "div", "dot": "dot", "matvec": "matvec",
    "matmul": "matmul", "transpose": "transpose", "tanh": "tanh",
    "square": "square", "sqrt": "sqrt", "abs": "abs", "sum": "sum",
    "max-select": "max_select", "max_select": "max_select", "take": "take",
    "reshape": "reshape",
}


# ---------------------------------------------------------------- checking
def _evaluate(f, params):
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.items()}
    out = f(tape, leaves)
    return tape, out


def gradient_errors(f, params, step=1e-5):
    """Per-parameter worst relative error of tape gradients vs central differences.

    ``f(tape, leaves)`` must build a scalar node from the named leaves.  Any
    randomness inside ``f`` (dropout masks) has to be frozen by the caller.
    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape, out = _evaluate(f, params)
    analytic = tape.backward(out)

    def value_at(name, coord, delta):
        p = dict(params)
        arr = params[name].copy()
        arr[coord] += delta
        p[name] = arr
        val = float(_evaluate(f, p)[1].value)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite f at {name}{list(coord)} (delta={delta:g})")
        return val

    errors = {}
    for name, arr in params.items():
        ga = analytic.get(name, np.zeros_like(arr))
        worst = 0.0
        for coord in np.ndindex(arr.shape):
            num = (value_at(name, coord, step) - value_at(name, coord, -step)) / (2 * step)
            err = abs(ga[coord] - num) / max(1.0, abs(num))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_difference_check(f, params, step=1e-5):
    """Max relative error over all coordinates; see :func:`gradient_errors`."""
    errs = gradient_errors(f, params, step)
    return max(errs.values(), default=0.0)
