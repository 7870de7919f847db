import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmlfm.gradtape import ShapeError, Tape, finite_difference_check, gradient_errors


def test_record_examples():
    t = Tape()
    assert t.record("add", 2.0, 3.0).value == 5
    assert t.record("tanh", 0.0).value == 0
    assert t.record("dot", np.array([1.0, 2.0]), np.array([3.0, 4.0])).value == 11


def test_shape_mismatch_names_op_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError, match=r"dot.*\(2,\).*\(3,\)"):
        t.dot(t.constant(np.ones(2)), t.constant(np.ones(3)))
    with pytest.raises(ShapeError, match="matvec"):
        t.matvec(t.constant(np.ones((2, 3))), t.constant(np.ones(2)))
    with pytest.raises(ShapeError, match="add"):
        t.add(t.constant(np.ones(2)), t.constant(np.ones(3)))


def test_unknown_op():
    with pytest.raises(ValueError, match="unknown op"):
        Tape().record("conv", 1.0)


def test_linear_gradient():
    a = np.array([1.0, -2.0, 3.0])
    t = Tape()
    th = t.param("theta", np.array([0.3, 0.1, -0.7]))
    g = t.backward(t.dot(t.constant(a), th))
    np.testing.assert_array_equal(g["theta"], a)


def test_constant_function_has_no_gradient():
    t = Tape()
    t.param("theta", np.ones(3))
    out = t.sum(t.constant(np.arange(3.0)))
    assert t.backward(out).get("theta") is None


def test_backward_rejects_vector_output():
    t = Tape()
    x = t.param("x", np.ones(2))
    with pytest.raises(ValueError, match="scalar"):
        t.backward(x * 2.0)


def test_fd_check_quadratic():
    def f(tape, p):
        return tape.square(p["theta"])

    assert finite_difference_check(f, {"theta": np.array(3.0)}, 1e-5) <= 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_reports_non_finite():
    def f(tape, p):
        return tape.sqrt(p["x"])

    with pytest.raises(FloatingPointError, match=r"x\[\]"):
        finite_difference_check(f, {"x": np.array(0.0)}, 1e-5)


def test_diamond_graph_sums_paths():
    t = Tape()
    x = t.param("x", np.array(1.5))
    a = t.tanh(x)
    b = t.square(x)
    y = a * b + x
    g = t.backward(y)["x"]
    expected = (1 - np.tanh(1.5) ** 2) * 1.5**2 + np.tanh(1.5) * 3.0 + 1.0
    assert g == pytest.approx(expected, rel=1e-14)


def test_each_node_visited_once():
    t = Tape()
    x = t.param("x", np.array([0.2, -0.4]))
    y = t.tanh(x)
    z = t.sum(y * y + y)
    calls = {}
    for node in t.nodes:
        if node.vjp is not None:
            fn = node.vjp

            def wrapped(g, _fn=fn, _id=node.id):
                calls[_id] = calls.get(_id, 0) + 1
                return _fn(g)

            node.vjp = wrapped
    t.backward(z)
    assert calls and all(c == 1 for c in calls.values())


def test_graph_is_topologically_ordered():
    t = Tape()
    x = t.param("x", np.ones(3))
    t.sum(t.tanh(x) * x)
    for node in t.nodes:
        assert all(i < node.id for i in node.inputs)


def test_gradient_linearity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x0 = rng.uniform(-2, 2, size=4)
        A = rng.uniform(-1, 1, size=(4, 4))

        def f(tape, p):
            return tape.sum(tape.tanh(tape.matvec(tape.constant(A), p["x"])))

        def g(tape, p):
            return tape.sum(tape.square(p["x"]) * p["x"])

        def both(tape, p):
            return f(tape, p) + g(tape, p)

        grads = []
        for fn in (f, g, both):
            t = Tape()
            leaves = {"x": t.param("x", x0)}
            grads.append(t.backward(fn(t, leaves))["x"])
        np.testing.assert_allclose(grads[0] + grads[1], grads[2], rtol=1e-12, atol=1e-14)


# each op as a scalar function of its random inputs, for vjp-vs-fd checks
UNARY = {
    "tanh": lambda t, a: t.sum(t.tanh(a)),
    "square": lambda t, a: t.sum(t.square(a)),
    "abs": lambda t, a: t.sum(t.abs(a)),
    "sqrt": lambda t, a: t.sum(t.sqrt(t.abs(a) + 0.5)),
    "sum_axis": lambda t, a: t.sum(t.square(t.sum(a, axis=0))),
    "max_select": lambda t, a: t.sum(t.max_select(a)),
    "scale": lambda t, a: t.sum(t.scale(a, -1.7)),
    "transpose": lambda t, a: t.sum(t.transpose(a) * t.constant(np.arange(9.0).reshape(3, 3))),
    "take": lambda t, a: t.sum(t.square(t.take(a, np.array([[0, 2], [2, 2]]), axis=0))),
    "take_axis1": lambda t, a: t.sum(t.square(t.take(a, np.array([1, 0, 1]), axis=1))),
    "reshape": lambda t, a: t.sum(t.reshape(a, (9,)) * t.constant(np.arange(9.0))),
}
BINARY = {
    "add": lambda t, a, b: t.sum(t.square(a + b)),
    "sub": lambda t, a, b: t.sum(t.square(a - b)),
    "mul": lambda t, a, b: t.sum(a * b * a),
    "div": lambda t, a, b: t.sum(a / (t.square(b) + 1.0)),
    "dot": lambda t, a, b: t.sum(t.square(t.dot(a, b))),
    "matvec": lambda t, a, b: t.sum(t.square(t.matvec(a, b))),
    "matmul": lambda t, a, b: t.sum(t.square(t.matmul(a, b))),
    "broadcast_mul": lambda t, a, b: t.sum(a * t.take(b, np.array(0), axis=0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_unary_vjp_matches_fd(name, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, size=(3, 3))
    err = finite_difference_check(lambda t, p: UNARY[name](t, p["a"]), {"a": a}, 1e-6)
    assert err <= 1e-6


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(5))
def test_binary_vjp_matches_fd(name, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, size=(3, 3))
    b = rng.uniform(-2, 2, size=(3, 3))
    errs = gradient_errors(lambda t, p: BINARY[name](t, p["a"], p["b"]), {"a": a, "b": b}, 1e-6)
    assert max(errs.values()) <= 1e-6


def test_batched_matvec_and_broadcast_add():
    rng = np.random.default_rng(3)
    A = rng.uniform(-2, 2, size=(3, 3))
    X = rng.uniform(-2, 2, size=(2, 4, 3))
    b = rng.uniform(-2, 2, size=3)

    def f(t, p):
        return t.sum(t.tanh(t.matvec(p["A"], p["X"]) + p["b"]))

    assert finite_difference_check(f, {"A": A, "X": X, "b": b}, 1e-6) <= 1e-6


def test_abs_subgradient_zero_and_max_tie_first():
    t = Tape()
    x = t.param("x", np.array([0.0, 2.0, 2.0]))
    g = t.backward(t.sum(t.abs(x)) + t.max_select(x))["x"]
    np.testing.assert_array_equal(g, [0.0, 2.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=6))
def test_tanh_derivative_from_cached_value(xs):
    x = np.array(xs)
    t = Tape()
    p = t.param("x", x)
    g = t.backward(t.sum(t.tanh(p)))["x"]
    np.testing.assert_allclose(g, 1 - np.tanh(x) ** 2, rtol=1e-12)
