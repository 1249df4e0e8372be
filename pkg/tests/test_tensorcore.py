import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flare import tensorcore as tc
from flare.tensorcore import Matrix


def leaf(a, name="x"):
    return Matrix(a, trainable=True, name=name)


def rand(rng, *shape):
    return rng.standard_normal(shape)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# --- values ------------------------------------------------------------------

def test_scalar_and_vector_lift_to_2d():
    assert Matrix(3.0).shape == (1, 1)
    assert Matrix([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(tc.ShapeError):
        Matrix(np.zeros((2, 2, 2)))


def test_values_are_read_only():
    m = Matrix(np.eye(2))
    with pytest.raises(ValueError):
        m.value[0, 0] = 5.0


def test_forward_values_match_numpy():
    rng = np.random.default_rng(0)
    A, B = rand(rng, 3, 4), rand(rng, 4, 2)
    a, b = Matrix(A), Matrix(B)
    np.testing.assert_allclose((a @ b).value, A @ B)
    np.testing.assert_allclose(a.T.value, A.T)
    np.testing.assert_allclose(tc.relu(a).value, np.maximum(A, 0))
    s = tc.softmax_rows(a).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tc.sq_dists(a, a).value,
                               ((A[:, None] - A[None]) ** 2).sum(-1), atol=1e-12)
    assert tc.trace(Matrix(np.diag([1.0, 2.0]))).item() == 3.0
    assert tc.mean(a).item() == pytest.approx(A.mean())


def test_shape_errors_name_primitive_and_shapes():
    with pytest.raises(tc.ShapeError) as exc:
        Matrix(np.zeros((2, 3))) @ Matrix(np.zeros((2, 3)))
    assert exc.value.primitive == "matmul"
    assert exc.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(tc.ShapeError):
        tc.add(Matrix(np.zeros((2, 2))), Matrix(np.zeros((2, 3))))
    with pytest.raises(tc.ShapeError):
        tc.add_row(Matrix(np.zeros((2, 2))), Matrix(np.zeros((2, 2))))


def test_log_rejects_nonpositive():
    with pytest.raises(FloatingPointError):
        tc.log(Matrix([[0.0, 1.0]]))


def test_nonfinite_output_raises():
    with pytest.raises(FloatingPointError):
        tc.exp(Matrix([[1e4]]))


# --- regularized inverse --------------------------------------------------------

def test_regularized_inverse_value():
    rng = np.random.default_rng(1)
    X = rand(rng, 5, 3)
    K = X @ X.T
    inv = tc.regularized_inverse(Matrix(K), 0.1).value
    np.testing.assert_allclose(inv @ (K + 0.1 * np.eye(5)), np.eye(5), atol=1e-10)


def test_regularized_inverse_reports_failing_minor():
    K = np.diag([1.0, -5.0, 1.0])
    with pytest.raises(tc.SingularMatrixError) as exc:
        tc.regularized_inverse(Matrix(K), 1e-3)
    assert exc.value.minor == 2


def test_regularized_inverse_rejects_asymmetric():
    with pytest.raises(tc.ContractError):
        tc.regularized_inverse(Matrix([[1.0, 0.5], [0.0, 1.0]]), 1e-3)


# --- normalization guard ---------------------------------------------------------

def test_l2_normalize_rows_unit_norm_and_guard():
    X = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = tc.l2_normalize_rows(Matrix(X))
    np.testing.assert_allclose(out.value, [[0.6, 0.8], [1.0, 0.0]])
    assert out.guarded == 1


def test_guarded_row_gets_no_gradient():
    x = leaf(np.array([[0.0, 0.0], [1.0, 2.0]]))
    g = tc.backward(tc.sum(tc.l2_normalize_rows(x)))[x]
    np.testing.assert_array_equal(g[0], 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_normalized_rows_are_unit_length(X):
    X = X + np.array([[1e-3, 0, 0]])  # keep rows away from the guard
    out = tc.l2_normalize_rows(Matrix(X)).value
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


# --- backward --------------------------------------------------------------------

def test_backward_needs_scalar():
    with pytest.raises(tc.ContractError):
        tc.backward(leaf(np.ones((2, 2))))


def test_backward_sum_of_squares():
    W = leaf(np.array([[1.0, -2.0], [3.0, 0.5]]))
    g = tc.backward(tc.sum(tc.square(W)))
    np.testing.assert_allclose(g[W], 2 * W.value)


def test_gradient_accumulates_over_reuse():
    x = leaf(np.array([[2.0]]))
    g = tc.backward(x * x + x)[x]
    assert g[0, 0] == pytest.approx(5.0)


def test_constants_get_no_entry_and_grad_fills_zeros():
    x = leaf(np.ones((1, 2)), "x")
    unused = leaf(np.ones((3, 3)), "u")
    c = Matrix(np.ones((2, 1)))
    loss = x @ c
    assert c not in tc.backward(loss)
    g = tc.grad(loss, {"x": x, "u": unused})
    np.testing.assert_array_equal(g["u"], np.zeros((3, 3)))


def test_relu_subgradient_zero_at_kink():
    x = leaf(np.array([[0.0, 1.0, -1.0]]))
    g = tc.backward(tc.sum(tc.relu(x)))[x]
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])


PRIMITIVE_LOSSES = {
    "matmul": lambda p: tc.sum(p["a"] @ p["b"]),
    "transpose": lambda p: tc.sum(tc.square(p["a"].T @ p["a"])),
    "mul_sub": lambda p: tc.sum(tc.mul(p["a"] - p["a"], p["a"]) + tc.square(p["a"])),
    "add_row": lambda p: tc.sum(tc.square(tc.add_row(p["a"], p["r"]))),
    "softmax_log": lambda p: tc.sum(tc.log(tc.softmax_rows(p["a"]))),
    "exp_scale": lambda p: tc.mean(tc.exp(tc.scale(p["a"], 0.3))),
    "l2n": lambda p: tc.sum(tc.mul(tc.l2_normalize_rows(p["a"]), Matrix(np.arange(12.0).reshape(3, 4)))),
    "sq_dists": lambda p: tc.sum(tc.sq_dists(p["a"], p["b"].T)),
    "trace_inv": lambda p: tc.trace(tc.regularized_inverse(p["a"] @ p["a"].T, 0.5)),
    "relu": lambda p: tc.sum(tc.square(tc.relu(p["a"]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_LOSSES))
def test_primitive_adjoints_match_finite_differences(name):
    rng = np.random.default_rng(7)
    params = {"a": rand(rng, 3, 4), "b": rand(rng, 4, 3), "r": rand(rng, 1, 4)}
    rep = tc.grad_check(PRIMITIVE_LOSSES[name], params)
    assert rep.passed, rep


def test_grad_check_catches_wrong_adjoint(monkeypatch):
    original = tc.ADJOINTS["square"]
    monkeypatch.setitem(tc.ADJOINTS, "square",
                        lambda g, n, need: tuple(x * 1.5 for x in original(g, n, need)))
    rep = tc.grad_check(lambda p: tc.sum(tc.square(p["a"])), {"a": np.ones((2, 2))})
    assert not rep.passed
    assert rep.worst_param == "a"


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_matmul_gradient_closed_form(A, B):
    a, b = leaf(A, "a"), leaf(B, "b")
    g = tc.backward(tc.sum(a @ b))
    np.testing.assert_allclose(g[a], np.ones((3, 3)) @ B.T, atol=1e-12)
    np.testing.assert_allclose(g[b], A.T @ np.ones((3, 3)), atol=1e-12)


def test_graph_is_topologically_ordered():
    x = leaf(np.ones((2, 2)))
    y = tc.relu(x @ x)
    graph = tc.Graph.from_output(tc.sum(y))
    pos = {n.id: i for i, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for inp in n.inputs:
            assert pos[inp.id] < pos[n.id]
    assert graph.parameters == [x]
