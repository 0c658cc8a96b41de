import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcvit import numerics as nx
from dcvit.numerics import GradTape, Tensor, backward, finite_diff_grad, relative_error


def naive_matmul(A, B):
    m, k = A.shape
    _, n = B.shape
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                C[i, j] += A[i, t] * B[t, j]
    return C


def grad_of(f, *xs):
    with GradTape() as tape:
        out = f(*xs)
    g = backward(tape, out)
    return [g[x] for x in xs]


def check_grad(f, x, tol=1e-4):
    analytic = grad_of(f, x)[0]
    numeric = finite_diff_grad(f, x, 1e-5)
    assert relative_error(analytic, numeric) < tol


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    A = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), A).data, A.data)


def test_matmul_hand():
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(nx.matmul(Tensor(A), Tensor(B)).data, naive_matmul(A, B), atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    A, B, C = (Tensor(rng.standard_normal(s)) for s in ((4, 5), (5, 6), (6, 3)))
    np.testing.assert_allclose(((A @ B) @ C).data, (A @ (B @ C)).data, atol=1e-9)


def test_matmul_backward_sum():
    rng = np.random.default_rng(2)
    A, B = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))
    gA, gB = grad_of(lambda a, b: nx.sum(a @ b), A, B)
    np.testing.assert_allclose(gA, np.ones((3, 2)) @ B.data.T)
    np.testing.assert_allclose(gB, A.data.T @ np.ones((3, 2)))


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


def test_softmax_closed_form():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[np.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]])


def test_softmax_large_logits():
    np.testing.assert_array_equal(nx.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_masked_softmax_matches_subproblem():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5))
    mask = np.array([True, False, True, True, False])
    full = nx.softmax(Tensor(x), mask=mask).data
    np.testing.assert_allclose(full[:, mask], nx.softmax(Tensor(x[:, mask])).data, atol=1e-15)
    assert (full[:, ~mask] == 0).all()


# --- layer norm / gelu / linear ----------------------------------------------


def test_layer_norm_constant_vector():
    out = nx.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-6)
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_layer_norm_zero_gamma():
    rng = np.random.default_rng(4)
    out = nx.layer_norm(Tensor(rng.standard_normal(5)), Tensor(np.zeros(5)), Tensor(np.full(5, 2.5)))
    np.testing.assert_array_equal(out.data, np.full(5, 2.5))


def test_layer_norm_statistics():
    rng = np.random.default_rng(5)
    out = nx.layer_norm(Tensor(rng.standard_normal(64) * 3 + 1), Tensor(np.ones(64)), Tensor(np.zeros(64)), 1e-6).data
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1) < 1e-4


def test_layer_norm_dim_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.layer_norm(Tensor(np.ones(4)), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_gelu_values():
    assert nx.gelu(Tensor(0.0)).data == 0.0
    # x * Phi(x) at 1 with Phi from the error function
    from math import erf, sqrt

    np.testing.assert_allclose(nx.gelu(Tensor(1.0)).data, 1.0 * 0.5 * (1 + erf(1 / sqrt(2))), rtol=1e-12)
    np.testing.assert_allclose(nx.gelu(Tensor(1.0)).data, 0.8413447, atol=1e-7)
    np.testing.assert_allclose(nx.gelu(Tensor(30.0)).data, 30.0)
    assert abs(nx.gelu(Tensor(-30.0)).data) < 1e-100


def test_gelu_grad_at_zero():
    g = grad_of(lambda x: nx.gelu(x), Tensor(0.0))[0]
    assert g == pytest.approx(0.5)


def test_linear_identity_and_bias():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(nx.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)
    b = Tensor(rng.standard_normal(2))
    out = nx.linear(Tensor(np.zeros((3, 4))), Tensor(rng.standard_normal((4, 2))), b)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b.data, (3, 2)))


def test_linear_vs_matmul_oracle():
    rng = np.random.default_rng(7)
    x, W, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(nx.linear(Tensor(x), Tensor(W), Tensor(b)).data, naive_matmul(x, W) + b, atol=1e-12)


def test_linear_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


# --- finite differences -------------------------------------------------------


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: x * x, Tensor(3.0), 1e-5)
    assert abs(g.data - 6.0) < 1e-6


def test_finite_diff_constant():
    g = finite_diff_grad(lambda x: 4.0, Tensor(np.ones(3)), 1e-5)
    np.testing.assert_array_equal(g.data, np.zeros(3))


def test_finite_diff_softmax_sum():
    rng = np.random.default_rng(8)
    g = finite_diff_grad(lambda x: nx.sum(nx.softmax(x)), Tensor(rng.standard_normal(4)), 1e-5)
    np.testing.assert_allclose(g.data, 0.0, atol=1e-9)


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(nx.NonFiniteError):
        finite_diff_grad(lambda x: float("inf"), Tensor(np.ones(1)))


# --- tape ----------------------------------------------------------------------


def test_tape_empty_when_disabled():
    tape = GradTape(enabled=False)
    with tape:
        nx.gelu(Tensor(np.ones(3)))
    assert len(tape) == 0


def test_tape_records_inside_context_only():
    with GradTape() as tape:
        nx.gelu(Tensor(np.ones(3)))
    nx.gelu(Tensor(np.ones(3)))
    assert len(tape) == 1


def test_backward_seed_shape_mismatch():
    x = Tensor(np.ones(3))
    with GradTape() as tape:
        y = nx.gelu(x)
    with pytest.raises(nx.ShapeError):
        backward(tape, y, np.ones(4))


def test_nonfinite_is_an_error():
    with pytest.raises(nx.NonFiniteError), np.errstate(divide="ignore"):
        nx.div(Tensor(1.0), Tensor(0.0))


RNG = np.random.default_rng(9)
W4 = Tensor(RNG.standard_normal((4, 4)))
G4, B4 = Tensor(RNG.standard_normal(4)), Tensor(RNG.standard_normal(4))

PRIMITIVES = {
    "add": lambda x: nx.sum(nx.add(x, W4) * W4),
    "sub": lambda x: nx.sum(nx.sub(W4, x) * W4),
    "mul": lambda x: nx.sum(nx.mul(x, x)),
    "div": lambda x: nx.sum(nx.div(W4, x * x + 1.0)),
    "neg": lambda x: nx.sum(nx.neg(x) * W4),
    "matmul": lambda x: nx.sum(nx.matmul(x, W4) * W4),
    "linear": lambda x: nx.sum(nx.linear(x, W4, G4) * W4),
    "softmax": lambda x: nx.sum(nx.softmax(x) * W4),
    "masked_softmax": lambda x: nx.sum(nx.softmax(x, mask=np.array([1, 0, 1, 1], bool)) * W4),
    "layer_norm": lambda x: nx.sum(nx.layer_norm(x, G4, B4) * W4),
    "gelu": lambda x: nx.sum(nx.gelu(x) * W4),
    "tanh": lambda x: nx.sum(nx.tanh(x) * W4),
    "reshape": lambda x: nx.sum(nx.reshape(x, (2, 8)) * W4.data.reshape(2, 8)),
    "transpose": lambda x: nx.sum(nx.transpose(x) * W4),
    "mean": lambda x: nx.sum(nx.mean(x, axis=0) * G4),
    "amax": lambda x: nx.sum(nx.amax(x, axis=1) * G4),
    "getitem": lambda x: nx.sum(x[1:3] * x[0:2]),
    "take": lambda x: nx.sum(nx.take(x, [0, 2, 2]) * x[1:4]),
    "concat": lambda x: nx.sum(nx.concat([x, x * x], axis=0) * nx.concat([W4, W4], axis=0)),
    "broadcast_to": lambda x: nx.sum(nx.broadcast_to(x[0:1], (3, 4)) * x[1:4]),
    "cross_entropy": lambda x: nx.cross_entropy(x, [0, 3, 1, 1]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    x = Tensor(np.random.default_rng(10).standard_normal((4, 4)))
    check_grad(PRIMITIVES[name], x)


def _compose(seed):
    rng = np.random.default_rng(seed)
    W1, W2 = Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal((6, 5)))
    g, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))

    def f(x):
        h = nx.gelu(nx.linear(x, W1, b))
        h = nx.layer_norm(h, g, b)
        h = nx.softmax(nx.matmul(h, W2))
        return nx.sum(nx.tanh(h * x))

    return f


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_deep_composition_gradients(seed):
    x = Tensor(np.random.default_rng(100 + seed).standard_normal((3, 5)))
    check_grad(_compose(seed), x)


def test_pure_bit_identical():
    x = Tensor(np.random.default_rng(11).standard_normal((3, 5)))
    f = _compose(0)
    assert f(x).data.tobytes() == f(x).data.tobytes()
