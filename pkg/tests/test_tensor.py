import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronoformer import tensor as T
from chronoformer.errors import ConfigError, ContractError, DimensionError, NumericError


def rand(rng, *shape, grad=True):
    return T.Tensor(rng.standard_normal(shape), requires_grad=grad)


def numeric_grad(f, x, h=1e-5):
    """Central differences of a numpy-level scalar function."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    a = T.tensor(np.eye(2))
    b = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).values, b.values)


def test_matmul_projector_selects_row():
    a = T.tensor([[1.0, 0.0], [0.0, 0.0]])
    b = T.tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).values, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    T.backward(T.sum(a @ b))
    ga = numeric_grad(lambda x: np.sum(x @ b.values), a.values.copy())
    gb = numeric_grad(lambda x: np.sum(a.values @ x), b.values.copy())
    rel = lambda u, v: np.max(np.abs(u - v) / np.maximum(np.maximum(abs(u), abs(v)), 1e-8))
    assert rel(a.grad, ga) < 1e-6
    assert rel(b.grad, gb) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(T.tensor(np.zeros((3, 4))), T.tensor(np.zeros((3, 2))))


# -- softmax --------------------------------------------------------------


@pytest.mark.parametrize(
    "row, expected",
    [
        ([1.0, 1.0], [0.5, 0.5]),
        ([0.0, math.log(3.0)], [0.25, 0.75]),
        ([1000.0, 1000.0], [0.5, 0.5]),
    ],
)
def test_softmax_rows_examples(row, expected):
    out = T.softmax_rows(T.tensor([row])).values[0]
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert np.isfinite(out).all()


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax_rows(T.tensor([[0.0, np.nan]]))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8),
        min_size=1,
        max_size=8,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_are_stochastic(rows):
    p = T.softmax_rows(T.tensor(rows)).values
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_log_softmax_agrees_with_log_of_softmax():
    x = np.random.default_rng(1).standard_normal((3, 5))
    np.testing.assert_allclose(
        T.log_softmax_rows(T.tensor(x)).values, np.log(T.softmax_rows(T.tensor(x)).values), atol=1e-14
    )


# -- layer norm -----------------------------------------------------------


def test_layer_norm_constant_column_collapses_to_bias():
    x = T.tensor(np.full((3, 2), 4.2))
    out = T.layer_norm(x, T.tensor(np.ones(3)), T.tensor(np.zeros(3)), eps=1e-5)
    np.testing.assert_array_equal(out.values, 0.0)


def test_layer_norm_standard_column_unchanged():
    x = T.tensor([[-1.0], [1.0]])
    out = T.layer_norm(x, T.tensor(np.ones(2)), T.tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.values, [[-1.0], [1.0]], atol=1e-12)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        T.layer_norm(T.tensor(np.ones((2, 2))), T.tensor(np.ones(2)), T.tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    x, g, b = rand(rng, 4, 3), rand(rng, 4), rand(rng, 4)
    w = rng.standard_normal((4, 3))
    err = T.finite_diff_check(lambda: T.sum(T.layer_norm(x, g, b, 1e-5) * w), [x, g, b])
    assert err < 1e-5


# -- activations ----------------------------------------------------------


def test_relu():
    np.testing.assert_array_equal(T.relu(T.tensor([-2.0, 0.0, 3.0])).values, [0.0, 0.0, 3.0])


def test_elu_values():
    out = T.elu(T.tensor([0.0, -1.0, 2.0])).values
    assert out[0] == 0.0
    assert out[1] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert out[1] == pytest.approx(-0.63212, abs=1e-5)
    assert out[2] == 2.0
    eps = 1e-9
    left, right = T.elu(T.tensor([-eps, eps])).values
    assert abs(left) < 2e-9 and abs(right) < 2e-9


def test_activation_unknown_kind():
    with pytest.raises(ConfigError):
        T.activation(T.tensor([1.0]), "gelu")


def test_activation_gradients():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.uniform(0.1, 2.0, (2, 5)) * rng.choice([-1, 1], (2, 5)), requires_grad=True)
    for kind in ("relu", "elu"):
        assert T.finite_diff_check(lambda: T.sum(T.activation(x, kind) * x), [x]) < 1e-6


# -- causal conv ------------------------------------------------------------


def test_causal_conv_kernel_one_identity():
    x = np.random.default_rng(4).standard_normal((3, 5))
    k = np.eye(3)[:, :, None]
    np.testing.assert_array_equal(T.causal_conv1d(T.tensor(x), T.tensor(k)).values, x)


def test_causal_conv_averaging_kernel():
    out = T.causal_conv1d(T.tensor([[0.0, 2.0, 4.0]]), T.tensor([[[0.5, 0.5]]]))
    np.testing.assert_allclose(out.values, [[0.0, 1.0, 3.0]])


def test_causal_conv_rejects_empty_kernel():
    with pytest.raises(ConfigError):
        T.causal_conv1d(T.tensor(np.ones((1, 3))), T.tensor(np.ones((1, 1, 0))))


def test_causal_conv_kernel_longer_than_sequence():
    x = T.tensor([[1.0, 2.0]])
    out = T.causal_conv1d(x, T.tensor([[[10.0, 100.0, 1.0]]]))
    np.testing.assert_allclose(out.values, [[1.0, 2.0 + 100.0]])


def brute_conv(x, k):
    d_out, d_in, ks = k.shape
    L = x.shape[1]
    out = np.zeros((d_out, L))
    for t in range(L):
        for j in range(ks):
            src = t - (ks - 1 - j)
            if src >= 0:
                out[:, t] += k[:, :, j] @ x[:, src]
    return out


def test_causal_conv_matches_brute_force_and_gradient():
    rng = np.random.default_rng(5)
    x, k = rand(rng, 3, 7), rand(rng, 2, 3, 3)
    np.testing.assert_allclose(T.causal_conv1d(x, k).values, brute_conv(x.values, k.values), atol=1e-13)
    w = rng.standard_normal((2, 7))
    assert T.finite_diff_check(lambda: T.sum(T.causal_conv1d(x, k) * w), [x, k]) < 1e-6


def test_causal_conv_batched_gradient():
    rng = np.random.default_rng(6)
    x, k = rand(rng, 2, 3, 5), rand(rng, 4, 3, 2)
    w = rng.standard_normal((2, 4, 5))
    assert T.finite_diff_check(lambda: T.sum(T.causal_conv1d(x, k) * w), [x, k]) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(0, 8), st.integers(0, 2**31))
def test_causal_conv_future_perturbation_leaves_past_bit_identical(k, L, t, seed):
    t = t % L
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, L))
    kern = T.tensor(rng.standard_normal((3, 2, k)))
    base = T.causal_conv1d(T.tensor(x), kern).values
    x2 = x.copy()
    x2[:, t:] += rng.standard_normal((2, L - t))
    out = T.causal_conv1d(T.tensor(x2), kern).values
    assert out[:, :t].tobytes() == base[:, :t].tobytes()


# -- max pool ---------------------------------------------------------------


def test_maxpool_examples():
    np.testing.assert_array_equal(T.maxpool1d_stride2(T.tensor([[1.0, 5.0, 2.0, 4.0]])).values, [[5.0, 5.0]])
    np.testing.assert_array_equal(T.maxpool1d_stride2(T.tensor([[7.0]])).values, [[7.0]])


def brute_pool(x):
    L = len(x)
    out = []
    for c in range(0, L, 2):
        out.append(max(x[j] for j in (c - 1, c, c + 1) if 0 <= j < L))
    return out


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=17))
def test_maxpool_matches_window_enumeration(xs):
    out = T.maxpool1d_stride2(T.tensor([xs])).values[0]
    assert len(out) == math.ceil(len(xs) / 2)
    np.testing.assert_array_equal(out, brute_pool(xs))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=17))
def test_maxpool_preserves_monotonicity(xs):
    out = T.maxpool1d_stride2(T.tensor([sorted(xs)])).values[0]
    assert (np.diff(out) >= 0).all()


def test_maxpool_gradient():
    rng = np.random.default_rng(7)
    x = rand(rng, 2, 3, 9)
    w = rng.standard_normal((2, 3, 5))
    assert T.finite_diff_check(lambda: T.sum(T.maxpool1d_stride2(x) * w), [x]) < 1e-6


# -- backward ---------------------------------------------------------------


def test_backward_square():
    x = T.Tensor([3.0], requires_grad=True)
    T.backward(T.sum(x * x))
    assert x.grad[0] == 6.0


def test_backward_fan_out_accumulates():
    x = T.Tensor([1.5], requires_grad=True)
    T.backward(T.sum(x + x))
    assert x.grad[0] == 2.0


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * x)


def test_backward_releases_record():
    x = T.Tensor([[1.0, 2.0]], requires_grad=True)
    y = T.sum(T.softmax_rows(x))
    T.backward(y)
    assert y._parents == () and y._backward is None


def test_take_gradient_hits_only_selected_rows():
    table = T.Tensor(np.random.default_rng(8).standard_normal((5, 3)), requires_grad=True)
    T.backward(T.sum(T.take(table, [1, 3, 1], axis=0)))
    np.testing.assert_array_equal(table.grad[[0, 2, 4]], 0.0)
    np.testing.assert_array_equal(table.grad[1], 2.0)
    np.testing.assert_array_equal(table.grad[3], 1.0)


def test_concat_reshape_index_gradients():
    rng = np.random.default_rng(9)
    a, b = rand(rng, 2, 3), rand(rng, 2, 2)
    w = rng.standard_normal((5, 2))

    def f():
        c = T.concat([a, b], axis=-1)
        r = T.reshape(c, (5, 2))
        return T.sum(r * w) + T.sum(T.index(a, (slice(None), 1)))

    assert T.finite_diff_check(f, [a, b]) < 1e-6


# -- finite difference oracle ----------------------------------------------------


def test_finite_diff_linear_is_exact():
    rng = np.random.default_rng(10)
    x = rand(rng, 3, 3)
    w = rng.standard_normal((3, 3))
    assert T.finite_diff_check(lambda: T.sum(x * w), [x]) < 1e-10


def test_finite_diff_sine_numeric_derivative():
    x = 1.0
    h = 1e-5
    numeric = (math.sin(x + h) - math.sin(x - h)) / (2 * h)
    assert numeric == pytest.approx(math.cos(1.0), abs=1e-9)
    assert numeric == pytest.approx(0.5403, abs=1e-4)


def test_finite_diff_softmax_attention_composite():
    rng = np.random.default_rng(11)
    q, k, v = rand(rng, 3, 4), rand(rng, 3, 4), rand(rng, 2, 4)

    def f():
        a = T.softmax_rows(T.scale(T.transpose(q) @ k, 1 / math.sqrt(3)))
        z = v @ T.transpose(a)
        return T.sum(z * z)

    assert T.finite_diff_check(f, [q, k, v], step=1e-5) < 1e-4


def test_finite_diff_rejects_nondeterministic_function():
    x = T.Tensor([1.0], requires_grad=True)
    rng = np.random.default_rng()
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda: T.sum(x * rng.standard_normal(1)), [x])


def test_determinism_of_ops():
    def run():
        rng = np.random.default_rng(12)
        x, k = rand(rng, 3, 6), rand(rng, 3, 3, 3)
        return T.maxpool1d_stride2(T.elu(T.causal_conv1d(x, k))).values

    assert run().tobytes() == run().tobytes()
