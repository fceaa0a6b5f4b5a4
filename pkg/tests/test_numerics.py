import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynpl import numerics as nx


def loop_conv(X, W, b, activation="tanh"):
    """Nested-loop reference for a right-padded width-k convolution in column layout."""
    d_e, N = X.shape
    d_f, k, _ = W.shape
    out = np.zeros((d_f, N))
    for t in range(N):
        for f in range(d_f):
            z = b[f]
            for j in range(k):
                if t + j < N:
                    for e in range(d_e):
                        z += W[f, j, e] * X[e, t + j]
            out[f, t] = math.tanh(z) if activation == "tanh" else z
    return out


# --------------------------------------------------------------------------
# softmax


def test_softmax_zeros_uniform():
    np.testing.assert_allclose(nx.softmax(np.zeros(4)), [0.25] * 4, atol=0)


def test_softmax_formula_oracle():
    v = np.array([1.0, 2.0, 3.0])
    e = np.exp(v)
    np.testing.assert_allclose(nx.softmax(v), e / e.sum(), rtol=0, atol=1e-12)


def test_softmax_all_masked_raises():
    with pytest.raises(ValueError):
        nx.softmax(np.ones(3), np.zeros(3, dtype=bool))


def test_softmax_large_values_stable():
    p = nx.softmax(np.array([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
    st.data(),
)
def test_softmax_properties(v, c, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=v.size, max_size=v.size)))
    if not mask.any():
        mask[data.draw(st.integers(0, v.size - 1))] = True
    p = nx.softmax(v, mask)
    assert np.all(p[~mask] == 0.0)
    assert np.all(p[mask] >= 0.0)
    assert abs(p.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(nx.softmax(v + c, mask), p, atol=1e-9)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    v = rng.normal(size=6)
    mask = np.array([1, 1, 0, 1, 1, 0], dtype=bool)
    g = rng.normal(size=6)

    def f(x):
        return float(g @ nx.softmax(x, mask))

    a = nx.softmax(v, mask)
    analytic = nx.softmax_backward(a, g)
    h = 1e-6
    numeric = np.array([(f(v + h * e) - f(v - h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)


# --------------------------------------------------------------------------
# BCE


def test_bce_half():
    assert nx.bce(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert nx.bce(0.5, 0) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_is_clamped():
    assert nx.bce(1.0, 1) == pytest.approx(-math.log(1 - 1e-7), abs=1e-15)
    assert nx.bce(0.0, 0) < 1e-6
    assert np.isfinite(nx.bce(0.0, 1))


def test_bce_formula_oracle():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, 100)
    y = rng.integers(0, 2, 100)
    ref = [-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)]
    np.testing.assert_allclose(nx.bce(p, y), ref, atol=1e-12)


def test_bce_with_logits_matches_bce():
    z = np.linspace(-8, 8, 33)
    for y in (0.0, 1.0):
        np.testing.assert_allclose(nx.bce_with_logits(z, y), nx.bce(nx.sigmoid(z), y), atol=1e-9)


# --------------------------------------------------------------------------
# convolution


def test_conv_identity_linear():
    X = np.arange(15, dtype=float).reshape(3, 5)
    W = np.eye(3)[:, None, :]
    out = nx.conv1d_same(X, W, np.zeros(3), activation="linear")
    np.testing.assert_array_equal(out, X)


def test_conv_zero_input_gives_activated_bias():
    b = np.array([0.3, -1.0])
    out = nx.conv1d_same(np.zeros((4, 6)), np.ones((2, 3, 4)), b)
    np.testing.assert_allclose(out, np.tanh(b)[:, None] * np.ones((2, 6)), atol=0)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
@pytest.mark.parametrize("activation", ["tanh", "linear"])
def test_conv_matches_loop_oracle(k, activation):
    rng = np.random.default_rng(k)
    X = rng.normal(size=(3, 5))
    W = rng.normal(size=(4, k, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(nx.conv1d_same(X, W, b, activation), loop_conv(X, W, b, activation), atol=1e-12)


def test_conv_rejects_zero_width():
    with pytest.raises(ValueError):
        nx.conv1d_same(np.ones((2, 3)), np.ones((2, 0, 2)), np.zeros(2))


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(2, 5, 3))
    W = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    G = rng.normal(size=(2, 5, 4))

    def lg(p):
        Z = nx.conv_forward(p["X"], p["W"], p["b"])
        dX, dW, db = nx.conv_backward(G, p["X"], p["W"])
        return float((G * Z).sum()), {"X": dX, "W": dW, "b": db}

    assert nx.grad_check(lg, {"X": X, "W": W, "b": b}) < 1e-7


# --------------------------------------------------------------------------
# dropout


def test_dropout_eval_is_identity():
    x = np.arange(10.0)
    assert nx.dropout(x, 0.5, None, train=False) is x


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    p, n = 0.3, 200_000
    m = nx.dropout_mask(rng, (n,), p)
    zero_frac = np.mean(m == 0)
    assert abs(zero_frac - p) < 3 * math.sqrt(p * (1 - p) / n)
    assert np.allclose(m[m > 0], 1 / (1 - p))
    # E[mask] = 1 within 3 sigma
    sd = math.sqrt(p / (1 - p) / n)
    assert abs(m.mean() - 1.0) < 3 * sd


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        nx.dropout_mask(np.random.default_rng(0), (3,), 1.0)


def test_scatter_add_matches_add_at():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 7, 40)
    rows = rng.normal(size=(40, 3))
    a = np.zeros((7, 3))
    b = np.zeros((7, 3))
    nx.scatter_add(a, idx, rows)
    np.add.at(b, idx, rows)
    np.testing.assert_allclose(a, b, atol=1e-12)


# --------------------------------------------------------------------------
# Adam


def reference_adam(theta, grad_fn, steps, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    theta = theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
        out.append(theta.copy())
    return out


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.0])}
    nx.adam_step(p, {"w": np.array([1.0])}, nx.AdamState())
    assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_quadratic_trajectory_matches_reference():
    A = np.diag([1.0, 10.0, 0.1])
    grad = lambda th: A @ th
    theta0 = np.array([1.0, -1.0, 2.0])
    ref = reference_adam(theta0, grad, 300, lr=0.01)
    p = {"w": theta0.copy()}
    st_ = nx.AdamState(lr=0.01)
    for t in range(300):
        nx.adam_step(p, {"w": grad(p["w"])}, st_)
        np.testing.assert_allclose(p["w"], ref[t], atol=1e-10)


def test_adam_nonfinite_gradient_names_parameter():
    p = {"w": np.zeros(2), "b": np.zeros(1)}
    with pytest.raises(FloatingPointError, match="'b'"):
        nx.adam_step(p, {"w": np.ones(2), "b": np.array([np.nan])}, nx.AdamState())
    np.testing.assert_array_equal(p["w"], 0.0)


def test_adam_untouched_parameter_is_bit_identical():
    p = {"w": np.array([0.5]), "o": np.array([0.25])}
    before = p["o"].tobytes()
    s = nx.AdamState()
    for _ in range(5):
        nx.adam_step(p, {"w": np.array([1.0])}, s)
    assert p["o"].tobytes() == before
    assert "o" not in s.m


# --------------------------------------------------------------------------
# grad_check


def test_grad_check_logistic_toy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 4))
    y = rng.integers(0, 2, 20).astype(float)

    def lg(p):
        z = X @ p["w"] + p["b"][0]
        loss = float(nx.bce_with_logits(z, y).sum())
        r = nx.sigmoid(z) - y
        return loss, {"w": X.T @ r, "b": np.array([r.sum()])}

    assert nx.grad_check(lg, {"w": rng.normal(size=4), "b": np.zeros(1)}) < 1e-6


def test_grad_check_detects_wrong_gradient():
    def lg(p):
        return float((p["w"] ** 2).sum()), {"w": 3 * p["w"]}

    assert nx.grad_check(lg, {"w": np.array([1.0, 2.0])}) > 0.1


def test_grad_check_zero_input():
    def lg(p):
        return float(np.tanh(p["w"]).sum()), {"w": 1 - np.tanh(p["w"]) ** 2}

    assert nx.grad_check(lg, {"w": np.zeros(3)}) < 1e-8
