import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sssplat.errors import DimensionMismatch, StaleTape
from sssplat.mlp import SssMlp, softplus


def test_zero_network_outputs_ln2():
    mlp = SssMlp(10, 3, seed=0)
    for k in range(len(mlp.weights)):
        mlp.weights[k][:] = 0.0
        mlp.biases[k][:] = 0.0
    y, _ = mlp.forward(np.ones(10))
    assert np.allclose(y, np.log(2.0), atol=1e-15)


def test_relu_kills_negative_preactivation():
    mlp = SssMlp(1, 1, hidden=1, depth=2, seed=0)
    mlp.weights[0][:] = -1.0
    mlp.biases[0][:] = 0.0
    mlp.weights[1][:] = 5.0
    mlp.biases[1][:] = 0.0
    y, _ = mlp.forward(np.array([2.0]))  # hidden pre-activation -2 -> relu 0
    assert y[0] == pytest.approx(softplus(0.0))


def test_forward_matches_independent_matrix_chain():
    # independent evaluator: plain loops, no shared code path
    rng = np.random.default_rng(1)
    mlp = SssMlp(7, 3, hidden=16, depth=3, seed=2)
    mlp.weights[-1] = rng.normal(size=mlp.weights[-1].shape)
    mlp.biases[-1] = rng.normal(size=3)
    x = rng.normal(size=7)
    h = x.copy()
    for k in range(3):
        w, b = mlp.weights[k], mlp.biases[k]
        out = np.zeros(w.shape[0])
        for i in range(w.shape[0]):
            acc = b[i]
            for j in range(w.shape[1]):
                acc += w[i, j] * h[j]
            out[i] = acc
        h = np.maximum(out, 0.0) if k < 2 else np.log1p(np.exp(out))
    y, _ = mlp.forward(x)
    assert np.allclose(y, h, atol=1e-12)


def test_dimension_mismatch():
    mlp = SssMlp(4, 2, seed=0)
    with pytest.raises(DimensionMismatch):
        mlp.forward(np.zeros(5))


def test_backward_zero_upstream_gives_zero_grads():
    mlp = SssMlp(5, 2, seed=3)
    y, tape = mlp.forward(np.ones(5))
    dx, grads = mlp.backward(tape, np.zeros(2))
    assert np.all(dx == 0)
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)


def test_backward_linearity():
    rng = np.random.default_rng(4)
    mlp = SssMlp(6, 3, seed=5)
    mlp.weights[-1] = rng.normal(size=mlp.weights[-1].shape)
    x = rng.normal(size=6)
    dy = rng.normal(size=3)
    _, tape = mlp.forward(x)
    dx1, g1 = mlp.backward(tape, dy)
    dx2, g2 = mlp.backward(tape, 2.0 * dy)
    assert np.allclose(dx2, 2.0 * dx1, atol=1e-12)
    assert np.allclose(SssMlp.flatten_grads(g2), 2.0 * SssMlp.flatten_grads(g1), atol=1e-12)


def test_stale_tape_rejected():
    a = SssMlp(3, 1, seed=0)
    b = SssMlp(3, 1, seed=1)
    _, tape = a.forward(np.zeros(3))
    with pytest.raises(StaleTape):
        b.backward(tape, np.zeros(1))


def _fd_check(mlp, x, h=1e-5, tol=1e-6):
    rng = np.random.default_rng(0)
    proj = rng.normal(size=mlp.weights[-1].shape[0])

    def scalar():
        y, _ = mlp.forward(x)
        return float(proj @ y)

    y, tape = mlp.forward(x)
    _, grads = mlp.backward(tape, proj)
    flat = mlp.flatten()
    gflat = SssMlp.flatten_grads(grads)
    idx = rng.choice(len(flat), size=min(200, len(flat)), replace=False)
    for j in idx:
        old = flat[j]
        flat[j] = old + h
        mlp.unflatten(flat)
        lp = scalar()
        flat[j] = old - h
        mlp.unflatten(flat)
        lm = scalar()
        flat[j] = old
        mlp.unflatten(flat)
        fd = (lp - lm) / (2 * h)
        assert abs(gflat[j] - fd) / max(abs(fd), abs(gflat[j]), 1e-6) < tol


def test_scalar_output_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    mlp = SssMlp(9, 1, hidden=12, depth=3, seed=8)
    mlp.weights[-1] = rng.normal(scale=0.5, size=mlp.weights[-1].shape)
    mlp.biases[-1] = rng.normal(scale=0.1, size=1)
    _fd_check(mlp, rng.normal(size=9))


@settings(max_examples=10, deadline=None)
@given(in_dim=st.integers(2, 8), hidden=st.integers(2, 12), out_dim=st.integers(1, 4),
       seed=st.integers(0, 1000))
def test_gradient_correctness_random_shapes(in_dim, hidden, out_dim, seed):
    rng = np.random.default_rng(seed)
    mlp = SssMlp(in_dim, out_dim, hidden=hidden, depth=3, seed=seed)
    mlp.weights[-1] = rng.normal(scale=0.3, size=mlp.weights[-1].shape)
    # generic biases keep pre-activations off the exact ReLU kink
    for k in range(len(mlp.biases)):
        mlp.biases[k] = rng.normal(scale=0.2, size=mlp.biases[k].shape)
    x = rng.normal(size=in_dim)
    proj = rng.normal(size=out_dim)
    y, tape = mlp.forward(x)
    dx, grads = mlp.backward(tape, proj)
    h = 1e-5
    flat = mlp.flatten()
    gflat = SssMlp.flatten_grads(grads)
    idx = rng.choice(len(flat), size=min(30, len(flat)), replace=False)
    for j in idx:
        old = flat[j]
        flat[j] = old + h
        mlp.unflatten(flat)
        lp = float(proj @ mlp.forward(x)[0])
        flat[j] = old - h
        mlp.unflatten(flat)
        lm = float(proj @ mlp.forward(x)[0])
        flat[j] = old
        mlp.unflatten(flat)
        fd = (lp - lm) / (2 * h)
        assert abs(gflat[j] - fd) / max(abs(fd), abs(gflat[j]), 1e-6) < 1e-5


def test_batched_forward_matches_single():
    rng = np.random.default_rng(9)
    mlp = SssMlp(5, 3, seed=10)
    mlp.weights[-1] = rng.normal(size=mlp.weights[-1].shape)
    xs = rng.normal(size=(4, 5))
    ys, _ = mlp.forward(xs)
    for i in range(4):
        yi, _ = mlp.forward(xs[i])
        assert np.allclose(ys[i], yi, atol=1e-14)
