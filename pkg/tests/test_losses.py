import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lalign.errors import NoPositiveError
from lalign.losses import (
    LossWeights, grad_check, numeric_gradient, gram_deviation, loss_backward_mse, loss_combined_contrastive, loss_contrastive,
    loss_forward, loss_lambda_heaviside, loss_lambda_sigmoid, loss_orth, loss_total, loss_values, map_loss_fn,
)
from lalign.transforms import AffineMap, MlpMap, OrthogonalMap

W2 = 2.0 * np.eye(2)  # W W^T - I = 3 I, so g = 3 sqrt(2)
G2 = 3.0 * math.sqrt(2.0)


def backward_fn(B, h_new, h_old):
    return map_loss_fn({"B": B}, lambda: (lambda v, g: (v, {"B": g}))(*loss_backward_mse(B, h_new, h_old)))[0]


def test_backward_mse_identity_is_zero():
    h = np.random.default_rng(0).normal(size=(5, 3))
    v, g = loss_backward_mse(AffineMap(np.eye(3)), h, h)
    assert v == 0.0
    assert not np.any(g["W"]) and not np.any(g["b"])


def test_backward_mse_single_pair():
    B = AffineMap(np.eye(2))
    v, _ = loss_backward_mse(B, np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert v == 1.0
    fn = backward_fn(B, np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    x0 = np.concatenate([B.weight.ravel(), B.bias])
    assert grad_check(fn, x0) <= 1e-5


def test_grad_check_identity_mse_is_exact():
    h = np.random.default_rng(1).normal(size=(4, 3))
    B = AffineMap(np.eye(3))
    x0 = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    fn = backward_fn(B, h, h)
    # analytic gradient is exactly zero; the numeric one is pure roundoff
    assert not np.any(fn(x0)[1])
    assert np.abs(numeric_gradient(lambda x: fn(x)[0], x0)).max() <= 1e-15
    assert grad_check(fn, x0) <= 1e-7


def test_grad_check_random_affine():
    rng = np.random.default_rng(2)
    B = AffineMap(rng.normal(size=(3, 3)), rng.normal(size=3))
    fn = backward_fn(B, rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
    assert grad_check(fn, np.concatenate([B.weight.ravel(), B.bias])) <= 1e-5


def test_orth_of_orthogonal_is_zero():
    q, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(4, 4)))
    v, _ = loss_orth(q)
    assert v <= 1e-14


def test_heaviside_examples():
    assert gram_deviation(W2) == pytest.approx(G2, abs=1e-14)
    assert loss_lambda_heaviside(W2, 10.0) == 0.0
    assert loss_lambda_heaviside(W2, 1.0) == pytest.approx(G2, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_heaviside_zero_equals_orth_and_gram_identity(n, seed):
    w = np.random.default_rng(seed).normal(size=(n, n))
    assert gram_deviation(w) == pytest.approx(gram_deviation(w, transpose=True), rel=1e-12, abs=1e-12)
    assert loss_lambda_heaviside(w, 0.0) == pytest.approx(loss_orth(w)[0], rel=1e-12, abs=1e-12)


def test_sigmoid_examples():
    assert loss_lambda_sigmoid(np.eye(3), 1.0, 10.0)[0] == 0.0
    for alpha in (0.1, 1.0, 10.0, 100.0):
        assert loss_lambda_sigmoid(W2, G2, alpha)[0] == pytest.approx(0.5 * G2, rel=1e-14)
    # direct scalar evaluation of sigma(10 (g - 10)) * g
    s = math.exp(10.0 * (G2 - 10.0)) / (1.0 + math.exp(10.0 * (G2 - 10.0)))
    v, _ = loss_lambda_sigmoid(W2, 10.0, 10.0)
    assert v == pytest.approx(s * G2, rel=1e-12)
    assert 9e-26 < s < 1e-25 and v < 1e-24


def test_sigmoid_near_threshold_grad():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(4, 4))
    lam = gram_deviation(w) + 0.03
    fn = lambda x: loss_lambda_sigmoid(x.reshape(4, 4), lam, 10.0)  # noqa: E731
    assert grad_check(fn, w.ravel()) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(0.5, 5.0), st.integers(0, 2**32 - 1))
def test_sigmoid_lambda_zero_large_alpha_tracks_g(n, scale, seed):
    w = scale * np.random.default_rng(seed).normal(size=(n, n))
    g = gram_deviation(w)
    if g >= 0.1:
        assert loss_lambda_sigmoid(w, 0.0, 100.0)[0] == pytest.approx(g, rel=0.01)


def test_forward_examples():
    h = np.random.default_rng(5).normal(size=(6, 3))
    assert loss_forward(AffineMap(np.eye(3)), AffineMap(np.eye(3)), h, h)[0] == 0.0
    q, _ = np.linalg.qr(np.random.default_rng(6).normal(size=(3, 3)))
    v, _ = loss_forward(AffineMap(np.eye(3)), AffineMap(q.T), h, h @ q.T)
    assert v <= 1e-25


def test_contrastive_hand_softmax():
    v, _ = loss_contrastive([[1.0, 0.0]], [[2.0, 0.0], [0.0, 3.0]], [0], [0, 1], 1.0)
    assert v == pytest.approx(-math.log(math.e / (math.e + 1.0)), rel=1e-14)
    assert v == pytest.approx(0.3133, abs=1e-4)


@pytest.mark.parametrize("k", [1, 3, 7])
def test_contrastive_uniform_is_log_k(k):
    cand = np.tile([[1.0, 2.0]], (k, 1))
    v, _ = loss_contrastive([[3.0, -1.0], [0.5, 0.5]], cand, [0, 0], [0] * k, 0.3)
    assert v == pytest.approx(math.log(k), abs=1e-13)


def test_contrastive_no_positive():
    with pytest.raises(NoPositiveError):
        loss_contrastive([[1.0, 0.0]], [[1.0, 0.0]], [0], [1], 1.0)


def test_contrastive_grad_random_batches():
    rng = np.random.default_rng(7)
    la = np.array([0, 1, 1, 0, 2])
    x0 = rng.normal(size=(10, 4))

    def fn(x):
        v, (da, dc) = loss_contrastive(x.reshape(10, 4)[:5], x.reshape(10, 4)[5:], la, la, 0.5)
        return v, np.vstack([da, dc]).ravel()

    assert grad_check(fn, x0.ravel(), delta=1e-4, stencil=4) <= 1e-5


@pytest.mark.parametrize("k", [2, 5])
def test_combined_perfect_alignment_one_class(k):
    h = np.tile([[0.3, -0.7, 1.1]], (k, 1))
    v, _ = loss_combined_contrastive(AffineMap(np.eye(3)), AffineMap(np.eye(3)), h, h, np.zeros(k, int), 0.1)
    assert v == pytest.approx(2.0 * math.log(k), abs=1e-12)


def test_combined_labeled_equals_unlabeled_for_singletons():
    rng = np.random.default_rng(8)
    F, B = AffineMap(rng.normal(size=(3, 3))), AffineMap(rng.normal(size=(3, 3)))
    ho, hn = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    lab = np.array([4, 0, 2, 1, 3])
    a, _ = loss_combined_contrastive(F, B, ho, hn, lab, 0.2, labeled=True)
    b, _ = loss_combined_contrastive(F, B, ho, hn, lab, 0.2, labeled=False)
    assert a == b


def test_total_zero_weights_orthogonal_b():
    rng = np.random.default_rng(9)
    br, grads = loss_total(AffineMap(rng.normal(size=(3, 3))), OrthogonalMap.random(rng, 3, 0.5),
                           rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.arange(4), LossWeights(0, 0, 0))
    assert br.total == 0.0
    assert all(not np.any(v) for g in grads.values() for v in g.values())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["affine", "mlp"]), st.sampled_from(["orthogonal", "affine"]))
def test_loss_values_match_loss_total(seed, fk, bk):
    rng = np.random.default_rng(seed)
    F = AffineMap(rng.normal(size=(3, 4)), rng.normal(size=3)) if fk == "affine" else MlpMap.random(rng, 4, 3)
    B = OrthogonalMap.random(rng, 3, 0.5) if bk == "orthogonal" else AffineMap(rng.normal(size=(3, 3)), None, True)
    ho, hn = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    lab = np.array([0, 1, 2, 0, 1, 2])
    w = LossWeights(0.7, 1.3, 0.4, lam=1.0, temperature=0.3)
    br, _ = loss_total(F, B, ho, hn, lab, w)
    bv = loss_values(F, B, ho, hn, lab, w)
    for name in ("total", "l_f", "l_b", "l_c", "l_lambda"):
        assert getattr(bv, name) == pytest.approx(getattr(br, name), rel=1e-12, abs=1e-14)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w1=-1.0)
    with pytest.raises(ValueError):
        LossWeights(temperature=0.0)
