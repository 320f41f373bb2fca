import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vogn.network import Dense, Network, forward, mlp, softmax
from vogn.optimizers import OptimizerState, Prior
from vogn.posterior import (
    GaussianPosterior,
    KroneckerPosterior,
    elbo_diagnostic,
    kl_diag_gaussian,
    predict_mc,
    read_predictions,
    sample_weights,
    write_predictions,
)
from vogn.tensor import RngStream


def diag_post(model, s, dtilde=0.1, damping=0.0, n=10.0):
    state = OptimizerState([np.zeros_like(p) for p in model.params],
                           [np.full_like(p, s) for p in model.params], n_eff=n, dtilde=dtilde)
    return GaussianPosterior.from_state(model, state, damping)


def test_variance_formula():
    model = mlp([2, 2])
    post = diag_post(model, 0.4, dtilde=0.1, damping=0.5, n=10.0)
    assert np.allclose(post.variance[0], 1.0 / (10.0 * 1.0))


def test_huge_scale_draw_equals_mean():
    model = mlp([3, 2]).init_params(RngStream(0))
    post = diag_post(model, 1e300)
    post.mean = list(model.params)
    w = sample_weights(post, RngStream(1))
    assert np.max(np.abs(w[0] - model.params[0])) < 1e-140


def test_sample_variance_matches_sigma2():
    model = Network([Dense(1, 1, bias=False)], (1,))
    post = diag_post(model, 0.15, dtilde=0.05, n=4.0)  # sigma^2 = 1/(4 * 0.2) = 1.25
    draws = sample_weights(post, RngStream(2), n=100_000)[0].ravel()
    assert abs(draws.var() / 1.25 - 1.0) < 0.02
    assert abs(draws.mean()) < 0.02


def test_batchnorm_parameters_not_sampled():
    model = mlp([2, 4, 2], batchnorm=True).init_params(RngStream(3))
    post = diag_post(model, 1.0)
    post.mean = list(model.params)
    w = sample_weights(post, RngStream(4))
    for wi, mu, b in zip(w, model.params, model.bayesian):
        assert np.array_equal(wi, mu) != b


def test_kronecker_covariance_2x2():
    model = Network([Dense(1, 2)], (1,))  # W is [2, 2]
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    S = np.array([[1.5, -0.3], [-0.3, 0.8]])
    tau, n = 0.5, 2.0
    post = KroneckerPosterior(model, [np.zeros((2, 2))], {0: (A, S)}, tau, n)
    sigma1 = np.linalg.inv(S)
    sigma2 = tau / n * np.linalg.inv(A)
    draws = post.sample(RngStream(5), n=200_000)[0]
    cov = np.cov(draws.reshape(len(draws), -1).T)
    expected = np.zeros((4, 4))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                for l in range(2):
                    expected[2 * i + j, 2 * k + l] = sigma1[i, k] * sigma2[j, l]
    assert np.max(np.abs(cov - expected)) < 0.02 * np.max(np.abs(expected))
    assert np.allclose(post.col_precision(0), n * A / tau)


def test_kronecker_rejects_non_spd():
    model = Network([Dense(1, 2)], (1,))
    with pytest.raises(ValueError):
        KroneckerPosterior(model, [np.zeros((2, 2))], {0: (-np.eye(2), np.eye(2))}, 1.0, 1.0)


def test_predict_c1_zero_noise_equals_point():
    model = mlp([2, 5, 3]).init_params(RngStream(6))
    post = diag_post(model, 1.0)
    post.mean = list(model.params)
    x = RngStream(7).normal((10, 2))
    p = predict_mc(model, post, x, 1, RngStream(8), zero_noise=True)
    assert np.array_equal(p, softmax(forward(model, x, "eval")[0]))


def test_predict_two_sample_hand_oracle():
    model = Network([Dense(2, 3)], (2,))
    post = diag_post(model, 2.0)
    post.mean = [RngStream(9).normal((3, 3))]
    x = RngStream(10).normal((4, 2))
    rng = RngStream(11)
    p = predict_mc(model, post, x, 2, rng)
    xa = np.concatenate([x, np.ones((4, 1))], axis=1)
    probs = []
    for c in range(2):
        (w,) = sample_weights(post, rng.child(c))
        z = xa @ w.T
        e = np.exp(z - z.max(axis=1, keepdims=True))
        probs.append(e / e.sum(axis=1, keepdims=True))
    assert np.max(np.abs(p - 0.5 * (probs[0] + probs[1]))) < 1e-12


@given(st.integers(1, 12), st.integers(0, 1000))
def test_predictions_are_simplices(c, seed):
    model = mlp([2, 4, 3]).init_params(RngStream(seed))
    post = diag_post(model, 0.01)
    post.mean = list(model.params)
    p = predict_mc(model, post, RngStream(seed + 1).normal((6, 2)) * 5, c, RngStream(seed + 2))
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12


def test_predict_rejects_zero_samples():
    model = mlp([2, 2])
    with pytest.raises(ValueError):
        predict_mc(model, diag_post(model, 1.0), np.zeros((1, 2)), 0, RngStream(0))


def test_mc_variance_shrinks_as_one_over_c():
    model = mlp([2, 8, 3]).init_params(RngStream(12))
    post = diag_post(model, 0.0, dtilde=1.0, n=4.0)
    post.mean = list(model.params)
    x = RngStream(13).normal((20, 2))
    cs = [1, 4, 16]
    var = []
    for c in cs:
        runs = np.stack([predict_mc(model, post, x, c, RngStream(14).child(c, r)) for r in range(200)])
        var.append(runs.var(axis=0).mean())
    slope = np.polyfit(np.log(cs), np.log(var), 1)[0]
    assert -1.3 <= slope <= -0.7


def test_kl_closed_form():
    assert kl_diag_gaussian(0.0, 1.0, 0.0, 2.0) == pytest.approx(0.5 * (0.5 + np.log(2) - 1), abs=1e-15)
    assert kl_diag_gaussian(0.0, 1.0, 0.0, 2.0) == pytest.approx(0.096574, abs=1e-6)
    assert kl_diag_gaussian(np.zeros(3), np.full(3, 0.5), 0.0, 0.5) == 0.0


@given(st.floats(-3, 3), st.floats(0.05, 5), st.floats(-3, 3), st.floats(0.05, 5))
def test_kl_nonnegative_zero_iff_equal(mq, vq, mp, vp):
    kl = kl_diag_gaussian(mq, vq, mp, vp)
    assert kl >= 0
    if (mq, vq) != (mp, vp) and (abs(mq - mp) > 1e-3 or abs(vq / vp - 1) > 1e-3):
        assert kl > 0


def test_elbo_zero_kl_when_q_equals_prior():
    model = Network([Dense(1, 2)], (1,))
    delta, n = 2.0, 2.0
    # sigma^2 = 1/(N (s + dtilde)) = 1/delta with s = 0, dtilde = delta/N
    post = diag_post(model, 0.0, dtilde=delta / n, n=n)
    x, y = np.ones((2, 1)), np.array([0, 1])
    with np.errstate(all="ignore"):
        e = elbo_diagnostic(model, post, x, y, delta, 1.0, 50, RngStream(15))
    losses = []
    for c in range(50):
        (w,) = sample_weights(post, RngStream(15).child(c))
        logits, _ = forward(model, x, "eval", params=[w])
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        losses.append(-(lp[0, 0] + lp[1, 1]) / 2)
    assert e == pytest.approx(-n * np.mean(losses), rel=1e-12)


@pytest.mark.parametrize("s,tau", [(0.0, 1.0), (3.0, 0.5), (50.0, 1.0)])
def test_elbo_bounded_on_two_point_dataset(s, tau):
    # identical inputs with opposite labels: every weight setting has mean loss >= ln 2
    model = Network([Dense(1, 2)], (1,))
    post = diag_post(model, s, dtilde=0.5, n=2.0)
    post.mean = [RngStream(16).normal((2, 2))]
    e = elbo_diagnostic(model, post, np.ones((2, 1)), np.array([0, 1]), 1.0, tau, 20, RngStream(17))
    assert e <= -2.0 * np.log(2.0)


def test_elbo_zero_prior_precision_raises():
    model = Network([Dense(1, 2)], (1,))
    with pytest.raises(ValueError):
        elbo_diagnostic(model, diag_post(model, 1.0), np.ones((2, 1)), np.array([0, 1]), 0.0, 1.0, 1, RngStream(0))


def test_prediction_csv_roundtrip(tmp_path):
    probs = softmax(RngStream(18).normal((7, 4)))
    labels = np.array([0, 1, 2, 3, 0, 1, 2])
    path = tmp_path / "predictions.csv"
    write_predictions(path, probs, labels, ids=np.arange(100, 107))
    ids, lab, p = read_predictions(path)
    assert ids.tolist() == list(range(100, 107))
    assert np.array_equal(lab, labels) and np.array_equal(p, probs)
    assert path.read_text().splitlines()[0] == "example_id,true_label,p_1,p_2,p_3,p_4"


def test_prior_gradient():
    pr = Prior([np.array([1.0])], [np.array([0.5])])
    assert pr.grad([np.array([3.0])])[0].tolist() == [1.0]
