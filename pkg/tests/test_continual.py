import numpy as np
import pytest

from vogn.continual import chain_prior, make_tasks, run_continual, scale_for_precision
from vogn.data import Dataset, make_synthetic
from vogn.network import mlp
from vogn.optimizers import Hyperparams, OptimizerState, Prior
from vogn.parallel import WorkerPlan
from vogn.posterior import GaussianPosterior, predict_mc
from vogn.tensor import RngStream
from vogn.training import train

HP = Hyperparams(lr=0.05, beta1=0.0, beta2=0.1, prior_prec=1.0, mc_samples=1)


def small_tasks(n_tasks, seed=0):
    rng = RngStream(seed)
    x = rng.uniform((60, 6))
    y = (x[:, 0] + x[:, 1] > 1).astype(int)
    xt = rng.uniform((30, 6))
    yt = (xt[:, 0] + xt[:, 1] > 1).astype(int)
    return make_tasks(Dataset(x, y, 2), Dataset(xt, yt, 2), n_tasks, seed)


def make_model(rng):
    return mlp([6, 8, 2]).init_params(rng)


def test_single_task_is_identity():
    seq = small_tasks(1)
    assert np.array_equal(seq.task(0).x, seq.train.x)
    assert np.array_equal(seq.task(0, "test").x, seq.test.x)


def test_permutations_are_bijections():
    seq = small_tasks(4)
    for t, perm in enumerate(seq.perms):
        assert sorted(perm.tolist()) == list(range(6))
        inv = np.argsort(perm)
        assert np.array_equal(seq.task(t).x[:, inv], seq.train.x)
        assert np.array_equal(seq.task(t).y, seq.train.y)


def test_tasks_deterministic():
    a, b = small_tasks(3, seed=4), small_tasks(3, seed=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.perms, b.perms))


def test_make_tasks_needs_one_task():
    with pytest.raises(ValueError):
        small_tasks(0)


def _post(model, s, dtilde, n, damping=0.0):
    state = OptimizerState([np.zeros_like(p) for p in model.params],
                           [np.full_like(p, s) for p in model.params], n_eff=n, dtilde=dtilde)
    return GaussianPosterior.from_state(model, state, damping)


def test_standard_normal_posterior_chains_to_standard_normal_prior():
    model = mlp([3, 4, 2])
    n = 50.0
    post = _post(model, s=0.5 / n, dtilde=0.25 / n, n=n, damping=0.25 / n)  # N (s + dtilde + gamma) = 1
    prior = chain_prior(post)
    for mu, pr in zip(prior.mean, prior.prec):
        assert np.all(mu == 0.0)
        assert np.allclose(pr * n, 1.0, rtol=1e-14)


def test_chain_rejects_non_finite_variance():
    model = mlp([2, 2])
    post = _post(model, s=0.0, dtilde=0.0, n=10.0)
    with np.errstate(divide="ignore"):
        with pytest.raises(ValueError):
            chain_prior(post)


def test_chaining_leaves_predictions_unchanged():
    model = mlp([3, 5, 2]).init_params(RngStream(1))
    post = _post(model, s=2.0, dtilde=0.1, n=20.0)
    post.mean = list(model.params)
    x = RngStream(2).normal((10, 3))
    before = predict_mc(model, post, x, 5, RngStream(3))
    snapshot = [m.copy() for m in post.mean], [v.copy() for v in post.variance]
    chain_prior(post)
    assert np.array_equal(predict_mc(model, post, x, 5, RngStream(3)), before)
    assert all(np.array_equal(a, b) for a, b in zip(snapshot[0], post.mean))
    assert all(np.array_equal(a, b) for a, b in zip(snapshot[1], post.variance))


def test_initial_precision_from_scale():
    prior = Prior([np.zeros(3)], [np.array([0.01, 0.1, 0.0])])
    (s,) = scale_for_precision(1e6, prior, damping=1e-3, n_eff=100.0)
    assert np.allclose(100.0 * (s + prior.prec[0] + 1e-3), 1e6, rtol=1e-12)


@pytest.mark.parametrize("mode", ["worker", "example"])
def test_isotropic_chained_prior_reduces_to_plain_vogn(mode):
    data = make_synthetic("two-moons", 64, 0.2, seed=5)
    hp = Hyperparams(lr=0.02, beta1=0.9, beta2=0.1, prior_prec=2.0, damping=1e-3, mc_samples=2)
    runs = []
    for explicit in (False, True):
        model = mlp([2, 8, 2]).init_params(RngStream(6))
        prior = None
        if explicit:
            dt = hp.tau * hp.prior_prec / 64
            prior = Prior([np.zeros_like(p) for p in model.params], [np.full_like(p, dt) for p in model.params])
        train(model, data, hp, "vogn", epochs=5, batch_size=16, plan=WorkerPlan(2, 2, mode, 7),
              seed=7, prior=prior, eval_train=False)
        runs.append(model.params)
    assert max(np.max(np.abs(a - b)) for a, b in zip(*runs)) <= 1e-12


def test_one_task_equals_plain_vogn_run():
    seq = small_tasks(1)
    res = run_continual(seq, HP, make_model, epochs=3, batch_size=16, seed=2, test_samples=4)
    model = make_model(RngStream(2, 1000))
    prior = Prior.isotropic(model.params, model.bayesian, HP.prior_prec / 60)
    s0 = scale_for_precision(1e6, prior, HP.damping, 60)
    train(model, seq.task(0), HP, "vogn", epochs=3, batch_size=16,
          plan=WorkerPlan(1, 1, "worker", 2 * 7919), seed=2 * 7919, s_init=s0, eval_train=False)
    assert all(np.array_equal(a, b) for a, b in zip(model.params, res.posteriors[0].mean))


def test_accuracy_matrix_structure(tmp_path):
    seq = small_tasks(3)
    res = run_continual(seq, HP, make_model, epochs=2, batch_size=16, seed=0, test_samples=3)
    acc = res.accuracy
    for t in range(3):
        for k in range(3):
            if k <= t:
                assert 0.0 <= acc[t, k] <= 1.0
            else:
                assert np.isnan(acc[t, k])
    assert len(res.average) == 3
    res.write_csv(tmp_path / "accuracy.csv")
    lines = (tmp_path / "accuracy.csv").read_text().splitlines()
    assert lines[0] == "after_task,task_0,task_1,task_2,average" and len(lines) == 4


def test_chained_prior_has_positive_precision():
    seq = small_tasks(2)
    res = run_continual(seq, HP, make_model, epochs=2, batch_size=16, seed=1, test_samples=2)
    prior = chain_prior(res.posteriors[0])
    for pr, b in zip(prior.prec, res.posteriors[0].bayesian):
        assert np.all(pr > 0) if b else np.all(pr == 0)
