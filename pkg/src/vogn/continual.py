"""Permuted-input continual learning with posterior-to-prior chaining."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .optimizers import Prior
from .parallel import WorkerPlan
from .posterior import GaussianPosterior, predict_mc
from .network import accuracy
from .tensor import RngStream
from .training import train


@dataclass
class TaskSequence:
    train: Dataset
    test: Dataset
    perms: list
    seed: int

    @property
    def n_tasks(self):
        return len(self.perms)

    def _apply(self, data, t):
        flat = data.x.reshape(len(data), -1)[:, self.perms[t]]
        return Dataset(flat.reshape(data.x.shape), data.y, data.n_classes, f"{data.name}:task{t}")

    def task(self, t, split="train"):
        return self._apply(self.train if split == "train" else self.test, t)


def make_tasks(train, test, n_tasks, seed):
    """``n_tasks`` fixed pixel permutations; the first task is the identity."""
    if n_tasks < 1:
        raise ValueError("need at least one task")
    d = int(np.prod(train.x.shape[1:]))
    rng = RngStream(seed, 0x7A5C)
    perms = [np.arange(d)] + [rng.permutation(d) for _ in range(n_tasks - 1)]
    return TaskSequence(train, test, perms, seed)


def chain_prior(post):
    """Turn a diagonal posterior into the next task's prior.

    The prior mean is the posterior mean and the prior precision is the
    posterior precision ``p0 = N (s + prec + damping)``, stored per example
    as ``p0 / N``. Non-Bayesian entries keep a zero prior precision.
    """
    var = post.variance
    mean, prec = [], []
    for mu, v, b in zip(post.mean, var, post.bayesian):
        mean.append(np.array(mu, copy=True))
        if not b:
            prec.append(np.zeros_like(mu))
            continue
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("posterior variance must be finite and positive to chain")
        prec.append(1.0 / (post.n_eff * v))
    return Prior(mean, prec)


def scale_for_precision(precision, prior, damping, n_eff):
    """Scale ``s`` giving posterior precision ``precision``: ``N (s + prec + damping)``."""
    return [np.maximum(precision / n_eff - pr - damping, 0.0) for pr in prior.prec]


@dataclass
class ContinualResult:
    accuracy: np.ndarray  # [T, T], row t = after training task t; nan above the diagonal
    posteriors: list = field(default_factory=list)

    @property
    def average(self):
        return np.array([np.nanmean(self.accuracy[t, : t + 1]) for t in range(len(self.accuracy))])

    def write_csv(self, path):
        T = len(self.accuracy)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["after_task"] + [f"task_{k}" for k in range(T)] + ["average"])
            for t in range(T):
                row = ["" if np.isnan(a) else repr(float(a)) for a in self.accuracy[t]]
                w.writerow([t] + row + [repr(float(self.average[t]))])


def run_continual(seq, hp, make_model, epochs=10, batch_size=256, seed=0, chain=True,
                  reset_mean=True, init_precision=1e6, test_samples=100, plan=None, workers=1,
                  rng_mode="worker", callback=None):
    """Train VOGN on each task in turn and record accuracy on every task seen so far.

    ``make_model(rng)`` builds and initialises a fresh network. With
    ``chain`` the posterior after task ``t`` becomes the prior for task
    ``t+1``; otherwise every task starts from the isotropic prior. With
    ``reset_mean`` the mean is re-initialised before every task; the scale is
    always reset so the posterior precision starts at ``init_precision``.
    Without an explicit ``plan`` each task gets its own :class:`WorkerPlan`
    with ``workers`` and ``rng_mode``.
    """
    T = seq.n_tasks
    acc = np.full((T, T), np.nan)
    model, prior = None, None
    posts = []
    for t in range(T):
        data = seq.task(t)
        n_eff = hp.rho * len(data)
        fresh = make_model(RngStream(seed, 1000 + t))
        if model is None or reset_mean:
            model = fresh
        if t == 0 or not chain:
            prior = Prior.isotropic(model.params, model.bayesian, hp.tau * hp.prior_prec / n_eff)
        s0 = scale_for_precision(init_precision, prior, hp.damping, n_eff)
        task_plan = plan or WorkerPlan(workers, hp.mc_samples, rng_mode, seed * 7919 + t)
        res = train(model, data, hp, "vogn", epochs=epochs, batch_size=batch_size, plan=task_plan,
                    seed=seed * 7919 + t, prior=prior, s_init=s0, eval_train=False)
        post = GaussianPosterior.from_state(model, res.state, hp.damping, prior=prior)
        posts.append(post)
        for k in range(t + 1):
            test = seq.task(k, "test")
            probs = predict_mc(model, post, test.x, test_samples, RngStream(seed, 5000 + 100 * t + k))
            acc[t, k] = accuracy(probs, test.y)
        if callback is not None:
            callback(t, acc)
        if chain:
            prior = chain_prior(post)
    return ContinualResult(acc, posts)
