"""Gaussian weight posteriors, weight sampling, MC prediction and the ELBO."""
import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .network import forward, per_example_nll, softmax
from .optimizers import Prior
from .tensor import gaussian_sample


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian ``N(mean, 1 / (N (scale + prior_prec + damping)))``.

    Only entries flagged in ``bayesian`` carry uncertainty; the rest (batchnorm
    parameters) are point estimates and are returned unchanged by sampling.
    """

    mean: list
    scale: list
    prior: Prior
    damping: float
    n_eff: float
    bayesian: list

    @classmethod
    def from_state(cls, model, state, damping, prior=None, mean=None):
        mean = model.params if mean is None else mean
        if prior is None:
            prior = Prior.isotropic(mean, model.bayesian, state.dtilde)
        return cls(list(mean), list(state.s), prior, damping, state.n_eff, list(model.bayesian))

    @property
    def variance(self):
        out = []
        for s, pr, b in zip(self.scale, self.prior.prec, self.bayesian):
            if b:
                out.append(1.0 / (self.n_eff * (s + pr + self.damping)))
            else:
                out.append(np.zeros_like(s))
        return out

    @property
    def std(self):
        return [np.sqrt(v) for v in self.variance]


def sample_weights(post, rng, n=None, zero_noise=False):
    """Draw ``w = mean + eps * sigma`` for every Bayesian weight.

    With ``n`` the result gets a leading axis of ``n`` independent draws (one per
    example). ``zero_noise`` forces ``eps = 0`` but still goes through the
    sampling path.
    """
    if isinstance(post, KroneckerPosterior):
        return post.sample(rng, n=n, zero_noise=zero_noise)
    out = []
    for mu, sd, b in zip(post.mean, post.std, post.bayesian):
        if not b:
            out.append(mu)
            continue
        shape = mu.shape if n is None else (n,) + mu.shape
        m = np.broadcast_to(mu, shape)
        sd = np.zeros(shape) if zero_noise else np.broadcast_to(sd, shape)
        out.append(gaussian_sample(m, sd, rng))
    return out


class KroneckerPosterior:
    """Matrix-variate Gaussian per dense layer, ``vec(W) ~ N(vec(M), Sigma2 (x) Sigma1)``.

    For a weight of shape ``[out, in+1]`` the row (output-side) covariance is
    ``Sigma1 = inv(S_damped)`` and the column (input-side) covariance is
    ``Sigma2 = tau/N * inv(A_damped)``. Non-dense parameters are point estimates.
    """

    def __init__(self, model, mean, factors, tau, n_eff):
        self.mean = list(mean)
        self.factors = dict(factors)  # layer index -> (A_damped, S_damped)
        self.tau = tau
        self.n_eff = n_eff
        self.param_layer = list(model.param_layer)
        self._roots = {}
        for li, (Ag, Sg) in self.factors.items():
            for X, name in ((Ag, "A"), (Sg, "S")):
                if not np.allclose(X, X.T) or np.linalg.eigvalsh(X).min() <= 0:
                    raise ValueError(f"layer {li}: damped {name} factor is not symmetric positive definite")

    def row_precision(self, li):
        return self.factors[li][1]

    def col_precision(self, li):
        return self.n_eff * self.factors[li][0] / self.tau

    def roots(self, li):
        """Triangular ``X, Y`` with ``X X^T = Sigma1`` and ``Y Y^T = Sigma2``."""
        if li in self._roots:
            return self._roots[li]
        Ag, Sg = self.factors[li]
        ls = np.linalg.cholesky(Sg)
        la = np.linalg.cholesky(self.col_precision(li))
        X = linalg.solve_triangular(ls, np.eye(len(Sg)), lower=True).T
        Y = linalg.solve_triangular(la, np.eye(len(Ag)), lower=True).T
        self._roots[li] = (X, Y)
        return X, Y

    def sample(self, rng, n=None, zero_noise=False):
        out = []
        for mu, li in zip(self.mean, self.param_layer):
            if li not in self.factors:
                out.append(mu)
                continue
            X, Y = self.roots(li)
            shape = mu.shape if n is None else (n,) + mu.shape
            E = np.zeros(shape) if zero_noise else rng.normal(shape)
            out.append(mu + X @ E @ Y.T)
        return out


def _point_params(post):
    if isinstance(post, (GaussianPosterior, KroneckerPosterior)):
        return None
    return list(post)


def predict_mc(model, post, x, n_samples, rng, zero_noise=False, batch_size=4096):
    """MC predictive probabilities ``(1/C) sum_c softmax(f(x; w_c))``.

    ``post`` may also be a plain parameter list, giving the point prediction.
    Probabilities are averaged, not logits. Uses eval-mode batchnorm.
    """
    if n_samples < 1:
        raise ValueError("need at least one MC sample")
    point = _point_params(post)
    total = np.zeros((x.shape[0], model.n_classes))
    for c in range(n_samples):
        if point is not None:
            w = point
        else:
            w = sample_weights(post, rng.child(c), zero_noise=zero_noise)
        for lo in range(0, x.shape[0], batch_size):
            logits, _ = forward(model, x[lo:lo + batch_size], "eval", params=w)
            total[lo:lo + batch_size] += softmax(logits)
        if point is not None:
            return total
    return total / n_samples


def kl_diag_gaussian(mu_q, var_q, mu_p, var_p):
    """``KL(N(mu_q, var_q) || N(mu_p, var_p))`` summed over all entries."""
    mu_q, var_q = np.asarray(mu_q, float), np.asarray(var_q, float)
    mu_p, var_p = np.broadcast_to(mu_p, mu_q.shape), np.broadcast_to(var_p, mu_q.shape)
    r = var_q / var_p
    return float(0.5 * np.sum(r + (mu_q - mu_p) ** 2 / var_p - 1.0 - np.log(r)))


def elbo_diagnostic(model, post, x, y, prior_prec, tau, n_samples, rng, n_data=None):
    """``-N * E_q[mean loss] - tau * KL(q || N(0, I/prior_prec))``.

    The expectation is an MC estimate over ``n_samples`` weight draws on the
    given data; ``N`` defaults to the posterior's effective dataset size.
    """
    if prior_prec <= 0:
        raise ValueError("KL to the prior is undefined for prior precision <= 0")
    n = post.n_eff if n_data is None else n_data
    losses = []
    for c in range(n_samples):
        w = sample_weights(post, rng.child(c))
        logits, _ = forward(model, x, "eval", params=w)
        losses.append(per_example_nll(logits, y).mean())
    kl = 0.0
    for mu, var, b in zip(post.mean, post.variance, post.bayesian):
        if b:
            kl += kl_diag_gaussian(mu, var, 0.0, 1.0 / prior_prec)
    return float(-n * np.mean(losses) - tau * kl)


# -- prediction dump ----------------------------------------------------------

def write_predictions(path, probs, labels, ids=None):
    """CSV with columns ``example_id, true_label, p_1..p_K``."""
    probs = np.asarray(probs)
    ids = np.arange(len(probs)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "true_label"] + [f"p_{k + 1}" for k in range(probs.shape[1])])
        for i, lab, row in zip(ids, labels, probs):
            w.writerow([int(i), int(lab)] + [repr(float(p)) for p in row])


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["example_id", "true_label"]:
        raise ValueError(f"{path}: not a prediction dump")
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    probs = np.array([[float(v) for v in r[2:]] for r in body], dtype=float).reshape(len(body), len(header) - 2)
    return ids, labels, probs
