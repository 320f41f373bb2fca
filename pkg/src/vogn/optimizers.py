"""SGD, Adam, OGN, VOGN and Noisy K-FAC updates.

All updates act on lists of arrays (one entry per weight tensor of a
:class:`~vogn.network.Network`); entries are independent blocks, so the order
in which they are updated does not matter.

Conventions for the moving-average rates follow the literature each method
comes from:

* VOGN/OGN: ``m <- beta1*m + (g + prior)``, ``s <- (1 - tau*beta2)*s + beta2*h``.
* Adam: ``m <- (1 - beta1)*m + beta1*g``, ``s <- (1 - beta2)*s + beta2*g**2``,
  so ``beta1=0.1, beta2=0.001`` is the usual ``0.9/0.999`` and ``beta1=1``
  disables momentum.
* SGD: heavy-ball ``m <- beta1*m + g``.
"""
from dataclasses import dataclass, field, asdict, fields

import numpy as np
from scipy import linalg


@dataclass
class Hyperparams:
    lr: float = 1e-3
    lr_init: float | None = None
    lr_warmup_epochs: int = 0
    decay_epochs: tuple = ()
    decay_factor: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    prior_prec: float = 1.0
    damping: float = 0.0
    tau: float = 1.0
    tau_init: float | None = None
    tau_warmup_epochs: int = 0
    mc_samples: int = 1
    rho: float = 1.0
    eps: float = 1e-8
    weight_decay: float = 0.0
    l2: float = 0.0
    bias_correction: bool = False

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.validate()

    def validate(self):
        checks = [
            (self.lr > 0, "lr must be > 0"),
            (0 <= self.beta1 <= 1, "beta1 must be in [0, 1]"),
            (0 < self.beta2 < 1, "beta2 must be in (0, 1)"),
            (self.prior_prec >= 0, "prior_prec must be >= 0"),
            (self.damping >= 0, "damping must be >= 0"),
            (0 < self.tau <= 1, "tau must be in (0, 1]"),
            (self.tau_init is None or 0 < self.tau_init <= 1, "tau_init must be in (0, 1]"),
            (self.mc_samples >= 1, "mc_samples must be >= 1"),
            (self.rho >= 1, "rho must be >= 1"),
            (self.eps > 0, "eps must be > 0"),
            (self.decay_factor > 0, "decay_factor must be > 0"),
            (self.weight_decay >= 0 and self.l2 >= 0, "weight_decay and l2 must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def delta_tilde(prior_prec, tau, n_eff):
    """Per-example prior precision ``tau * delta / N``."""
    return tau * prior_prec / n_eff


@dataclass
class Prior:
    """Gaussian prior in per-example units: ``mean`` and ``prec = precision / N``.

    The isotropic prior ``N(0, I/delta)`` has ``prec = tau*delta/N`` on every
    Bayesian weight and zero on batchnorm parameters.
    """

    mean: list
    prec: list

    @classmethod
    def isotropic(cls, params, bayesian, dtilde):
        return cls(
            [np.zeros_like(p) for p in params],
            [np.full_like(p, dtilde if b else 0.0) for p, b in zip(params, bayesian)],
        )

    def grad(self, params):
        return [pr * (w - mu) for w, mu, pr in zip(params, self.mean, self.prec)]


@dataclass
class OptimizerState:
    m: list
    s: list
    step: int = 0
    n_eff: float = 1.0
    tau: float = 1.0
    dtilde: float = 0.0
    kfac: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, params, n_eff=1.0, hp=None, tau=None):
        hp = hp or Hyperparams()
        tau = hp.tau if tau is None else tau
        state = cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], n_eff=n_eff)
        state.set_tempering(tau, hp.prior_prec)
        return state

    def set_tempering(self, tau, prior_prec, n_eff=None):
        """Update ``tau`` (and optionally ``N``) and recompute ``delta_tilde``."""
        if n_eff is not None:
            self.n_eff = n_eff
        self.tau = tau
        self.dtilde = delta_tilde(prior_prec, tau, self.n_eff)

    def tensors(self):
        """Named arrays for checkpointing."""
        out = {}
        for j, (m, s) in enumerate(zip(self.m, self.s)):
            out[f"m.{j}"] = m
            out[f"s.{j}"] = s
        for li, fac in self.kfac.items():
            for k, v in fac.items():
                out[f"kfac.{li}.{k}"] = v
        return out

    def meta(self):
        return {"step": self.step, "n_eff": self.n_eff, "tau": self.tau, "dtilde": self.dtilde}

    @classmethod
    def from_tensors(cls, tensors, meta):
        n = len([k for k in tensors if k.startswith("m.")])
        state = cls([tensors[f"m.{j}"] for j in range(n)], [tensors[f"s.{j}"] for j in range(n)])
        state.step, state.n_eff = meta["step"], meta["n_eff"]
        state.tau, state.dtilde = meta["tau"], meta["dtilde"]
        for k, v in tensors.items():
            if k.startswith("kfac."):
                _, li, name = k.split(".")
                state.kfac.setdefault(int(li), {})[name] = v
        return state


def _check_grads(grads, names=None):
    for j, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[j] if names else f"parameter block {j}"
            raise FloatingPointError(f"non-finite gradient in {label}")


def _masked(values, mask, coef):
    if mask is None:
        return [coef * v for v in values]
    return [coef * v if keep else np.zeros_like(v) for v, keep in zip(values, mask)]


def sgd_step(params, grads, state, hp, lr=None, decay_mask=None, names=None):
    """Heavy-ball SGD with optional L2 (added to the gradient) and decoupled weight decay."""
    _check_grads(grads, names)
    lr = hp.lr if lr is None else lr
    l2 = _masked(params, decay_mask, hp.l2)
    wd = _masked(params, decay_mask, hp.weight_decay)
    out = []
    for j, (w, g) in enumerate(zip(params, grads)):
        state.m[j] = hp.beta1 * state.m[j] + (g + l2[j])
        out.append(w - lr * state.m[j] - lr * wd[j])
    state.step += 1
    return out


def adam_step(params, grads, state, hp, lr=None, decay_mask=None, names=None):
    """Adam in the adaptive-scaling form ``w <- w - lr * g / (sqrt(s) + eps)``.

    ``g`` includes the L2 term ``l2 * w``. No bias correction unless
    ``hp.bias_correction`` is set (standard Adam, for comparison only).
    """
    _check_grads(grads, names)
    lr = hp.lr if lr is None else lr
    l2 = _masked(params, decay_mask, hp.l2)
    wd = _masked(params, decay_mask, hp.weight_decay)
    state.step += 1
    t = state.step
    out = []
    for j, (w, g) in enumerate(zip(params, grads)):
        gr = g + l2[j]
        state.m[j] = (1 - hp.beta1) * state.m[j] + hp.beta1 * gr
        state.s[j] = (1 - hp.beta2) * state.s[j] + hp.beta2 * gr * gr
        m, s = state.m[j], state.s[j]
        if hp.bias_correction:
            m = m / (1 - (1 - hp.beta1) ** t)
            s = s / (1 - (1 - hp.beta2) ** t)
        out.append(w - lr * m / (np.sqrt(s) + hp.eps) - lr * wd[j])
    return out


def _gauss_newton_update(mu, g_hat, h_hat, state, hp, prior, lr, names):
    _check_grads(g_hat, names)
    lr = hp.lr if lr is None else lr
    if prior is None:
        prior = Prior.isotropic(mu, [True] * len(mu), state.dtilde)
    prior_grad = prior.grad(mu)
    out = []
    for j, w in enumerate(mu):
        h = h_hat[j]
        if np.any(h < 0):
            raise ValueError(f"negative curvature estimate in block {j}")
        state.m[j] = hp.beta1 * state.m[j] + (g_hat[j] + prior_grad[j])
        state.s[j] = (1 - state.tau * hp.beta2) * state.s[j] + hp.beta2 * h
        denom = state.s[j] + prior.prec[j] + hp.damping
        if np.any(denom <= 0):
            raise FloatingPointError(f"non-positive preconditioner in block {j}")
        out.append(w - lr * state.m[j] / denom)
    state.step += 1
    return out


def vogn_step(mu, g_hat, h_hat, state, hp, prior=None, lr=None, names=None):
    """One VOGN update of the posterior mean from sampled-weight statistics.

    ``g_hat`` and ``h_hat`` are the minibatch mean gradient and mean squared
    per-example gradient at weights drawn from the current posterior::

        m  <- beta1*m + (g_hat + prior_prec*(mu - prior_mean))
        s  <- (1 - tau*beta2)*s + beta2*h_hat
        mu <- mu - lr * m / (s + prior_prec + damping)

    With the default isotropic prior ``prior_prec = state.dtilde`` and
    ``prior_mean = 0``. There is no square root on ``s``. Mutates ``state``.
    """
    return _gauss_newton_update(mu, g_hat, h_hat, state, hp, prior, lr, names), state


def ogn_step(w, g_hat, h_hat, state, hp, prior=None, lr=None, names=None):
    """Online Gauss-Newton: the VOGN update with statistics taken at the mean.

    Converges to a regularised minimum with a Laplace-style covariance
    ``1 / (N (s + prior_prec + damping))``.
    """
    return _gauss_newton_update(w, g_hat, h_hat, state, hp, prior, lr, names)


def init_scale(model, x, y, params=None):
    """Initial scale ``s0``: mean squared per-example gradient on the first minibatch."""
    from .network import backward_per_example, forward, gauss_newton_diag, loss_and_grad

    logits, cache = forward(model, x, "train", params=params, update_running=False)
    _, d = loss_and_grad(logits, y)
    return gauss_newton_diag(backward_per_example(model, cache, d))


def initial_variance(s0, tau, n_eff, dtilde):
    """``sigma0**2 = tau / (N (s0 + delta_tilde))``."""
    return [tau / (n_eff * (s + dtilde)) for s in s0]


def schedule_step(epoch, hp):
    """Learning rate and tempering parameter for ``epoch`` (0-based).

    The learning rate ramps linearly from ``lr_init`` to ``lr`` over
    ``lr_warmup_epochs`` and is divided by ``decay_factor`` at each epoch in
    ``decay_epochs``. ``tau`` ramps linearly from ``tau_init`` to ``hp.tau``
    over ``tau_warmup_epochs``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if hp.lr_init is not None and epoch < hp.lr_warmup_epochs:
        lr = hp.lr_init + (hp.lr - hp.lr_init) * epoch / hp.lr_warmup_epochs
    else:
        lr = hp.lr
    n_decays = sum(1 for e in hp.decay_epochs if epoch >= e)
    lr = lr / hp.decay_factor**n_decays
    if hp.tau_init is not None and epoch < hp.tau_warmup_epochs:
        tau = hp.tau_init + (hp.tau - hp.tau_init) * epoch / hp.tau_warmup_epochs
    else:
        tau = hp.tau
    return lr, tau


# -- Noisy K-FAC --------------------------------------------------------------

def kfac_pi(A, S):
    """Damping split ``pi = sqrt(avg_eig(A) / avg_eig(S))`` via traces."""
    avg_a = np.trace(A) / A.shape[0]
    avg_s = np.trace(S) / S.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        pi = np.sqrt(avg_a / avg_s)
    if not np.isfinite(pi) or pi <= 0:
        raise FloatingPointError(f"damping split is not finite/positive (avg eig A={avg_a}, S={avg_s})")
    return float(pi)


def damped_factors(A, S, damping):
    pi = kfac_pi(A, S)
    r = np.sqrt(damping)
    return A + pi * r * np.eye(A.shape[0]), S + (r / pi) * np.eye(S.shape[0])


def _chol(X, name):
    if not np.allclose(X, X.T, rtol=1e-10, atol=1e-12):
        raise linalg.LinAlgError(f"{name} is not symmetric")
    try:
        return linalg.cho_factor(X, lower=True)
    except linalg.LinAlgError:
        raise linalg.LinAlgError(f"{name} is not positive definite") from None


def kfac_stats(a, g):
    """Minibatch second moments ``E[a a^T]`` and ``E[g g^T]`` from per-example rows."""
    m = a.shape[0]
    return (a.T @ a) / m, (g.T @ g) / m


def noisy_kfac_step(W, A, S, aa, gg, grad, hp, n_eff, tau=None, lr=None, dtilde=None):
    """One Noisy K-FAC update of a dense layer's mean ``W`` (``[out, in+1]``).

    ``aa`` and ``gg`` are the minibatch averages of ``a a^T`` over the layer's
    ones-extended inputs and of ``g g^T`` over per-example gradients w.r.t. its
    pre-activations (see :func:`kfac_stats`); ``grad`` is the minibatch
    gradient for ``W``. Factors move with rate ``beta2 * tau / N`` and are
    damped as ``A + pi*sqrt(damping)*I`` and ``S + sqrt(damping)/pi*I``.
    Returns ``(W', A', S')``.
    """
    tau = hp.tau if tau is None else tau
    lr = hp.lr if lr is None else lr
    dtilde = delta_tilde(hp.prior_prec, tau, n_eff) if dtilde is None else dtilde
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient in K-FAC layer")
    bt = hp.beta2 * tau / n_eff
    A = (1 - bt) * A + bt * aa
    S = (1 - bt) * S + bt * gg
    A = 0.5 * (A + A.T)
    S = 0.5 * (S + S.T)
    Ag, Sg = damped_factors(A, S, hp.damping)
    ca, cs = _chol(Ag, "damped A factor"), _chol(Sg, "damped S factor")
    # W is [out, in]: the output-side factor acts on the left, the input-side on the right
    step = linalg.cho_solve(cs, grad + dtilde * W)
    step = linalg.cho_solve(ca, step.T).T
    return W - lr * step, A, S
