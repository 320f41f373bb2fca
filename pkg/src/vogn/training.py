"""Training loop shared by every optimizer."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import augment, effective_n, minibatches
from .network import accuracy
from .optimizers import (
    OptimizerState,
    Prior,
    adam_step,
    damped_factors,
    init_scale,
    noisy_kfac_step,
    ogn_step,
    schedule_step,
    sgd_step,
    vogn_step,
)
from .parallel import WorkerPlan, parallel_step
from .posterior import GaussianPosterior, KroneckerPosterior, predict_mc
from .tensor import RngStream

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam", "ogn", "vogn", "noisy-kfac")

# fixed stream tags under the root seed
_SHUFFLE, _AUGMENT, _EVAL, _SAMPLE = 1, 2, 3, 4


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, step, detail=""):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainResult:
    model: object
    optimizer: str
    state: OptimizerState
    prior: Prior | None
    history: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    hp: object = None

    def posterior(self):
        return make_posterior(self.model, self.optimizer, self.state, self.hp, self.prior)


def make_posterior(model, optimizer, state, hp, prior=None):
    """Posterior used for prediction: Gaussian for VOGN, matrix-variate for
    Noisy K-FAC, the mean weights otherwise."""
    if optimizer == "vogn":
        return GaussianPosterior.from_state(model, state, hp.damping, prior=prior)
    if optimizer == "noisy-kfac":
        factors = {li: damped_factors(f["A"], f["S"], hp.damping) for li, f in state.kfac.items()}
        return KroneckerPosterior(model, model.params, factors, state.tau, state.n_eff)
    return list(model.params)


def _eval_split(model, post, data, n_samples, rng):
    from .metrics import nll

    probs = predict_mc(model, post, data.x, n_samples, rng)
    return accuracy(probs, data.y), nll(probs, data.y)


def train(model, data, hp, optimizer="vogn", epochs=10, batch_size=64, plan=None, seed=0,
          val_data=None, val_samples=10, prior=None, s_init=None, augmentation=None,
          zero_noise=False, eval_every=1, eval_train=True, callback=None):
    """Train ``model`` in place on ``data`` and return a :class:`TrainResult`.

    ``prior`` replaces the isotropic ``N(0, I/prior_prec)`` prior (VOGN/OGN
    only). ``s_init`` sets the initial scale: a scalar, a list of arrays, or
    ``None`` to use the mean squared per-example gradient of the first
    minibatch. ``zero_noise`` runs VOGN with the sampling noise forced to 0.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; choose from {OPTIMIZERS}")
    plan = plan or WorkerPlan(mc_samples=hp.mc_samples, seed=seed)
    root = RngStream(seed)
    shuffle_rng = root.child(_SHUFFLE)
    aug_rng = root.child(_AUGMENT)
    n_eff = effective_n(len(data), hp.rho)
    lr0, tau0 = schedule_step(0, hp)
    state = OptimizerState.zeros(model.params, n_eff, hp, tau=tau0)
    fixed_prior = prior
    kfac_layers = []
    if optimizer == "noisy-kfac":
        kfac_layers = [i for i, l in enumerate(model.layers) if l.kind == "dense"]
        if any(model.layers[li].kind != "dense" for li in model.param_layer):
            raise ValueError("noisy-kfac supports dense layers only")
    mask = list(model.bayesian)
    result = TrainResult(model, optimizer, state, prior, hp=hp)
    step = 0
    drop_last = bool(model.running) and len(data) % batch_size == 1

    def current_prior():
        if fixed_prior is not None:
            return fixed_prior
        return Prior.isotropic(model.params, model.bayesian, state.dtilde)

    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr, tau = schedule_step(epoch, hp)
        state.set_tempering(tau, hp.prior_prec)
        loss_sum, seen = 0.0, 0
        for idx in minibatches(len(data), batch_size, shuffle_rng, drop_last=drop_last):
            xb, yb = data.x[idx], data.y[idx]
            if augmentation is not None:
                xb = augment(xb, augmentation, aug_rng)
            if step == 0 and optimizer in ("vogn", "ogn"):
                _init_scale(model, state, xb, yb, s_init)
            if step == 0 and optimizer == "noisy-kfac":
                _init_kfac(model, state, xb, yb, plan, kfac_layers)
            pr = current_prior()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res = _step(model, state, optimizer, pr, hp, lr, xb, yb, idx, plan, step, n_eff,
                                zero_noise, kfac_layers, mask)
            except (FloatingPointError, np.linalg.LinAlgError) as e:
                raise DivergenceError(epoch, step, str(e)) from e
            if any(not np.all(np.isfinite(p)) for p in model.params):
                raise DivergenceError(epoch, step, "parameters became non-finite")
            if res.bn_stats:
                model.update_running(res.bn_stats)
            result.timings.append({"epoch": epoch, "step": step, "batch": len(idx), "seconds": res.seconds})
            loss_sum += res.loss * len(idx)
            seen += len(idx)
            step += 1
        row = {"epoch": epoch, "lr": lr, "tau": tau, "train_loss": loss_sum / max(seen, 1)}
        if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
            post = result.posterior()
            erng = root.child(_EVAL, epoch)
            if eval_train:
                row["train_acc"], row["train_nll"] = _eval_split(model, post, data, _n_eval(optimizer, val_samples), erng)
            if val_data is not None:
                row["val_acc"], row["val_nll"] = _eval_split(model, post, val_data, _n_eval(optimizer, val_samples), erng)
        row["seconds"] = time.perf_counter() - t0
        result.history.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if callback is not None:
            callback(row, result)
    result.prior = fixed_prior if fixed_prior is not None else current_prior()
    return result


def _step(model, state, optimizer, pr, hp, lr, xb, yb, idx, plan, step, n_eff, zero_noise, kfac_layers, mask):
    if optimizer == "vogn":
        post = GaussianPosterior(list(model.params), state.s, pr, hp.damping, n_eff, model.bayesian)
        res = parallel_step(model, post, xb, yb, plan, step, example_ids=idx, zero_noise=zero_noise)
    elif optimizer == "noisy-kfac":
        post = make_posterior(model, optimizer, state, hp)
        res = parallel_step(model, post, xb, yb, plan, step, example_ids=idx, curvature=False,
                            kfac_layers=kfac_layers, zero_noise=zero_noise)
    else:
        res = parallel_step(model, list(model.params), xb, yb, _point_plan(plan), step,
                            example_ids=idx, curvature=optimizer == "ogn")
    if not np.isfinite(res.loss):
        raise FloatingPointError("non-finite loss")
    names = model.param_names
    if optimizer == "vogn":
        model.params, _ = vogn_step(model.params, res.g_hat, res.h_hat, state, hp, pr, lr, names)
    elif optimizer == "ogn":
        model.params = ogn_step(model.params, res.g_hat, res.h_hat, state, hp, pr, lr, names)
    elif optimizer == "adam":
        model.params = adam_step(model.params, res.g_hat, state, hp, lr, mask, names)
    elif optimizer == "sgd":
        model.params = sgd_step(model.params, res.g_hat, state, hp, lr, mask, names)
    else:
        _kfac_update(model, state, res, hp, lr, kfac_layers)
    return res


def _n_eval(optimizer, val_samples):
    return val_samples if optimizer in ("vogn", "noisy-kfac") else 1


def _point_plan(plan):
    return WorkerPlan(plan.n_workers, 1, plan.rng_mode, plan.seed)


def _init_scale(model, state, xb, yb, s_init):
    if s_init is None:
        state.s = init_scale(model, xb, yb)
    elif np.isscalar(s_init):
        state.s = [np.full_like(p, float(s_init)) for p in model.params]
    else:
        state.s = [np.array(s, dtype=float) for s in s_init]


def _init_kfac(model, state, xb, yb, plan, layers):
    res = parallel_step(model, list(model.params), xb, yb, _point_plan(plan), 0,
                        curvature=False, kfac_layers=layers)
    for li in layers:
        state.kfac[li] = {"A": res.kfac[li]["aa"].copy(), "S": res.kfac[li]["gg"].copy()}


def _kfac_update(model, state, res, hp, lr, layers):
    for j, li in enumerate(model.param_layer):
        fac = state.kfac[li]
        W, A, S = noisy_kfac_step(model.params[j], fac["A"], fac["S"], res.kfac[li]["aa"],
                                  res.kfac[li]["gg"], res.g_hat[j], hp, state.n_eff,
                                  tau=state.tau, lr=lr, dtilde=state.dtilde)
        model.params[j] = W
        fac["A"], fac["S"] = A, S
    state.step += 1
