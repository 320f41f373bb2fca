"""Simulated data- and MC-parallel gradient computation.

Workers are threads. Each gets a contiguous slice of the global minibatch,
draws its own weight samples, computes per-example gradients and returns a
contribution; the coordinator averages contributions in a fixed tree order.

Contributions are scaled by ``P / M`` (sum over the local slice times the
worker count over the global batch size) so that their plain mean is the
global minibatch mean even when local slices differ in size.

Two RNG modes are supported:

``"example"``
    every example draws its own weights from a stream keyed by
    ``(seed, step, example_id, sample)``. The reduced statistics then do not
    depend on how the batch is split.
``"worker"``
    one draw per worker and MC sample, shared by the worker's slice. Results
    agree across worker counts only in distribution.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .network import backward, backward_per_example, forward, loss_and_grad
from .posterior import sample_weights
from .tensor import RngStream, derive_stream_id


@dataclass
class WorkerPlan:
    n_workers: int = 1
    mc_samples: int = 1
    rng_mode: str = "example"
    seed: int = 0

    def __post_init__(self):
        if self.n_workers < 1 or self.mc_samples < 1:
            raise ValueError("n_workers and mc_samples must be >= 1")
        if self.rng_mode not in ("example", "worker"):
            raise ValueError(f"rng_mode must be 'example' or 'worker', got {self.rng_mode!r}")

    def stream(self, step, key, sample):
        return RngStream(self.seed, derive_stream_id(step, key, sample))


def split_sizes(m, p):
    if p < 1:
        raise ValueError("need at least one worker")
    if p > m:
        raise ValueError(f"cannot split a batch of {m} across {p} workers")
    base, rem = divmod(m, p)
    return [base + (1 if k < rem else 0) for k in range(p)]


def split_minibatch(batch, p):
    """Split along the leading axis into ``p`` contiguous parts; sizes differ by at most one."""
    sizes = split_sizes(len(batch), p)
    bounds = np.cumsum([0] + sizes)
    return [batch[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def _tree_sum(items):
    items = list(items)
    while len(items) > 1:
        nxt = [_add(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _add(a, b):
    if isinstance(a, dict):
        return {k: _add(a[k], b[k]) for k in a}
    if isinstance(a, (list, tuple)):
        return type(a)(_add(x, y) for x, y in zip(a, b))
    return a + b


def _scale(a, c):
    if isinstance(a, dict):
        return {k: _scale(v, c) for k, v in a.items()}
    if isinstance(a, (list, tuple)):
        return type(a)(_scale(x, c) for x in a)
    return a * c


def _shapes(a):
    if isinstance(a, dict):
        return {k: _shapes(v) for k, v in a.items()}
    if isinstance(a, (list, tuple)):
        return [_shapes(x) for x in a]
    return np.shape(a)


def all_reduce_mean(contributions):
    """Elementwise mean of per-worker contributions, summed pairwise in worker order.

    Each contribution is typically a ``(g_hat, h_hat)`` pair of parameter
    lists; any nesting of lists/tuples/dicts of arrays is accepted.
    """
    contributions = list(contributions)
    if not contributions:
        raise ValueError("nothing to reduce")
    ref = _shapes(contributions[0])
    for c in contributions[1:]:
        if _shapes(c) != ref:
            raise ValueError("contribution shapes differ across workers")
    return _scale(_tree_sum(contributions), 1.0 / len(contributions))


@dataclass
class StepResult:
    g_hat: list
    h_hat: list | None
    loss: float
    bn_stats: dict
    kfac: dict = field(default_factory=dict)
    seconds: float = 0.0


def _draw(post, plan, step, worker, k, ids, zero_noise):
    if isinstance(post, list):
        return post
    if plan.rng_mode == "worker":
        return sample_weights(post, plan.stream(step, worker, k), zero_noise=zero_noise)
    draws = [sample_weights(post, plan.stream(step, int(i), k), zero_noise=zero_noise) for i in ids]
    out = []
    for j, mu in enumerate(post.mean):
        if draws[0][j] is mu:
            out.append(mu)
        else:
            out.append(np.stack([d[j] for d in draws]))
    return out


def _worker(model, post, x, y, ids, plan, step, worker, m_global, curvature, kfac_layers, zero_noise):
    scale = plan.n_workers / (m_global * plan.mc_samples)
    g_sum = h_sum = None
    kfac = {li: {"aa": 0.0, "gg": 0.0} for li in kfac_layers}
    stats, loss = [], 0.0
    for k in range(plan.mc_samples):
        w = _draw(post, plan, step, worker, k, ids, zero_noise)
        logits, cache = forward(model, x, "train", params=w, update_running=False)
        nll, d = loss_and_grad(logits, y)
        loss += nll * len(y)
        stats.append(cache.bn_stats)
        if curvature or kfac_layers or any(p.ndim != q.ndim for p, q in zip(w, model.params)):
            pe = backward_per_example(model, cache, d)
            g = [gi.sum(axis=0) for gi in pe.grads]
            h = [(gi * gi).sum(axis=0) for gi in pe.grads] if curvature else None
            for li in kfac_layers:
                a, gs = pe.inputs[li], pe.preact[li]
                kfac[li]["aa"] = kfac[li]["aa"] + a.T @ a
                kfac[li]["gg"] = kfac[li]["gg"] + gs.T @ gs
        else:
            g = [gi * len(y) for gi in backward(model, cache, d)]
            h = None
        g_sum = g if g_sum is None else _add(g_sum, g)
        if h is not None:
            h_sum = h if h_sum is None else _add(h_sum, h)
    out = {"g": _scale(g_sum, scale), "loss": loss * scale}
    if h_sum is not None:
        out["h"] = _scale(h_sum, scale)
    if kfac_layers:
        out["kfac"] = _scale(kfac, scale)
    return out, stats


def _merge_bn_stats(all_stats):
    """Count-weighted average of batch statistics over workers and samples."""
    merged = {}
    flat = [s for worker in all_stats for s in worker]
    for i in flat[0] if flat else {}:
        total = sum(s[i][2] for s in flat)
        mean = sum(s[i][0] * s[i][2] for s in flat) / total
        var = sum(s[i][1] * s[i][2] for s in flat) / total
        merged[i] = (mean, var, total)
    return merged


def parallel_step(model, post, x, y, plan, step=0, example_ids=None, curvature=True,
                  kfac_layers=(), zero_noise=False, pool=None):
    """Mean gradient and Gauss-Newton diagonal over a global minibatch.

    ``post`` is a posterior to sample from or a plain parameter list
    (gradients at fixed weights). ``example_ids`` key the per-example RNG;
    they default to positions in the batch. Batch-norm statistics are returned
    for the coordinator to fold into the running averages.
    """
    t0 = time.perf_counter()
    m = len(y)
    ids = np.arange(m) if example_ids is None else np.asarray(example_ids)
    parts = list(zip(split_minibatch(x, plan.n_workers), split_minibatch(y, plan.n_workers),
                     split_minibatch(ids, plan.n_workers)))

    def run(k):
        xk, yk, ik = parts[k]
        return _worker(model, post, xk, yk, ik, plan, step, k, m, curvature, tuple(kfac_layers), zero_noise)

    if plan.n_workers == 1:
        results = [run(0)]
    elif pool is not None:
        results = list(pool.map(run, range(plan.n_workers)))
    else:
        with ThreadPoolExecutor(max_workers=plan.n_workers) as ex:
            results = list(ex.map(run, range(plan.n_workers)))
    contribs = [r[0] for r in results]
    reduced = all_reduce_mean(contribs)
    return StepResult(
        g_hat=reduced["g"],
        h_hat=reduced.get("h"),
        loss=float(reduced["loss"]),
        bn_stats=_merge_bn_stats([r[1] for r in results]),
        kfac=reduced.get("kfac", {}),
        seconds=time.perf_counter() - t0,
    )
