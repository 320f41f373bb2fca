"""Small feed-forward networks with exact per-example gradients.

Layers are plain dataclasses describing shapes; parameters live in a flat list
on :class:`Network` (one entry per weight tensor) so optimizers can treat the
model as a list of independent blocks.

Dense and conv weights carry the bias as an extra trailing column: a dense
layer stores ``W`` with shape ``[out, in + 1]`` and multiplies the input with
a ones-column appended. Convolutions are computed as ``W @ unfold(A)`` with a
ones-row appended to the unfolded patches, so the same outer-product identity
gives per-example gradients for both.

Any weight may be given with an extra leading batch axis ``[M, ...]`` to use a
different weight sample for every example in the batch.

Batch normalisation statistics are treated as constants in the backward pass.
Under that convention examples decouple, the per-example gradients are exact,
and their mean is the minibatch gradient.
"""
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import DTYPE, conv_output_size, fold_batch, unfold_batch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Dense:
    n_in: int
    n_out: int
    bias: bool = True
    kind: str = field(default="dense", init=False)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ValueError(f"dense expects input ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def param_shapes(self):
        return [("W", (self.n_out, self.n_in + int(self.bias)))]

    def fans(self):
        return self.n_in, self.n_out

    def forward(self, x, params, ctx):
        (W,) = params
        a = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1) if self.bias else x
        if W.ndim == 3:
            s = np.einsum("moi,mi->mo", W, a)
        else:
            s = a @ W.T
        return s, a

    def backward(self, dout, params, a, per_example):
        (W,) = params
        Wx = W[..., : self.n_in]
        if W.ndim == 3:
            dx = np.einsum("mo,moi->mi", dout, Wx)
        else:
            dx = dout @ Wx
        if per_example:
            gW = np.einsum("mo,mi->moi", dout, a)
        else:
            gW = dout.T @ a
        return dx, [gW]


@dataclass
class Conv2d:
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True
    kind: str = field(default="conv2d", init=False)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ValueError(f"conv2d expects ({self.c_in}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        if h + 2 * self.padding < self.kernel or w + 2 * self.padding < self.kernel:
            raise ValueError(f"kernel {self.kernel} larger than padded input {tuple(in_shape)}")
        return (
            self.c_out,
            conv_output_size(h, self.kernel, self.stride, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def param_shapes(self):
        return [("W", (self.c_out, self.c_in * self.kernel**2 + int(self.bias)))]

    def fans(self):
        k2 = self.kernel**2
        return self.c_in * k2, self.c_out * k2

    def forward(self, x, params, ctx):
        (W,) = params
        m, _, h, w = x.shape
        cols = unfold_batch(x, self.kernel, self.stride, self.padding)
        if self.bias:
            cols = np.concatenate([cols, np.ones((m, 1, cols.shape[2]))], axis=1)
        s = np.matmul(W, cols)  # M, C_out, L
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        return s.reshape(m, self.c_out, ho, wo), (cols, x.shape[1:])

    def backward(self, dout, params, cache, per_example):
        (W,) = params
        cols, in_shape = cache
        m = dout.shape[0]
        ds = dout.reshape(m, self.c_out, -1)
        nk = self.c_in * self.kernel**2
        Wx = W[..., :nk]
        if W.ndim == 3:
            dcols = np.matmul(Wx.transpose(0, 2, 1), ds)
        else:
            dcols = np.matmul(Wx.T, ds)
        dx = fold_batch(dcols, in_shape, self.kernel, self.stride, self.padding)
        if per_example:
            gW = np.matmul(ds, cols.transpose(0, 2, 1))
        else:
            gW = np.einsum("mol,mkl->ok", ds, cols)
        return dx, [gW]


@dataclass
class BatchNorm:
    dim: int
    kind: str = field(default="batchnorm", init=False)

    def output_shape(self, in_shape):
        if in_shape[0] != self.dim or len(in_shape) not in (1, 3):
            raise ValueError(f"batchnorm({self.dim}) got input {tuple(in_shape)}")
        return tuple(in_shape)

    def param_shapes(self):
        return [("gamma", (self.dim,)), ("beta", (self.dim,))]

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, self.dim) if x.ndim == 2 else (1, self.dim, 1, 1)

    def forward(self, x, params, ctx):
        gamma, beta = params
        axes, bs = self._axes(x), self._bshape(x)
        if ctx["mode"] == "train":
            if x.shape[0] < 2:
                raise ValueError("batchnorm in train mode needs a batch of at least 2")
            frozen = ctx["bn_stats"]
            if frozen is not None:
                mean, var = frozen[ctx["index"]]
            else:
                mean = x.mean(axis=axes)
                var = ((x - mean.reshape(bs)) ** 2).mean(axis=axes)
            count = x.size // self.dim
            ctx["stats"][ctx["index"]] = (mean, var, count)
        else:
            run = ctx["running"][ctx["index"]]
            mean, var = run["mean"], run["var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        out = gamma.reshape(bs) * xhat + beta.reshape(bs)
        return out, (xhat, inv)

    def backward(self, dout, params, cache, per_example):
        gamma, _ = params
        xhat, inv = cache
        bs = self._bshape(dout)
        dx = dout * (gamma * inv).reshape(bs)
        if per_example:
            red = tuple(range(2, dout.ndim))
            g_gamma = (dout * xhat).sum(axis=red) if red else dout * xhat
            g_beta = dout.sum(axis=red) if red else dout.copy()
        else:
            axes = self._axes(dout)
            g_gamma = (dout * xhat).sum(axis=axes)
            g_beta = dout.sum(axis=axes)
        return dx, [g_gamma, g_beta]


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self):
        return []

    def forward(self, x, params, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, params, mask, per_example):
        return dout * mask, []


@dataclass
class Flatten:
    kind: str = field(default="flatten", init=False)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def param_shapes(self):
        return []

    def forward(self, x, params, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, params, shape, per_example):
        return dout.reshape(shape), []


LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "batchnorm": BatchNorm, "relu": ReLU, "flatten": Flatten}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


def layer_to_dict(layer):
    return asdict(layer)


class Network:
    """An ordered stack of layers plus their parameters.

    ``params`` is a flat list with one array per weight tensor. ``param_layer``
    maps each entry back to its layer index and ``bayesian`` marks the entries
    that carry posterior uncertainty (dense/conv weights; batchnorm scale and
    shift are point estimates).
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.output_shape(self.shapes[-1]))
            except ValueError as err:
                raise ValueError(f"layer {i} ({layer.kind}): {err}") from None
        if len(self.shapes[-1]) != 1:
            raise ValueError(f"network output must be flat, got shape {self.shapes[-1]}")
        self.n_classes = self.shapes[-1][0]
        self.param_names, self.param_layer, self.bayesian = [], [], []
        self.params = []
        for i, layer in enumerate(self.layers):
            for name, shape in layer.param_shapes():
                self.param_names.append(f"{i}.{layer.kind}.{name}")
                self.param_layer.append(i)
                self.bayesian.append(layer.kind in ("dense", "conv2d"))
                if layer.kind == "batchnorm":
                    init = np.ones(shape) if name == "gamma" else np.zeros(shape)
                else:
                    init = np.zeros(shape)
                self.params.append(init.astype(DTYPE))
        self.running = {
            i: {"mean": np.zeros(layer.dim), "var": np.ones(layer.dim)}
            for i, layer in enumerate(self.layers)
            if layer.kind == "batchnorm"
        }
        self.bn_momentum = BN_MOMENTUM

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def init_params(self, rng):
        """Xavier-normal weights, zero biases; batchnorm scale 1 and shift 0."""
        for j, (p, li) in enumerate(zip(self.params, self.param_layer)):
            layer = self.layers[li]
            if layer.kind in ("dense", "conv2d"):
                fan_in, fan_out = layer.fans()
                std = np.sqrt(2.0 / (fan_in + fan_out))
                W = rng.normal(p.shape) * std
                if layer.bias:
                    W[:, -1] = 0.0
                self.params[j] = W
        return self

    def layer_params(self, params, i):
        return [p for p, li in zip(params, self.param_layer) if li == i]

    def copy(self):
        other = Network(self.layers, self.input_shape)
        other.params = [p.copy() for p in self.params]
        other.running = {i: {k: v.copy() for k, v in r.items()} for i, r in self.running.items()}
        other.bn_momentum = self.bn_momentum
        return other

    def spec(self):
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_spec(cls, spec):
        return cls([layer_from_dict(d) for d in spec["layers"]], spec["input_shape"])

    def update_running(self, stats):
        """Fold batch statistics ``{layer: (mean, var, count)}`` into the running averages.

        The running variance uses the unbiased estimate ``var * n / (n - 1)``.
        """
        mom = self.bn_momentum
        for i, (mean, var, count) in stats.items():
            run = self.running[i]
            unbiased = var * count / max(count - 1, 1)
            run["mean"] = (1 - mom) * run["mean"] + mom * mean
            run["var"] = (1 - mom) * run["var"] + mom * unbiased


@dataclass
class ForwardCache:
    params: list
    layer_inputs: list
    layer_caches: list
    batch_size: int
    mode: str
    bn_stats: dict


class PerExampleGrads:
    """Per-example gradients: ``grads[j]`` has shape ``[M, *params[j].shape]``.

    ``preact`` maps each dense layer index to the per-example gradient with
    respect to its output pre-activations (``[M, out]``), and ``inputs`` to its
    ones-extended input (``[M, in + 1]``); Kronecker-factored methods use them.
    """

    def __init__(self, grads, preact=None, inputs=None):
        self.grads = grads
        self.preact = preact or {}
        self.inputs = inputs or {}

    def __len__(self):
        return len(self.grads)

    def __getitem__(self, j):
        return self.grads[j]

    @property
    def batch_size(self):
        return self.grads[0].shape[0]

    def mean(self):
        return [g.mean(axis=0) for g in self.grads]

    def flat(self, j):
        g = self.grads[j]
        return g.reshape(g.shape[0], -1)


def forward(model, x, mode="train", params=None, bn_stats=None, update_running=True):
    """Run the network on ``x``. Returns ``(logits, cache)``.

    In train mode batchnorm uses batch statistics (or ``bn_stats`` if given,
    which are then treated as fixed) and, when ``update_running`` is true,
    folds them into the running averages. Eval mode reads the running
    statistics and never changes them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ValueError("batch must have a leading dimension of at least 1")
    if tuple(x.shape[1:]) != model.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {model.input_shape}")
    params = model.params if params is None else params
    if len(params) != len(model.params):
        raise ValueError("parameter list does not match network")
    ctx = {"mode": mode, "bn_stats": bn_stats, "stats": {}, "running": model.running}
    inputs, caches = [], []
    h = x
    for i, layer in enumerate(model.layers):
        ctx["index"] = i
        inputs.append(h)
        h, c = layer.forward(h, model.layer_params(params, i), ctx)
        caches.append(c)
    if mode == "train" and update_running and bn_stats is None:
        model.update_running(ctx["stats"])
    cache = ForwardCache(params, inputs, caches, x.shape[0], mode, ctx["stats"])
    return h, cache


def _as_indices(labels, k):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label index out of range [0, {k})")
    return labels


def log_softmax(logits):
    top = logits.argmax(axis=1)
    rows = np.arange(logits.shape[0])
    z = logits - logits[rows, top][:, None]
    e = np.exp(z)
    e[rows, top] = 0.0  # log1p of the non-max mass keeps confident rows accurate
    return z - np.log1p(e.sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def per_example_nll(logits, labels):
    labels = _as_indices(labels, logits.shape[1])
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def loss_and_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / M``."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    m, k = logits.shape
    idx = _as_indices(labels, k)
    logp = log_softmax(logits)
    nll = -logp[np.arange(m), idx].mean()
    d = np.exp(logp)
    d[np.arange(m), idx] -= 1.0
    return float(nll), d / m


def _backward(model, cache, upstream, per_example):
    if upstream.shape[0] != cache.batch_size:
        raise ValueError(f"gradient batch {upstream.shape[0]} does not match cache batch {cache.batch_size}")
    grads = [None] * len(model.params)
    preact, inputs = {}, {}
    owner = {}
    for j, li in enumerate(model.param_layer):
        owner.setdefault(li, []).append(j)
    d = upstream
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        lp = model.layer_params(cache.params, i)
        if layer.kind == "dense":
            preact[i] = d
            inputs[i] = cache.layer_caches[i]
        d, g = layer.backward(d, lp, cache.layer_caches[i], per_example)
        for j, gj in zip(owner.get(i, []), g):
            grads[j] = gj
    return grads, preact, inputs


def backward(model, cache, dlogits):
    """Standard minibatch backprop: gradient of the mean loss for every parameter.

    Shared weights only; with per-example weight samples use
    :func:`backward_per_example` and average.
    """
    if any(p.ndim != q.ndim for p, q in zip(cache.params, model.params)):
        raise ValueError("batched backward needs shared (non per-example) weights")
    grads, _, _ = _backward(model, cache, np.asarray(dlogits, dtype=DTYPE), per_example=False)
    return grads


def backward_per_example(model, cache, dlogits):
    """Exact gradient of every example's own loss for every parameter.

    ``dlogits`` is the gradient of the *mean* loss (as returned by
    :func:`loss_and_grad`); it is rescaled by ``M`` so each row is the gradient
    of one example's loss.
    """
    if cache.mode != "train" and model.running:
        raise ValueError("per-example gradients need a train-mode forward cache")
    dlogits = np.asarray(dlogits, dtype=DTYPE)
    upstream = dlogits * dlogits.shape[0]
    grads, preact, inputs = _backward(model, cache, upstream, per_example=True)
    for j, (g, p) in enumerate(zip(grads, model.params)):
        if g.shape[1:] != p.shape:
            grads[j] = g.reshape((g.shape[0],) + p.shape)
    return PerExampleGrads(grads, preact, inputs)


def gauss_newton_diag(grads):
    """Diagonal Gauss-Newton estimate ``(1/M) sum_i g_i**2`` per parameter.

    Squares each example's gradient before averaging, unlike the
    squared-mean-gradient used by Adam.
    """
    gs = grads.grads if isinstance(grads, PerExampleGrads) else grads
    if len(gs) == 0 or gs[0].shape[0] == 0:
        raise ValueError("empty per-example gradients")
    return [np.mean(g * g, axis=0) for g in gs]


def accuracy(logits_or_probs, labels):
    labels = _as_indices(labels, logits_or_probs.shape[1])
    return float(np.mean(np.argmax(logits_or_probs, axis=1) == labels))


def mlp(sizes, batchnorm=False):
    """Dense-ReLU stack; ``sizes = [in, hidden..., out]``."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            if batchnorm:
                layers.append(BatchNorm(b))
            layers.append(ReLU())
    return Network(layers, (sizes[0],))
