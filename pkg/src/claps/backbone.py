"""ReLU MLP feature extractor with point, scale and quantile-pair heads.

The network is ``x -> standardize -> [Linear -> ReLU] * L -> head``. The
output of the last ReLU is the feature map ``phi(x)`` used by the Laplace
head and by every baseline. Training is plain minibatch Adam, seeded and
single threaded, so a fixed ``(spec, data, config)`` always reproduces the
same weights bit for bit.

Auxiliary heads (positive scale, quantile pair) are fitted by
:func:`train_head` on the frozen features of an already trained backbone,
which keeps ``phi`` identical across all conformal methods.
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .exceptions import DimensionMismatch, EmptyData, IncompatibleHeadLoss

HEADS = ("point", "scale", "quantile_pair")
LOSS_FOR_HEAD = {"point": "mse", "scale": "scale_abs", "quantile_pair": "pinball_pair"}
SCALE_FLOOR = 1e-3
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (128, 128)
    activation: str = "relu"
    head: str = "point"
    quantile_levels: tuple = (0.05, 0.95)

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "quantile_levels", tuple(float(q) for q in self.quantile_levels))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a nonempty sequence of positive widths")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        lo, hi = self.quantile_levels
        if not 0 < lo < hi < 1:
            raise ValueError(f"quantile levels must satisfy 0 < lo < hi < 1, got {self.quantile_levels}")

    @property
    def feature_dim(self):
        return self.hidden_widths[-1]

    @property
    def n_outputs(self):
        return 2 if self.head == "quantile_pair" else 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainedBackbone:
    """Weights plus the input/target normalization they were trained with.

    ``hidden_weights[i]`` has shape (fan_in, fan_out); ``head_weight`` has
    shape (d, n_outputs). Treat instances as immutable.
    """

    spec: MlpSpec
    hidden_weights: list
    hidden_biases: list
    head_weight: np.ndarray
    head_bias: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_center: float
    seed: int
    loss_history: list = field(default_factory=list)
    final_loss: float = float("nan")

    def standardize(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.spec.input_dim:
            raise DimensionMismatch(f"expected {self.spec.input_dim} input features, got {x.shape[1]}")
        return (x - self.x_mean) / self.x_std


def pinball_loss(level, y, q):
    """Check loss ``level*(y-q)`` if ``y >= q`` else ``(level-1)*(y-q)``; vectorized."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    diff = np.asarray(y, dtype=float) - np.asarray(q, dtype=float)
    out = np.where(diff >= 0, level * diff, (level - 1) * diff)
    return float(out) if out.ndim == 0 else out


def softplus(x):
    return np.logaddexp(0.0, x)


def _standard_stats(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def init_params(spec, seed):
    """He-normal hidden layers, zero biases, ``N(0, 1/d)`` head."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    weights, biases = [], []
    fan_in = spec.input_dim
    for width in spec.hidden_widths:
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width)))
        biases.append(np.zeros(width))
        fan_in = width
    head_w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, spec.n_outputs))
    head_b = np.zeros(spec.n_outputs)
    return weights, biases, head_w, head_b


def _hidden_forward(weights, biases, xs):
    acts = [xs]
    h = xs
    for w, b in zip(weights, biases):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    return acts


def _backward(weights, head_w, acts, g_out, g_ws, g_bs, g_head_w, g_head_b):
    """Backpropagate ``g_out`` into the preallocated gradient buffers."""
    np.matmul(acts[-1].T, g_out, out=g_head_w)
    np.sum(g_out, axis=0, out=g_head_b)
    g_h = g_out @ head_w.T
    for i in range(len(weights) - 1, -1, -1):
        g_z = g_h * (acts[i + 1] > 0)
        np.matmul(acts[i].T, g_z, out=g_ws[i])
        np.sum(g_z, axis=0, out=g_bs[i])
        if i:
            g_h = g_z @ weights[i].T


def _loss_and_grad(loss, head, out, target, levels):
    """Mean loss over the batch and its gradient w.r.t. the raw head output."""
    n = out.shape[0]
    if loss == "mse":
        r = out[:, 0] - target
        return float(np.mean(r * r)), (2.0 / n) * r[:, None]
    if loss == "scale_abs":
        h = softplus(out[:, 0])
        r = h - target
        return float(np.mean(r * r)), ((2.0 / n) * r * expit(out[:, 0]))[:, None]
    if loss == "pinball_pair":
        grad = np.empty_like(out)
        total = 0.0
        for j, level in enumerate(levels):
            diff = target - out[:, j]
            above = diff >= 0
            total += np.sum(np.where(above, level * diff, (level - 1) * diff))
            grad[:, j] = np.where(above, -level, 1.0 - level) / n
        return float(total / n), grad
    raise IncompatibleHeadLoss(f"unknown loss {loss!r}")


def _check_loss(spec, loss):
    if LOSS_FOR_HEAD.get(spec.head) != loss:
        raise IncompatibleHeadLoss(f"loss {loss!r} is not compatible with head {spec.head!r}")


def _fit_target(spec, y, y_center):
    # scale heads regress a nonnegative magnitude; point/quantile heads see centered targets
    return y if spec.head == "scale" else y - y_center


class _FlatParams:
    """Parameters and gradients stored as views into two flat buffers.

    Adam then runs as a handful of whole-buffer operations per step, which
    dominates runtime for small networks.
    """

    def __init__(self, arrays):
        sizes = [a.size for a in arrays]
        self.flat = np.concatenate([a.ravel() for a in arrays])
        self.grad = np.zeros_like(self.flat)
        self.params, self.grads = [], []
        start = 0
        for a, size in zip(arrays, sizes):
            self.params.append(self.flat[start:start + size].reshape(a.shape))
            self.grads.append(self.grad[start:start + size].reshape(a.shape))
            start += size


class _Adam:
    def __init__(self, size, cfg):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, p, g):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        self.m *= cfg.beta1
        self.m += (1.0 - cfg.beta1) * g
        self.v *= cfg.beta2
        self.v += (1.0 - cfg.beta2) * (g * g)
        p -= (cfg.learning_rate / c1) * self.m / (np.sqrt(self.v / c2) + cfg.eps)


def _batches(n, cfg, rng):
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    for start in range(0, n, cfg.batch_size):
        yield order[start:start + cfg.batch_size]


def _validate_xy(spec, x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise EmptyData("training data is empty")
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"x has {x.shape[0]} rows, y has {y.shape[0]}")
    if x.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"expected {spec.input_dim} input features, got {x.shape[1]}")
    return x, y


def train(spec, x, y, loss="mse", cfg=TrainConfig()):
    """Train the full network end to end.

    ``x`` is raw input; per-feature standardization statistics are computed
    from it (constant columns get unit scale) and stored on the model.
    ``loss_history[0]`` is the full-data loss at initialization, entry ``e``
    the mean minibatch loss seen during epoch ``e``; ``final_loss`` is the
    full-data loss of the returned weights.
    """
    _check_loss(spec, loss)
    x, y = _validate_xy(spec, x, y)
    x_mean, x_std = _standard_stats(x)
    y_center = 0.0 if spec.head == "scale" else float(np.mean(y))
    xs = (x - x_mean) / x_std
    target = _fit_target(spec, y, y_center)

    init = init_params(spec, cfg.seed)
    n_layers = len(init[0])
    store = _FlatParams([*init[0], *init[1], init[2], init[3]])
    weights = store.params[:n_layers]
    biases = store.params[n_layers:2 * n_layers]
    head_w, head_b = store.params[-2:]
    g_ws = store.grads[:n_layers]
    g_bs = store.grads[n_layers:2 * n_layers]
    g_head_w, g_head_b = store.grads[-2:]
    opt = _Adam(store.flat.size, cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    levels = spec.quantile_levels

    def full_loss():
        acts = _hidden_forward(weights, biases, xs)
        return _loss_and_grad(loss, spec.head, acts[-1] @ head_w + head_b, target, levels)[0]

    history = [full_loss()]
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for idx in _batches(xs.shape[0], cfg, shuffle_rng):
            acts = _hidden_forward(weights, biases, xs[idx])
            out = acts[-1] @ head_w + head_b
            batch_loss, g_out = _loss_and_grad(loss, spec.head, out, target[idx], levels)
            epoch_loss += batch_loss * idx.size
            _backward(weights, head_w, acts, g_out, g_ws, g_bs, g_head_w, g_head_b)
            opt.step(store.flat, store.grad)
        history.append(epoch_loss / xs.shape[0])
    final_loss = full_loss()

    weights = [w.copy() for w in weights]
    biases = [b.copy() for b in biases]
    head_w, head_b = head_w.copy(), head_b.copy()
    return TrainedBackbone(
        spec=spec,
        hidden_weights=weights,
        hidden_biases=biases,
        head_weight=head_w,
        head_bias=head_b,
        x_mean=x_mean,
        x_std=x_std,
        y_center=y_center,
        seed=cfg.seed,
        loss_history=history,
        final_loss=final_loss,
    )


def train_head(model, x, y, head, cfg=TrainConfig(), phi=None):
    """Fit a new linear head on the frozen features of ``model``.

    Parameters
    ----------
    model : TrainedBackbone
        Backbone whose hidden layers are reused unchanged.
    x, y : array_like
        Raw inputs and head targets. For ``head="scale"`` the target is the
        nonnegative magnitude to regress (e.g. absolute residuals).
    head : {"point", "scale", "quantile_pair"}
    cfg : TrainConfig
    phi : ndarray, optional
        Precomputed ``features(model, x)``.

    Quantile heads start from the point head's weights (both outputs), the
    scale head starts from zero weights with its bias at the softplus
    inverse of the mean target.
    """
    spec = replace(model.spec, head=head)
    loss = LOSS_FOR_HEAD[head]
    x, y = _validate_xy(spec, x, y)
    if phi is None:
        phi = features(model, x)
    y_center = 0.0 if head == "scale" else model.y_center
    target = _fit_target(spec, y, y_center)

    if head == "scale":
        head_w = np.zeros((spec.feature_dim, 1))
        mean_t = max(float(np.mean(target)), SCALE_FLOOR)
        head_b = np.array([mean_t + np.log(-np.expm1(-mean_t))])
    elif model.spec.head == "point":
        head_w = np.repeat(model.head_weight, spec.n_outputs, axis=1)
        head_b = np.repeat(model.head_bias, spec.n_outputs)
    else:
        rng = np.random.default_rng(cfg.seed)
        head_w = rng.normal(0.0, np.sqrt(1.0 / spec.feature_dim), size=(spec.feature_dim, spec.n_outputs))
        head_b = np.zeros(spec.n_outputs)

    store = _FlatParams([head_w, head_b])
    head_w, head_b = store.params
    g_w, g_b = store.grads
    opt = _Adam(store.flat.size, cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    levels = spec.quantile_levels
    history = [_loss_and_grad(loss, head, phi @ head_w + head_b, target, levels)[0]]
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for idx in _batches(phi.shape[0], cfg, shuffle_rng):
            p = phi[idx]
            batch_loss, g_out = _loss_and_grad(loss, head, p @ head_w + head_b, target[idx], levels)
            epoch_loss += batch_loss * idx.size
            np.matmul(p.T, g_out, out=g_w)
            np.sum(g_out, axis=0, out=g_b)
            opt.step(store.flat, store.grad)
        history.append(epoch_loss / phi.shape[0])
    final_loss = _loss_and_grad(loss, head, phi @ head_w + head_b, target, levels)[0]
    head_w, head_b = head_w.copy(), head_b.copy()

    return replace(
        model,
        spec=spec,
        head_weight=head_w,
        head_bias=head_b,
        y_center=y_center,
        loss_history=history,
        final_loss=final_loss,
    )


def features(model, x):
    """Last hidden layer activations ``phi(x)``; rows for 2-d input, a vector for 1-d."""
    single = np.ndim(x) == 1
    xs = model.standardize(x)
    phi = _hidden_forward(model.hidden_weights, model.hidden_biases, xs)[-1]
    return phi[0] if single else phi


def head_forward(model, x, phi=None):
    """Head output in original target units.

    Returns the point prediction for ``point`` heads, the unfloored
    softplus scale for ``scale`` heads, and an ``(n, 2)`` array of
    ``(q_lo, q_hi)`` for quantile pairs (a length-2 vector for 1-d ``x``).
    """
    single = np.ndim(x) == 1
    if phi is None:
        phi = features(model, x)
    phi = np.atleast_2d(phi)
    out = phi @ model.head_weight + model.head_bias
    head = model.spec.head
    if head == "scale":
        res = softplus(out[:, 0])
    elif head == "point":
        res = out[:, 0] + model.y_center
    else:
        res = out + model.y_center
    return res[0] if single else res


def evaluate_loss(model, x, y):
    """Full-data training objective of ``model``'s head on raw ``(x, y)``."""
    loss = LOSS_FOR_HEAD[model.spec.head]
    x, y = _validate_xy(model.spec, x, y)
    phi = features(model, x)
    out = phi @ model.head_weight + model.head_bias
    target = _fit_target(model.spec, y, model.y_center)
    return _loss_and_grad(loss, model.spec.head, out, target, model.spec.quantile_levels)[0]


def head_gradient(model, x, y):
    """Analytic gradient of :func:`evaluate_loss` w.r.t. ``(head_weight, head_bias)``."""
    loss = LOSS_FOR_HEAD[model.spec.head]
    x, y = _validate_xy(model.spec, x, y)
    phi = features(model, x)
    out = phi @ model.head_weight + model.head_bias
    target = _fit_target(model.spec, y, model.y_center)
    _, g_out = _loss_and_grad(loss, model.spec.head, out, target, model.spec.quantile_levels)
    return phi.T @ g_out, g_out.sum(axis=0)


def full_gradient(model, x, y):
    """Gradient of :func:`evaluate_loss` w.r.t. every parameter, as used by :func:`train`.

    Returns ``(hidden_weight_grads, hidden_bias_grads, head_weight_grad, head_bias_grad)``.
    """
    loss = LOSS_FOR_HEAD[model.spec.head]
    x, y = _validate_xy(model.spec, x, y)
    acts = _hidden_forward(model.hidden_weights, model.hidden_biases, (x - model.x_mean) / model.x_std)
    out = acts[-1] @ model.head_weight + model.head_bias
    target = _fit_target(model.spec, y, model.y_center)
    _, g_out = _loss_and_grad(loss, model.spec.head, out, target, model.spec.quantile_levels)
    g_ws = [np.empty_like(w) for w in model.hidden_weights]
    g_bs = [np.empty_like(b) for b in model.hidden_biases]
    g_hw, g_hb = np.empty_like(model.head_weight), np.empty_like(model.head_bias)
    _backward(model.hidden_weights, model.head_weight, acts, g_out, g_ws, g_bs, g_hw, g_hb)
    return g_ws, g_bs, g_hw, g_hb


# --- checkpoint -------------------------------------------------------------

def to_dict(model):
    """JSON-ready dict; floats survive the round trip exactly (repr is lossless)."""
    return {
        "format": "claps-backbone",
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "seed": int(model.seed),
        "y_center": float(model.y_center),
        "x_mean": model.x_mean.tolist(),
        "x_std": model.x_std.tolist(),
        "hidden_weights": [w.tolist() for w in model.hidden_weights],
        "hidden_biases": [b.tolist() for b in model.hidden_biases],
        "head_weight": model.head_weight.tolist(),
        "head_bias": model.head_bias.tolist(),
        "loss_history": [float(v) for v in model.loss_history],
        "final_loss": float(model.final_loss),
    }


def from_dict(d):
    if d.get("format") != "claps-backbone":
        raise ValueError("not a claps backbone checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    spec = MlpSpec(**d["spec"])
    arr = lambda v: np.asarray(v, dtype=float)  # noqa: E731
    return TrainedBackbone(
        spec=spec,
        hidden_weights=[arr(w).reshape(-1, width) for w, width in zip(d["hidden_weights"], spec.hidden_widths)],
        hidden_biases=[arr(b) for b in d["hidden_biases"]],
        head_weight=arr(d["head_weight"]).reshape(spec.feature_dim, spec.n_outputs),
        head_bias=arr(d["head_bias"]),
        x_mean=arr(d["x_mean"]),
        x_std=arr(d["x_std"]),
        y_center=float(d["y_center"]),
        seed=int(d["seed"]),
        loss_history=list(d.get("loss_history", [])),
        final_loss=float(d.get("final_loss", float("nan"))),
    )


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(model), fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
