"""Feed-forward softplus network with its adjoint ("twin") and differential training.

Row-batch convention: ``u_1 = x0 @ W_1 + b_1``, ``u_l = G(u_{l-1}) @ W_l + b_l``
and ``y = u_L``. The twin pass seeds ``ubar_L = 1`` and runs
``ubar_{l-1} = (ubar_l @ W_l.T) * G'(u_{l-1})`` down to the inputs, giving the
derivative of the price with respect to every input in one sweep.

Training minimizes, in normalized units,

    mean((y - x)^2) + lam * mean((dy - q)^2)

where ``q = q_raw / std_q`` and ``dy`` is the predicted raw delta divided by
``std_q``. Gradients of the second term are obtained by differentiating the
twin pass itself (reverse over reverse), which needs ``G''``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DomainError, NumericError, StateError, TrainingError
from .market_sim import philox_generator

__all__ = [
    "Activation",
    "SOFTPLUS",
    "IDENTITY",
    "Normalization",
    "NetParams",
    "TrainConfig",
    "TwinOutput",
    "ForwardCache",
    "Gradients",
    "softplus",
    "init_params",
    "fit_normalization",
    "forward",
    "twin_backward",
    "predict",
    "loss",
    "param_gradients",
    "mse_loss",
    "mse_gradients",
    "train",
    "TrainResult",
]


def softplus(u):
    """``log(1 + exp(u))`` without overflow for large ``|u|``."""
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


@dataclass(frozen=True)
class Activation:
    """Activation ``f`` with its first derivative and second derivative.

    ``d2f(u, slope)`` receives the already computed ``df(u)``.
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Callable[[np.ndarray, np.ndarray], np.ndarray]


SOFTPLUS = Activation("softplus", softplus, expit, lambda u, s: s * (1.0 - s))
IDENTITY = Activation("identity", lambda u: u, np.ones_like, lambda u, s: np.zeros_like(u))


@dataclass(frozen=True)
class Normalization:
    mean_z: float = 0.0
    std_z: float = 1.0
    mean_tau: float = 0.0
    std_tau: float = 1.0
    mean_x: float = 0.0
    std_x: float = 1.0
    std_q: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v):
                raise DomainError(f"normalization constant {k} is not finite")
        for k in ("std_z", "std_tau", "std_x", "std_q"):
            if not getattr(self, k) > 0:
                raise DomainError(f"normalization constant {k} must be positive")

    @property
    def chain(self) -> float:
        """Factor mapping the normalized input derivative to the scaled delta ``delta / std_q``."""
        return self.std_x / (self.std_z * self.std_q)


def _pos_std(v) -> float:
    s = float(np.std(v))
    return s if s > 0 else 1.0


def fit_normalization(rows) -> Normalization:
    """Standardize spot, maturity and payoff; ``std_q`` is the spread of the raw labels."""
    return Normalization(
        mean_z=float(np.mean(rows.z)), std_z=_pos_std(rows.z),
        mean_tau=float(np.mean(rows.tau)), std_tau=_pos_std(rows.tau),
        mean_x=float(np.mean(rows.x)), std_x=_pos_std(rows.x),
        std_q=_pos_std(rows.q),
    )


@dataclass(eq=False)
class NetParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("weights and biases must be non-empty and of equal length")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DomainError(f"layer {l}: bias shape {b.shape} does not match weights {W.shape}")
            if l and W.shape[0] != self.weights[l - 1].shape[1]:
                raise DomainError(f"layer {l}: input size {W.shape[0]} does not chain")
        if self.weights[-1].shape[1] != 1:
            raise DomainError("output layer must have a single unit")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    def copy(self) -> "NetParams":
        return NetParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.norm)

    def to_json(self, extra: dict | None = None) -> dict:
        out = {
            "layer_sizes": list(self.layer_sizes),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "norm": asdict(self.norm),
        }
        if extra:
            out.update(extra)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "NetParams":
        return cls([np.asarray(W, dtype=float) for W in obj["weights"]],
                   [np.asarray(b, dtype=float) for b in obj["biases"]],
                   Normalization(**obj["norm"]))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(extra), sort_keys=True) + "\n")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-2
    lr_milestones: tuple[float, ...] = (0.6, 0.9)
    lr_decay: float = 0.1
    seed: int = 0
    hidden_width: int = 20
    hidden_layers: int = 4

    def __post_init__(self):
        if not self.lam >= 0:
            raise DomainError("lam must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise DomainError("network needs at least one hidden unit and layer")

    def layer_sizes(self, n_inputs: int = 2) -> tuple[int, ...]:
        return (n_inputs,) + (self.hidden_width,) * self.hidden_layers + (1,)

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= round(m * self.epochs) for m in self.lr_milestones)
        return self.learning_rate * self.lr_decay ** drops


@dataclass(frozen=True)
class TwinOutput:
    y_norm: np.ndarray
    y: np.ndarray
    dy_dz_norm: np.ndarray | None = None
    dy_dz: np.ndarray | None = None


@dataclass(eq=False)
class ForwardCache:
    x0: np.ndarray
    pre: list[np.ndarray]        # u_1 .. u_L
    hidden: list[np.ndarray]     # G(u_1) .. G(u_{L-1})
    slopes: list[np.ndarray]     # G'(u_1) .. G'(u_{L-1})
    act: Activation


def init_params(layer_sizes: Sequence[int], seed: int, norm: Normalization | None = None) -> NetParams:
    """Glorot-normal weights (variance ``2/(fan_in+fan_out)``), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise DomainError(f"invalid layer sizes {layer_sizes}")
    rng = philox_generator(seed, 0)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return NetParams(weights, biases, norm or Normalization())


def _inputs(params: NetParams, z, tau) -> np.ndarray:
    n = params.norm
    z = np.atleast_1d(np.asarray(z, dtype=float))
    tau = np.broadcast_to(np.asarray(tau, dtype=float), z.shape)
    return np.column_stack(((z - n.mean_z) / n.std_z, (tau - n.mean_tau) / n.std_tau))


def _forward_norm(params: NetParams, x0: np.ndarray, act: Activation) -> ForwardCache:
    pre, hidden, slopes = [], [], []
    a = x0
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        u = a @ W + b
        if not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite pre-activation at layer {l + 1}", layer=l + 1)
        pre.append(u)
        if l < L - 1:
            a = act.f(u)
            hidden.append(a)
            slopes.append(act.df(u))
    return ForwardCache(x0, pre, hidden, slopes, act)


def _twin_norm(params: NetParams, cache: ForwardCache) -> list[np.ndarray]:
    """Adjoints ``ubar_1..ubar_L`` followed by the input adjoint ``x0bar``."""
    ws = params.weights
    ubar = np.ones_like(cache.pre[-1])
    out = [ubar]
    for l in range(len(ws) - 1, 0, -1):
        ubar = (ubar @ ws[l].T) * cache.slopes[l - 1]
        out.append(ubar)
    out.reverse()
    out.append(out[0] @ ws[0].T)
    return out


def forward(params: NetParams, z, tau, act: Activation = SOFTPLUS) -> tuple[TwinOutput, ForwardCache]:
    """Price prediction at raw ``(z, tau)`` plus the cache needed by the twin."""
    cache = _forward_norm(params, _inputs(params, z, tau), act)
    y_norm = cache.pre[-1][:, 0]
    return TwinOutput(y_norm, y_norm * params.norm.std_x + params.norm.mean_x), cache


def twin_backward(params: NetParams, cache: ForwardCache | None) -> TwinOutput:
    """Delta from the adjoint pass, de-normalized by ``std_x / std_z``."""
    if cache is None:
        raise StateError("twin pass needs a forward cache")
    x0bar = _twin_norm(params, cache)[-1]
    d = x0bar[:, 0]
    y_norm = cache.pre[-1][:, 0]
    n = params.norm
    return TwinOutput(y_norm, y_norm * n.std_x + n.mean_x, d, d * n.std_x / n.std_z)


def predict(params: NetParams, z, tau, act: Activation = SOFTPLUS) -> TwinOutput:
    _, cache = forward(params, z, tau, act)
    return twin_backward(params, cache)


def _targets(params: NetParams, rows):
    if len(rows.z) == 0:
        raise DomainError("empty batch")
    n = params.norm
    x0 = _inputs(params, rows.z, rows.tau)
    xt = (np.asarray(rows.x, dtype=float) - n.mean_x) / n.std_x
    qt = np.asarray(rows.q, dtype=float) / n.std_q
    return x0, xt, qt


@dataclass(eq=False)
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for pair in zip(self.weights, self.biases) for g in pair])


def _loss_norm(params, x0, xt, qt, lam, act):
    cache = _forward_norm(params, x0, act)
    y = cache.pre[-1][:, 0]
    adj = _twin_norm(params, cache)
    dy = params.norm.chain * adj[-1][:, 0]
    value = np.mean((y - xt) ** 2)
    return value + lam * np.mean((dy - qt) ** 2), cache, adj


def loss(params: NetParams, rows, lam: float, act: Activation = SOFTPLUS) -> float:
    """Combined value and derivative mean-squared error on normalized residuals."""
    x0, xt, qt = _targets(params, rows)
    return float(_loss_norm(params, x0, xt, qt, lam, act)[0])


def _grads_norm(params, x0, xt, qt, lam, act):
    ws = params.weights
    L = len(ws)
    N = x0.shape[0]
    value, cache, adj = _loss_norm(params, x0, xt, qt, lam, act)
    pre, hidden, slopes = cache.pre, cache.hidden, cache.slopes
    c = params.norm.chain
    gW = [np.zeros_like(W) for W in ws]
    gb = [np.zeros_like(b) for b in params.biases]

    # reverse sweep through the twin pass for the derivative term
    e = (2.0 * lam * c / N) * (c * adj[-1][:, 0] - qt)
    extra = [None] * L                       # extra[l] adds to the adjoint of u_{l+1}
    gW[0][0, :] += e @ adj[0]
    ubar_hat = np.outer(e, ws[0][0, :])      # adjoint of ubar_1
    for l in range(1, L):
        s = slopes[l - 1]
        hbar = adj[l] @ ws[l].T              # hbar_l = ubar_{l+1} W_{l+1}^T
        extra[l - 1] = ubar_hat * hbar * act.d2f(pre[l - 1], s)
        hbar_hat = ubar_hat * s
        gW[l] += hbar_hat.T @ adj[l]
        ubar_hat = hbar_hat @ ws[l]

    # ordinary backprop through the forward pass
    delta = (2.0 / N) * (pre[-1][:, 0] - xt)[:, None]
    for l in range(L - 1, -1, -1):
        a_prev = hidden[l - 1] if l else x0
        gW[l] += a_prev.T @ delta
        gb[l] += delta.sum(axis=0)
        if l:
            delta = (delta @ ws[l].T) * slopes[l - 1] + extra[l - 1]
    return float(value), Gradients(gW, gb)


def param_gradients(params: NetParams, rows, lam: float, act: Activation = SOFTPLUS) -> Gradients:
    """Exact gradient of :func:`loss` with respect to every weight and bias."""
    x0, xt, qt = _targets(params, rows)
    return _grads_norm(params, x0, xt, qt, lam, act)[1]


def _mse_norm(params, x0, xt, act):
    ws = params.weights
    L = len(ws)
    N = x0.shape[0]
    cache = _forward_norm(params, x0, act)
    y = cache.pre[-1][:, 0]
    gW, gb = [None] * L, [None] * L
    delta = (2.0 / N) * (y - xt)[:, None]
    for l in range(L - 1, -1, -1):
        a_prev = cache.hidden[l - 1] if l else x0
        gW[l] = a_prev.T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ ws[l].T) * cache.slopes[l - 1]
    return float(np.mean((y - xt) ** 2)), Gradients(gW, gb)


def mse_loss(params: NetParams, rows, act: Activation = SOFTPLUS) -> float:
    """Value-only regression loss (plain least-squares Monte Carlo with a network basis)."""
    x0, xt, _ = _targets(params, rows)
    cache = _forward_norm(params, x0, act)
    return float(np.mean((cache.pre[-1][:, 0] - xt) ** 2))


def mse_gradients(params: NetParams, rows, act: Activation = SOFTPLUS) -> Gradients:
    """Plain backpropagation of :func:`mse_loss`; no twin pass involved."""
    x0, xt, _ = _targets(params, rows)
    return _mse_norm(params, x0, xt, act)[1]


@dataclass(eq=False)
class TrainResult:
    params: NetParams
    history: list[float]
    initial_loss: float
    config: TrainConfig
    value_only: bool


class _Adam:
    def __init__(self, params: NetParams, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(a) for a in params.weights + params.biases]
        self.v = [np.zeros_like(a) for a in params.weights + params.biases]
        self.t = 0

    def step(self, params: NetParams, grads: Gradients, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params.weights + params.biases, grads.weights + grads.biases, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(rows, cfg: TrainConfig, value_only: bool = False, act: Activation = SOFTPLUS) -> TrainResult:
    """Adam over shuffled minibatches.

    ``value_only=True`` trains the plain regression network with
    :func:`mse_gradients`; otherwise the combined loss with ``cfg.lam`` is
    used. The recorded history is the full-sample training loss after each
    epoch, under the objective being optimized.
    """
    n_rows = len(rows.z)
    if n_rows < cfg.batch_size:
        raise DomainError(f"need at least batch_size={cfg.batch_size} rows, got {n_rows}")
    norm = fit_normalization(rows)
    params = init_params(cfg.layer_sizes(2), cfg.seed, norm)
    x0, xt, qt = _targets(params, rows)

    def full_loss() -> float:
        if value_only:
            cache = _forward_norm(params, x0, act)
            return float(np.mean((cache.pre[-1][:, 0] - xt) ** 2))
        return float(_loss_norm(params, x0, xt, qt, cfg.lam, act)[0])

    initial = full_loss()
    opt = _Adam(params)
    shuffle_rng = philox_generator(cfg.seed, 1)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n_rows)
        for start in range(0, n_rows - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                if value_only:
                    _, g = _mse_norm(params, x0[idx], xt[idx], act)
                else:
                    _, g = _grads_norm(params, x0[idx], xt[idx], qt[idx], cfg.lam, act)
            except NumericError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}", epoch=epoch) from exc
            opt.step(params, g, lr)
        try:
            current = full_loss()
        except NumericError as exc:
            raise TrainingError(f"training diverged at epoch {epoch}: {exc}", epoch=epoch) from exc
        if not np.isfinite(current):
            raise TrainingError(f"training loss is not finite at epoch {epoch}", epoch=epoch)
        history.append(current)
    return TrainResult(params, history, initial, cfg, value_only)
