"""Dense model kernels, losses with closed-form derivatives, and optimizers.

Models are small feed-forward maps from an ``N x D`` feature matrix to one
scalar output per row.  All parameters of a model live in a single flat
float64 vector; per-layer weight matrices are views into it.  That keeps the
optimizers and the finite-difference checker architecture agnostic.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DivergenceError, ValidationError

ARCHITECTURES = ("linear", "mlp")
LOSSES = ("squared_error", "bce")
ACTIVATIONS = ("relu", "tanh")


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def check_loss_kind(kind):
    if kind not in LOSSES:
        raise ValidationError(f"unknown loss kind {kind!r}; expected one of {LOSSES}")
    return kind


def _check_pair(outputs, y, kind):
    outputs = np.asarray(outputs, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if outputs.shape != y.shape:
        raise ValidationError(
            f"outputs and labels differ in length ({outputs.size} vs {y.size})")
    if kind == "bce" and not np.all((y == 0) | (y == 1)):
        raise ValidationError("binary cross-entropy requires labels in {0, 1}")
    return outputs, y


def loss(kind, outputs, y):
    """Per-example loss.

    ``squared_error`` is ``0.5 * (f - y)**2`` so that its output derivative is
    the plain residual ``f - y``.  ``bce`` is cross-entropy on logits in the
    overflow-free form ``max(f, 0) - f*y + log1p(exp(-|f|))``.
    """
    check_loss_kind(kind)
    f, y = _check_pair(outputs, y, kind)
    if kind == "squared_error":
        return 0.5 * (f - y) ** 2
    return np.maximum(f, 0.0) - f * y + np.log1p(np.exp(-np.abs(f)))


def loss_grad(kind, outputs, y):
    """Derivative of the per-example loss with respect to the output."""
    check_loss_kind(kind)
    f, y = _check_pair(outputs, y, kind)
    if kind == "squared_error":
        return f - y
    return sigmoid(f) - y


def loss_hess(kind, outputs, y):
    """Second derivative of the per-example loss with respect to the output."""
    check_loss_kind(kind)
    f, y = _check_pair(outputs, y, kind)
    if kind == "squared_error":
        return np.ones_like(f)
    p = sigmoid(f)
    return p * (1.0 - p)


def scale_grad_factors(kind, outputs, y):
    """Per-example derivative of ``loss(w * f, y)`` w.r.t. ``w`` at ``w = 1``.

    This is ``loss_grad * f``; averaged over an environment it is the IRMv1
    gradient whose squared norm is the penalty.
    """
    f = np.asarray(outputs, dtype=np.float64).ravel()
    return loss_grad(kind, f, y) * f


def scale_grad_factors_deriv(kind, outputs, y):
    """Derivative of :func:`scale_grad_factors` with respect to the output."""
    f = np.asarray(outputs, dtype=np.float64).ravel()
    return loss_hess(kind, f, y) * f + loss_grad(kind, f, y)


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

class Network:
    """Feed-forward map ``R^D -> R`` with a flat parameter vector.

    ``architecture='linear'`` is a single affine layer (a linear regressor or
    a logistic classifier depending on the loss it is trained with);
    ``'mlp'`` has two hidden layers of width ``hidden``.
    """

    def __init__(self, n_features, architecture="mlp", hidden=64,
                 activation="relu", params=None):
        if architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {architecture!r}")
        if activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        if int(n_features) < 1:
            raise ValidationError("n_features must be positive")
        self.n_features = int(n_features)
        self.architecture = architecture
        self.hidden = int(hidden)
        self.activation = activation
        if architecture == "linear":
            widths = [self.n_features, 1]
        else:
            if self.hidden < 1:
                raise ValidationError("hidden width must be positive")
            widths = [self.n_features, self.hidden, self.hidden, 1]
        self.shapes = [(widths[k], widths[k + 1]) for k in range(len(widths) - 1)]
        self.n_params = sum(a * b + b for a, b in self.shapes)
        if params is None:
            params = np.zeros(self.n_params)
        self.params = params

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, value):
        value = np.array(value, dtype=np.float64).ravel()
        if value.size != self.n_params:
            raise ValidationError(
                f"expected {self.n_params} parameters, got {value.size}")
        self._params = value

    def layers(self, params=None):
        """List of ``(W, b)`` views into ``params`` (defaults to own params)."""
        p = self._params if params is None else params
        out, k = [], 0
        for fan_in, fan_out in self.shapes:
            W = p[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = p[k:k + fan_out]
            k += fan_out
            out.append((W, b))
        return out

    def init_params(self, rng):
        """Uniform init in ``+-1/sqrt(fan_in)`` for weights and biases."""
        chunks = []
        for fan_in, fan_out in self.shapes:
            bound = 1.0 / math.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
        self.params = np.concatenate(chunks)
        return self

    def copy(self):
        return Network(self.n_features, self.architecture, self.hidden,
                       self.activation, self._params.copy())

    def describe(self):
        return {"architecture": self.architecture, "n_features": self.n_features,
                "hidden": self.hidden, "activation": self.activation}

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(
                f"X has shape {X.shape}; model expects {self.n_features} columns")
        return X

    def _act(self, a):
        if self.activation == "relu":
            return np.maximum(a, 0.0)
        return np.tanh(a)

    def _act_grad(self, a, h):
        if self.activation == "relu":
            return (a > 0.0).astype(np.float64)
        return 1.0 - h * h

    def forward(self, X, params=None, return_cache=False):
        X = self._check_X(X)
        layers = self.layers(params)
        h = X
        cache = [(X, None)]
        for W, b in layers[:-1]:
            a = h @ W + b
            h = self._act(a)
            cache.append((h, a))
        W, b = layers[-1]
        out = (h @ W + b)[:, 0]
        if return_cache:
            return out, cache
        return out

    def backward(self, cache, dout, params=None):
        """Gradient of ``sum(dout * f(X))`` w.r.t. the flat parameter vector."""
        layers = self.layers(params)
        grad = np.empty(self.n_params)
        g_layers = self.layers(grad)
        delta = np.asarray(dout, dtype=np.float64).reshape(-1, 1)
        for k in range(len(layers) - 1, -1, -1):
            h_in, _ = cache[k]
            gW, gb = g_layers[k]
            gW[...] = h_in.T @ delta
            gb[...] = delta.sum(axis=0)
            if k > 0:
                W, _ = layers[k]
                h, a = cache[k]
                delta = (delta @ W.T) * self._act_grad(a, h)
        return grad


def forward(model, X):
    """Outputs (logits or regression values) of ``model`` on the rows of ``X``."""
    return model.forward(X)


def grad_params(model, X, y, kind, params=None, sample_weight=None):
    """Gradient of the (weighted) mean loss with respect to model parameters.

    Returns ``(mean_loss, flat_gradient)``.
    """
    f, cache = model.forward(X, params, return_cache=True)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != f.size:
        raise ValidationError("X and y differ in length")
    if sample_weight is None:
        w = np.full(f.size, 1.0 / f.size)
    else:
        w = np.asarray(sample_weight, dtype=np.float64).ravel()
    value = float(np.dot(w, loss(kind, f, y)))
    return value, model.backward(cache, w * loss_grad(kind, f, y), params)


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

def finite_diff_check(objective, point, gradient=None, h=1e-5):
    """Max relative error between an analytic gradient and central differences.

    ``objective(p)`` returns either a scalar or ``(value, grad)``; in the
    latter case ``gradient`` may be omitted.  The relative error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    point = np.array(point, dtype=np.float64).ravel()

    def value_of(p):
        out = objective(p)
        v = out[0] if isinstance(out, tuple) else out
        v = float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"objective is not finite near {p}")
        return v

    if gradient is None:
        out = objective(point)
        if not isinstance(out, tuple):
            raise ValidationError("gradient required when objective returns a scalar")
        analytic = np.asarray(out[1], dtype=np.float64).ravel()
    elif callable(gradient):
        analytic = np.asarray(gradient(point), dtype=np.float64).ravel()
    else:
        analytic = np.asarray(gradient, dtype=np.float64).ravel()
    value_of(point)

    numeric = np.empty_like(point)
    for j in range(point.size):
        step = np.zeros_like(point)
        step[j] = h
        numeric[j] = (value_of(point + step) - value_of(point - step)) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    method: str = "adam"
    learning_rate: float = 1e-3
    steps: int = 1000
    weight_decay: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.method not in ("adam", "gd"):
            raise ValidationError(f"unknown optimizer {self.method!r}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if int(self.steps) < 1:
            raise ValidationError("steps must be >= 1")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")
        self.steps = int(self.steps)
        self.seed = int(self.seed)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizeResult:
    params: np.ndarray
    trace: list = field(default_factory=list)


def optimize(objective, params, cfg):
    """Minimize ``objective`` from ``params`` for exactly ``cfg.steps`` steps.

    ``objective(params, step)`` returns ``(loss, grad)``.  Weight decay adds
    ``weight_decay * ||params||^2`` to the loss.  The loss recorded at step
    ``t`` is the one evaluated at the parameters before that step's update.
    """
    p = np.array(params, dtype=np.float64).ravel()
    trace = []
    if cfg.method == "adam":
        m = np.zeros_like(p)
        v = np.zeros_like(p)
    for t in range(cfg.steps):
        value, grad = objective(p, t)
        if cfg.weight_decay:
            value = value + cfg.weight_decay * float(p @ p)
            grad = grad + 2.0 * cfg.weight_decay * p
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise DivergenceError(t)
        trace.append(float(value))
        if cfg.method == "gd":
            p = p - cfg.learning_rate * grad
        else:
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            mhat = m / (1 - cfg.beta1 ** (t + 1))
            vhat = v / (1 - cfg.beta2 ** (t + 1))
            p = p - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        if not np.all(np.isfinite(p)):
            raise DivergenceError(t, f"non-finite parameters after step {t}")
    return OptimizeResult(p, trace)
