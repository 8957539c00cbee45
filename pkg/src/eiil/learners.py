"""Invariant-learning estimators: ERM, IRMv1 and online GroupDRO.

All three share one small network family and full-batch training.  They
follow the scikit-learn estimator protocol (constructor arguments are
hyperparameters, ``fit`` returns ``self``, fitted state ends in ``_``), so
they work with ``clone``, ``get_params`` and pipelines.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import (ACTIVATIONS, ARCHITECTURES, Network, OptimizerConfig, loss, loss_grad, optimize,
                   scale_grad_factors, scale_grad_factors_deriv, sigmoid)
from .exceptions import DegenerateSplitError, ValidationError


@dataclass
class EnvSplit:
    """Hard two-way partition; ``assignment[i]`` is 1 or 2."""

    assignment: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment).ravel().astype(np.int64)
        if not np.all((self.assignment == 1) | (self.assignment == 2)):
            raise ValidationError("environment ids must be 1 or 2")

    def __len__(self):
        return self.assignment.size

    @property
    def sizes(self):
        return (int(np.sum(self.assignment == 1)), int(np.sum(self.assignment == 2)))

    @property
    def degenerate(self):
        return min(self.sizes) == 0

    def swapped(self):
        return EnvSplit(3 - self.assignment)


def _env_ids(envs, n):
    if isinstance(envs, EnvSplit):
        if envs.degenerate:
            raise DegenerateSplitError(f"environment sizes {envs.sizes}")
        envs = envs.assignment
    envs = np.asarray(envs).ravel()
    if envs.size != n:
        raise ValidationError(f"environment vector has {envs.size} entries, expected {n}")
    ids = np.unique(envs)
    return envs, ids


def _kind(task):
    return "bce" if task == "classification" else "squared_error"


# --------------------------------------------------------------------------
# IRMv1 penalty
# --------------------------------------------------------------------------

def irmv1_penalty(outputs, y, envs, kind="bce"):
    """Sum over environments of the squared dummy-scale gradient.

    ``outputs`` are the model's logits (or regression outputs).  For each
    environment the gradient of its mean loss w.r.t. a scalar multiplier on
    the outputs, evaluated at 1, is ``mean(loss'(f) * f)``.
    """
    f = np.asarray(outputs, dtype=np.float64).ravel()
    envs, ids = _env_ids(envs, f.size)
    phi = scale_grad_factors(kind, f, y)
    return float(sum(phi[envs == e].mean() ** 2 for e in ids))


def model_irmv1_penalty(model, X, y, envs, kind=None):
    """IRMv1 penalty of a fitted estimator or a raw :class:`Network`."""
    net = getattr(model, "network_", model)
    if kind is None:
        kind = _kind(getattr(model, "task", "classification"))
    return irmv1_penalty(net.forward(X), y, envs, kind)


def irm_objective(net, X, y, envs, kind, penalty_weight=1.0, weight_decay=0.0, scale=1.0):
    """Closure ``p -> (value, grad)`` of the IRMv1 training objective.

    ``value = scale * (mean_e R_e + penalty_weight * sum_e P_e / E
    + weight_decay * ||p||^2)``.  Gradients flow through both the risk and the
    penalty.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    envs, ids = _env_ids(envs, y.size)
    masks = [envs == e for e in ids]
    counts = [m.sum() for m in masks]
    n_env = len(ids)

    def fun(p):
        f, cache = net.forward(X, p, return_cache=True)
        ell = loss(kind, f, y)
        dl = loss_grad(kind, f, y)
        phi = dl * f
        dphi = scale_grad_factors_deriv(kind, f, y)
        dout = np.empty_like(f)
        value = 0.0
        for m, c in zip(masks, counts):
            mean_phi = phi[m].mean()
            value += ell[m].mean() + penalty_weight * mean_phi ** 2
            dout[m] = (dl[m] + penalty_weight * 2.0 * mean_phi * dphi[m]) / c
        value /= n_env
        dout /= n_env
        grad = net.backward(cache, dout, p)
        if weight_decay:
            value += weight_decay * float(p @ p)
            grad = grad + 2.0 * weight_decay * p
        return scale * value, scale * grad

    return fun


# --------------------------------------------------------------------------
# Estimators
# --------------------------------------------------------------------------

class _NetworkEstimator(BaseEstimator):
    """Shared plumbing: validation, network construction and prediction."""

    def _check_params(self):
        """Reject invalid hyperparameters without touching any data."""
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.architecture == "mlp" and int(self.hidden) < 1:
            raise ValidationError("hidden width must be positive")
        self._optimizer_config()

    def _validate_fit(self, X, y):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.task == "classification":
            if not np.all((y == 0) | (y == 1)):
                raise ValidationError("classification labels must be in {0, 1}")
            self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return X, y.astype(np.float64)

    def _optimizer_config(self, weight_decay=None):
        return OptimizerConfig(
            method=self.optimizer, learning_rate=self.learning_rate, steps=self.n_steps,
            weight_decay=self.weight_decay if weight_decay is None else weight_decay,
            seed=self.random_state)

    def _init_network(self, n_features):
        net = Network(n_features, self.architecture, self.hidden, self.activation)
        net.init_params(np.random.default_rng(self.random_state))
        return net

    @property
    def kind_(self):
        return _kind(self.task)

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {X.shape[1]} features; estimator was fitted with {self.n_features_in_}")
        return self.network_.forward(X)

    def predict_proba(self, X):
        if self.task != "classification":
            raise AttributeError("predict_proba is only available for classification")
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        out = self.decision_function(X)
        if self.task == "classification":
            # sigmoid(0) == 0.5 predicts the positive class
            return (out >= 0.0).astype(np.int64)
        return out

    def score(self, X, y):
        y = np.asarray(y, dtype=np.float64).ravel()
        if self.task == "classification":
            return float(np.mean(self.predict(X) == y))
        return -float(np.mean((self.predict(X) - y) ** 2))

    @property
    def coef_(self):
        check_is_fitted(self, "network_")
        if self.architecture != "linear":
            raise AttributeError("coef_ is only defined for linear models")
        W, _ = self.network_.layers()[0]
        return W[:, 0].copy()

    @property
    def intercept_(self):
        check_is_fitted(self, "network_")
        if self.architecture != "linear":
            raise AttributeError("intercept_ is only defined for linear models")
        return float(self.network_.layers()[0][1][0])


class ERM(_NetworkEstimator):
    """Empirical risk minimization, optionally with per-example weights."""

    def __init__(self, task="classification", architecture="mlp", hidden=64,
                 activation="relu", optimizer="adam", learning_rate=1e-3, n_steps=1000,
                 weight_decay=0.0, random_state=0):
        self.task = task
        self.architecture = architecture
        self.hidden = hidden
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X, y = self._validate_fit(X, y)
        if sample_weight is None:
            w = np.full(y.size, 1.0 / y.size)
        else:
            w = np.asarray(sample_weight, dtype=np.float64).ravel()
            if w.size != y.size or np.any(w < 0) or w.sum() <= 0:
                raise ValidationError("sample_weight must be nonnegative with positive sum")
            w = w / w.sum()
        net = self._init_network(X.shape[1])
        kind = self.kind_

        def objective(p, step):
            f, cache = net.forward(X, p, return_cache=True)
            return float(w @ loss(kind, f, y)), net.backward(cache, w * loss_grad(kind, f, y), p)

        res = optimize(objective, net.params, self._optimizer_config())
        net.params = res.params
        self.network_ = net
        self.loss_curve_ = res.trace
        return self


class IRM(_NetworkEstimator):
    """IRMv1 with a penalty-annealing schedule.

    For ``step < anneal_steps`` the penalty weight is 1.0, afterwards
    ``penalty_weight``.  With ``rescale=True`` the post-anneal objective is
    divided by ``penalty_weight`` (when it exceeds 1) to keep gradient
    magnitudes comparable.  ``penalty_schedule='final'`` instead applies the
    penalty only during the last ``penalty_steps`` steps (weight 0 before).
    """

    def __init__(self, task="classification", architecture="mlp", hidden=64,
                 activation="relu", optimizer="adam", learning_rate=1e-3, n_steps=1000,
                 weight_decay=0.0, random_state=0, penalty_weight=1e4, anneal_steps=100,
                 rescale=True, penalty_schedule="anneal", penalty_steps=500):
        self.task = task
        self.architecture = architecture
        self.hidden = hidden
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.penalty_weight = penalty_weight
        self.anneal_steps = anneal_steps
        self.rescale = rescale
        self.penalty_schedule = penalty_schedule
        self.penalty_steps = penalty_steps

    def _weight_at(self, step):
        if self.penalty_schedule == "final":
            return self.penalty_weight if step >= self.n_steps - self.penalty_steps else 0.0
        return 1.0 if step < self.anneal_steps else self.penalty_weight

    def _check_params(self):
        super()._check_params()
        if self.penalty_weight < 0:
            raise ValidationError("penalty_weight must be nonnegative")
        if self.penalty_schedule not in ("anneal", "final"):
            raise ValidationError(f"unknown penalty_schedule {self.penalty_schedule!r}")
        if self.penalty_schedule == "anneal" and not 0 <= self.anneal_steps <= self.n_steps:
            raise ValidationError("anneal_steps must lie in [0, n_steps]")
        if self.penalty_schedule == "final" and not 0 <= self.penalty_steps <= self.n_steps:
            raise ValidationError("penalty_steps must lie in [0, n_steps]")

    def fit(self, X, y, envs):
        X, y = self._validate_fit(X, y)
        envs, ids = _env_ids(envs, y.size)
        if ids.size < 2:
            raise DegenerateSplitError("IRM needs at least two nonempty environments")
        net = self._init_network(X.shape[1])
        kind = self.kind_
        cache = {}

        def objective(p, step):
            lam = self._weight_at(step)
            scale = 1.0 / lam if (self.rescale and lam > 1.0) else 1.0
            key = (lam, scale)
            if key not in cache:
                cache.clear()
                cache[key] = irm_objective(net, X, y, envs, kind, lam,
                                           self.weight_decay, scale)
            return cache[key](p)

        res = optimize(objective, net.params, self._optimizer_config(weight_decay=0.0))
        net.params = res.params
        self.network_ = net
        self.loss_curve_ = res.trace
        self.environments_ = ids
        return self


class GroupDRO(_NetworkEstimator):
    """Online GroupDRO with exponentiated-gradient group weights.

    Every step: ``g_e <- g_e * exp(eta * R_e)``, renormalize, then take a
    gradient step on ``sum_e g_e R_e`` with ``g`` held fixed.
    """

    def __init__(self, task="classification", architecture="mlp", hidden=64,
                 activation="relu", optimizer="adam", learning_rate=1e-3, n_steps=1000,
                 weight_decay=0.0, random_state=0, group_step_size=0.01):
        self.task = task
        self.architecture = architecture
        self.hidden = hidden
        self.activation = activation
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.group_step_size = group_step_size

    def _check_params(self):
        super()._check_params()
        if not self.group_step_size > 0:
            raise ValidationError("group_step_size must be positive")

    def fit(self, X, y, envs):
        X, y = self._validate_fit(X, y)
        envs, ids = _env_ids(envs, y.size)
        if ids.size < 2:
            raise DegenerateSplitError("GroupDRO needs at least two nonempty environments")
        net = self._init_network(X.shape[1])
        kind = self.kind_
        masks = [envs == e for e in ids]
        state = GroupDroState.uniform(ids.size, self.group_step_size)
        history = []

        def objective(p, step):
            f, cache = net.forward(X, p, return_cache=True)
            ell = loss(kind, f, y)
            dl = loss_grad(kind, f, y)
            risks = np.array([ell[m].mean() for m in masks])
            state.update(risks)
            history.append(state.weights.copy())
            dout = np.zeros_like(f)
            for g, m in zip(state.weights, masks):
                dout[m] = g * dl[m] / m.sum()
            return float(state.weights @ risks), net.backward(cache, dout, p)

        res = optimize(objective, net.params, self._optimizer_config())
        net.params = res.params
        self.network_ = net
        self.loss_curve_ = res.trace
        self.environments_ = ids
        self.group_weights_ = state.weights.copy()
        self.group_weight_history_ = np.array(history)
        return self


@dataclass
class GroupDroState:
    """Exponentiated-gradient group weights, tracked in the log domain.

    Keeping log-weights means a group whose weight underflows to 0.0 can
    still recover once its risk becomes the largest.
    """

    weights: np.ndarray
    step_size: float
    log_weights: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.log_weights is None:
            with np.errstate(divide="ignore"):
                self.log_weights = np.log(self.weights)

    @classmethod
    def uniform(cls, n_groups, step_size):
        return cls(np.full(n_groups, 1.0 / n_groups), float(step_size))

    def update(self, risks):
        logw = self.log_weights + self.step_size * np.asarray(risks, dtype=np.float64)
        logw -= logw.max()
        self.log_weights = logw
        w = np.exp(logw)
        self.weights = w / w.sum()
        return self.weights


# --------------------------------------------------------------------------
# Functional wrappers and serialization
# --------------------------------------------------------------------------

LEARNERS = {"erm": ERM, "irm": IRM, "groupdro": GroupDRO}


def _estimator_kwargs(model_spec, opt):
    spec = dict(model_spec or {})
    if opt is not None:
        spec.setdefault("optimizer", opt.method)
        spec.setdefault("learning_rate", opt.learning_rate)
        spec.setdefault("n_steps", opt.steps)
        spec.setdefault("weight_decay", opt.weight_decay)
        spec.setdefault("random_state", opt.seed)
    return spec


def train_erm(d, model_spec=None, opt=None, sample_weight=None):
    est = ERM(task=d.task, **_estimator_kwargs(model_spec, opt))
    return est.fit(d.X, d.y, sample_weight=sample_weight)


def train_irm(d, split, model_spec=None, opt=None, **irm_params):
    est = IRM(task=d.task, **_estimator_kwargs(model_spec, opt), **irm_params)
    return est.fit(d.X, d.y, split)


def train_groupdro(d, split, model_spec=None, opt=None, **dro_params):
    est = GroupDRO(task=d.task, **_estimator_kwargs(model_spec, opt), **dro_params)
    return est.fit(d.X, d.y, split)


def model_to_dict(est):
    """Architecture descriptor, flat weights and hyperparameters."""
    check_is_fitted(est, "network_")
    return {
        "estimator": type(est).__name__,
        "params": est.get_params(),
        "network": est.network_.describe(),
        "weights": [float(v) for v in est.network_.params],
    }


def model_to_json(est, path=None):
    # repr() of a float round-trips exactly (17 significant digits at most)
    text = json.dumps(model_to_dict(est), indent=1, sort_keys=True)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def model_from_dict(doc):
    cls = {c.__name__: c for c in (ERM, IRM, GroupDRO)}[doc["estimator"]]
    est = cls(**doc["params"])
    desc = doc["network"]
    net = Network(desc["n_features"], desc["architecture"], desc["hidden"],
                  desc["activation"], np.asarray(doc["weights"], dtype=np.float64))
    est.network_ = net
    est.n_features_in_ = net.n_features
    if est.task == "classification":
        est.classes_ = np.array([0, 1])
    return est


def model_from_json(text_or_path):
    text = text_or_path
    if not text.lstrip().startswith("{"):
        with open(text_or_path, encoding="utf-8") as fh:
            text = fh.read()
    return model_from_dict(json.loads(text))
