"""Environment inference: split training data so a reference model looks
as non-invariant as possible.

Everything here works from a :class:`ReferencePack`, the frozen per-example
outputs of a reference model.  For example ``i`` the quantity that matters
is ``g_i = loss'(f_i) * f_i``, its contribution to the gradient of the
risk w.r.t. a scalar multiplier on the output.  Two environments are
encoded by ``q_i``, the probability that example ``i`` belongs to
environment 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_array, check_X_y

from .core import OptimizerConfig, loss, optimize, scale_grad_factors, sigmoid
from .exceptions import DegenerateSplitError, DivergenceError, ValidationError
from .learners import EnvSplit, _NetworkEstimator

NORMALIZATIONS = ("n", "mass")


@dataclass
class ReferencePack:
    logits: np.ndarray
    losses: np.ndarray
    grad_factors: np.ndarray
    labels: np.ndarray
    kind: str = "bce"

    def __post_init__(self):
        for name in ("logits", "losses", "grad_factors", "labels"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        n = self.logits.size
        if any(getattr(self, k).size != n for k in ("losses", "grad_factors", "labels")):
            raise ValidationError("reference pack vectors differ in length")
        if not all(np.all(np.isfinite(getattr(self, k)))
                   for k in ("logits", "losses", "grad_factors")):
            raise ValidationError("reference pack contains non-finite values")

    def __len__(self):
        return self.logits.size

    @classmethod
    def from_logits(cls, logits, y, kind="bce"):
        logits = np.asarray(logits, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        return cls(logits, loss(kind, logits, y), scale_grad_factors(kind, logits, y), y, kind)

    def is_consistent(self):
        """True when stored grad factors equal a fresh recomputation."""
        return bool(np.array_equal(
            self.grad_factors, scale_grad_factors(self.kind, self.logits, self.labels)))

    @property
    def probabilities(self):
        if self.kind != "bce":
            raise ValidationError("probabilities are defined for classification packs only")
        return sigmoid(self.logits)


def reference_outputs(model, X):
    """Logits of a fitted estimator, a :class:`~eiil.core.Network` or a callable."""
    if hasattr(model, "decision_function"):
        return np.asarray(model.decision_function(X), dtype=np.float64)
    if hasattr(model, "forward"):
        return model.forward(X)
    if callable(model):
        return np.asarray(model(X), dtype=np.float64).ravel()
    raise ValidationError(f"cannot compute outputs from {type(model).__name__}")


def reference_pack(model, X, y, kind="bce"):
    """Freeze a reference model's per-example outputs on ``(X, y)``.

    ``kind='bce'`` (binary classification) is the main case; regression
    packs use the squared-error factor ``(f - y) * f``.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if kind == "bce" and not np.all((y == 0) | (y == 1)):
        raise ValidationError("classification reference pack needs labels in {0, 1}; "
                              "use kind='squared_error' for regression targets")
    return ReferencePack.from_logits(reference_outputs(model, X), y, kind)


def check_q(q, n=None):
    q = np.asarray(q, dtype=np.float64).ravel()
    if n is not None and q.size != n:
        raise ValidationError(f"assignment has {q.size} entries, expected {n}")
    if np.any(~np.isfinite(q)) or np.any(q < 0) or np.any(q > 1):
        raise ValidationError("soft assignments must lie in [0, 1]")
    return q


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------

def ei_objective(pack, q, normalization="n"):
    """Soft IRMv1 penalty summed over the two environments, and its q-gradient.

    ``normalization='n'`` scales each environment's soft risk by ``1/N``;
    ``'mass'`` divides by the environment's total assignment mass
    (``sum(q)`` and ``sum(1 - q)``).
    """
    if normalization not in NORMALIZATIONS:
        raise ValidationError(f"unknown normalization {normalization!r}")
    g = pack.grad_factors
    q = check_q(q, g.size)
    r = 1.0 - q
    if normalization == "n":
        n = g.size
        a1 = float(q @ g) / n
        a2 = float(r @ g) / n
        grad = 2.0 * (a1 - a2) * g / n
        return a1 * a1 + a2 * a2, grad
    s1, s2 = q.sum(), r.sum()
    if s1 <= 0 or s2 <= 0:
        raise DegenerateSplitError("an environment has zero mass")
    a1 = float(q @ g) / s1
    a2 = float(r @ g) / s2
    grad = 2.0 * a1 * (g - a1) / s1 - 2.0 * a2 * (g - a2) / s2
    return a1 * a1 + a2 * a2, grad


def split_objective(pack, split, normalization="n"):
    """Objective of a hard split; ``-inf`` for degenerate splits under 'mass'."""
    q = (np.asarray(getattr(split, "assignment", split)) == 1).astype(np.float64)
    try:
        return ei_objective(pack, q, normalization)[0]
    except DegenerateSplitError:
        return -math.inf


# --------------------------------------------------------------------------
# Inference algorithms
# --------------------------------------------------------------------------

DEFAULT_EI_OPTIMIZER = OptimizerConfig(method="adam", learning_rate=1e-3, steps=10000)


def _optimize_q(pack, cfg, rng, normalization):
    q0 = np.clip(rng.uniform(0.0, 1.0, size=len(pack)), 1e-6, 1 - 1e-6)
    u0 = np.log(q0) - np.log1p(-q0)

    def objective(u, step):
        q = sigmoid(u)
        value, grad_q = ei_objective(pack, q, normalization)
        return -value, -grad_q * q * (1.0 - q)

    res = optimize(objective, u0, cfg)
    return sigmoid(res.params), res.trace


def infer_env_gradient(pack, cfg=None, n_restarts=5, normalization="n", return_info=False):
    """Maximize the soft objective over ``q`` by gradient ascent.

    ``q = sigmoid(u)`` with unconstrained ``u``; each restart draws its
    starting ``q`` uniformly from ``[0, 1]^N``.  The restart whose
    thresholded split scores highest is returned.
    """
    if len(pack) < 2:
        raise ValidationError("environment inference needs at least two examples")
    cfg = cfg or DEFAULT_EI_OPTIMIZER
    if n_restarts < 1:
        raise ValidationError("n_restarts must be >= 1")
    best = None
    scores, traces = [], []
    for r in range(n_restarts):
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, r])
        try:
            q, trace = _optimize_q(pack, cfg, rng, normalization)
        except (DivergenceError, DegenerateSplitError) as exc:
            raise DivergenceError(getattr(exc, "step", -1),
                                  f"environment inference restart {r} failed: {exc}") from exc
        score = split_objective(pack, harden(q), normalization)
        scores.append(score)
        traces.append(trace)
        if best is None or score > best[0]:
            best = (score, q)
    if return_info:
        return best[1], {"restart_objectives": scores, "traces": traces}
    return best[1]


def _require_classification(pack):
    if pack.kind != "bce":
        raise ValidationError("this heuristic needs a binary classification reference pack")


def infer_env_binned(pack, n_bins=10):
    """Confidence-binning heuristic.

    Examples are bucketed by reference confidence ``sigmoid(f)`` into
    ``n_bins`` equal-width bins over ``[0, 1]``.  Inside each bin the label
    decides the environment: labels equal to the bin's predicted class (the
    class of its center, 0.5 counting as 1) go to environment 1, the other
    label to environment 2.  Orienting each bin this way makes every
    mixed-label bin maximally non-invariant with the same orientation as
    the error split.
    """
    _require_classification(pack)
    if int(n_bins) < 1:
        raise ValidationError("n_bins must be >= 1")
    n_bins = int(n_bins)
    bins = confidence_bins(pack.probabilities, n_bins)
    centers = (np.arange(n_bins) + 0.5) / n_bins
    predicted = (centers[bins] >= 0.5).astype(np.float64)
    return EnvSplit(np.where(pack.labels == predicted, 1, 2))


def confidence_bins(p, n_bins):
    """Equal-width bin index of each probability; 1.0 falls in the last bin."""
    p = np.asarray(p, dtype=np.float64)
    return np.minimum((p * n_bins).astype(np.int64), n_bins - 1)


def infer_env_error_split(pack):
    """Environment 1 = misclassified examples, environment 2 = the rest.

    The prediction is ``sigmoid(f) >= 0.5`` (a zero logit predicts class 1).
    """
    _require_classification(pack)
    predicted = (pack.logits >= 0).astype(np.float64)
    return EnvSplit(np.where(predicted != pack.labels, 1, 2))


def harden(q, mode="threshold", seed=0):
    """Turn soft assignments into an :class:`EnvSplit`.

    ``threshold``: ``q >= 0.5`` goes to environment 1 (ties included).
    ``bernoulli``: environment 1 with probability ``q``.
    """
    q = check_q(q)
    if mode == "threshold":
        return EnvSplit(np.where(q >= 0.5, 1, 2))
    if mode == "bernoulli":
        rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
        return EnvSplit(np.where(rng.random(q.size) < q, 1, 2))
    raise ValidationError(f"unknown hardening mode {mode!r}")


def random_split(n, seed=0):
    """Uniformly random two-way split (ablation baseline)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 99])
    return EnvSplit(rng.integers(1, 3, size=n))


# --------------------------------------------------------------------------
# Fixed reference models
# --------------------------------------------------------------------------

class ColorReference(BaseEstimator):
    """Hand-coded classifier that predicts the label from the color channel.

    Features are two equal-width channels; whichever carries more mass sets
    the color.  ``confidence`` is the predicted probability for the
    color's class (0.85 matches the average training agreement).
    """

    def __init__(self, confidence=0.85):
        self.confidence = confidence

    def fit(self, X=None, y=None):
        return self

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] % 2:
            raise ValidationError("color reference expects two channels of equal width")
        half = X.shape[1] // 2
        color = (X[:, half:].sum(axis=1) > X[:, :half].sum(axis=1)).astype(np.float64)
        scale = math.log(self.confidence / (1.0 - self.confidence))
        return scale * (2.0 * color - 1.0)

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(np.int64)

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])


class AlphaSpuriousReference(BaseEstimator):
    """Linear regressor mixing the causal and spurious solutions.

    For ``[v, z]`` features the weights are ``(1 - alpha) * [1, 0] +
    alpha * [0, 1]``: ``alpha = 0`` is the causal model, ``alpha = 1`` uses
    only the spurious block.
    """

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def fit(self, X=None, y=None):
        return self

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        half = X.shape[1] // 2
        w = np.concatenate([np.full(half, 1.0 - self.alpha), np.full(half, self.alpha)])
        return X @ w

    predict = decision_function


# --------------------------------------------------------------------------
# Estimator interface
# --------------------------------------------------------------------------

class EnvironmentInference(BaseEstimator):
    """Infer a two-environment split of ``(X, y)`` from a reference model.

    ``reference`` is a fitted estimator (anything with ``decision_function``)
    or an unfitted one, which is cloned and fitted on ``(X, y)`` first.
    ``fit_predict`` returns environment ids in ``{1, 2}``.
    """

    def __init__(self, reference=None, method="gradient", n_bins=10, normalization="n",
                 n_restarts=5, learning_rate=1e-3, n_steps=10000, hardening="threshold",
                 task="classification", random_state=0):
        self.reference = reference
        self.method = method
        self.n_bins = n_bins
        self.normalization = normalization
        self.n_restarts = n_restarts
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.hardening = hardening
        self.task = task
        self.random_state = random_state

    def _fitted_reference(self, X, y):
        ref = self.reference
        if ref is None:
            raise ValidationError("a reference model is required")
        if isinstance(ref, _NetworkEstimator) and not hasattr(ref, "network_"):
            ref = clone(ref).fit(X, y)
        return ref

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        kind = "bce" if self.task == "classification" else "squared_error"
        self.reference_ = self._fitted_reference(X, y)
        pack = reference_pack(self.reference_, X, y, kind)
        self.pack_ = pack
        if self.method == "gradient":
            cfg = OptimizerConfig(method="adam", learning_rate=self.learning_rate,
                                  steps=self.n_steps, seed=self.random_state)
            q, info = infer_env_gradient(pack, cfg, self.n_restarts, self.normalization,
                                         return_info=True)
            self.q_ = q
            self.restart_objectives_ = info["restart_objectives"]
            self.split_ = harden(q, self.hardening, self.random_state)
        elif self.method == "binned":
            self.split_ = infer_env_binned(pack, self.n_bins)
            self.q_ = (self.split_.assignment == 1).astype(np.float64)
        elif self.method == "error_split":
            self.split_ = infer_env_error_split(pack)
            self.q_ = (self.split_.assignment == 1).astype(np.float64)
        else:
            raise ValidationError(f"unknown inference method {self.method!r}")
        self.envs_ = self.split_.assignment
        self.objective_ = split_objective(pack, self.split_, self.normalization)
        return self

    def fit_predict(self, X, y):
        return self.fit(X, y).envs_


class EIIL(BaseEstimator):
    """Environment inference followed by invariant learning.

    ``inference`` is an :class:`EnvironmentInference`; ``learner`` any
    estimator whose ``fit`` accepts ``(X, y, envs)``.  Both are cloned.
    """

    def __init__(self, inference=None, learner=None):
        self.inference = inference
        self.learner = learner

    def fit(self, X, y):
        self.inference_ = clone(self.inference).fit(X, y)
        self.envs_ = self.inference_.envs_
        self.learner_ = clone(self.learner).fit(X, y, self.envs_)
        return self

    def decision_function(self, X):
        return self.learner_.decision_function(X)

    def predict(self, X):
        return self.learner_.predict(X)

    def predict_proba(self, X):
        return self.learner_.predict_proba(X)

    def score(self, X, y):
        return self.learner_.score(X, y)
