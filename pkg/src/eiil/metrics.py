"""Accuracy breakdowns, calibration and environment-invariance diagnostics."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import sigmoid
from .exceptions import DegenerateSplitError, ValidationError


@dataclass
class GroupMetrics:
    average_accuracy: float
    per_group_accuracy: dict
    worst_group_accuracy: float
    counts: dict

    def to_dict(self):
        return {
            "average_accuracy": self.average_accuracy,
            "per_group_accuracy": {str(k): v for k, v in self.per_group_accuracy.items()},
            "worst_group_accuracy": self.worst_group_accuracy,
            "counts": {str(k): v for k, v in self.counts.items()},
        }


@dataclass
class CalibrationCurve:
    bin_edges: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    mass: np.ndarray
    ece: float
    counts: np.ndarray = field(default=None)

    @property
    def bin_centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges.tolist(),
            "confidence": self.confidence.tolist(),
            "accuracy": self.accuracy.tolist(),
            "mass": self.mass.tolist(),
            "ece": self.ece,
        }

    def to_csv(self, path):
        """Plot-ready rows: ``bin_center, confidence, accuracy, mass``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "confidence", "accuracy", "mass"])
            for row in zip(self.bin_centers, self.confidence, self.accuracy, self.mass):
                w.writerow([repr(float(v)) for v in row])


def _probabilities(model, X):
    if hasattr(model, "predict_proba"):
        p = np.asarray(model.predict_proba(X), dtype=np.float64)
        return p[:, 1] if p.ndim == 2 else p
    if hasattr(model, "decision_function"):
        return sigmoid(np.asarray(model.decision_function(X), dtype=np.float64))
    raise ValidationError(f"cannot get probabilities from {type(model).__name__}")


def _binary_labels(y):
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary {0, 1}")
    return y


def _grouping_ids(d, grouping, split):
    if grouping == "split":
        if split is None:
            raise ValidationError("grouping='split' needs an environment split")
        ids = np.asarray(getattr(split, "assignment", split)).ravel()
    elif grouping in ("group", "env"):
        ids = getattr(d, grouping)
        if ids is None:
            raise ValidationError(f"dataset has no {grouping!r} annotations")
    else:
        raise ValidationError(f"unknown grouping {grouping!r}")
    ids = np.asarray(ids)
    if ids.size != len(d.y):
        raise ValidationError("grouping ids do not match the dataset size")
    return ids


def group_accuracy(pred, y, ids, all_groups=None):
    """Accuracy per id; groups in ``all_groups`` with no rows are skipped."""
    correct = np.asarray(pred) == np.asarray(y)
    per, counts = {}, {}
    groups = np.unique(ids) if all_groups is None else all_groups
    for g in groups:
        mask = ids == g
        counts[int(g)] = int(mask.sum())
        if counts[int(g)] == 0:
            warnings.warn(f"group {g} is empty and is left out of worst-group accuracy",
                          RuntimeWarning, stacklevel=3)
            continue
        per[int(g)] = float(correct[mask].mean())
    if not per:
        raise ValidationError("no populated groups")
    return GroupMetrics(
        average_accuracy=float(correct.mean()),
        per_group_accuracy=per,
        worst_group_accuracy=min(per.values()),
        counts=counts,
    )


def evaluate(model, d, grouping="group", split=None, all_groups=None):
    """Average, per-group and worst-group accuracy of ``model`` on ``d``.

    Predictions threshold the probability at 0.5, with 0.5 itself mapped to
    class 1.  ``grouping`` picks ``d.group``, ``d.env`` or an explicit
    ``split``.  Ids listed in ``all_groups`` but absent from the data are
    reported with count 0 and skipped (with a warning).
    """
    if d.task != "classification":
        raise ValidationError("evaluate needs a classification dataset")
    y = _binary_labels(d.y)
    ids = _grouping_ids(d, grouping, split)
    pred = (_probabilities(model, d.X) >= 0.5).astype(np.float64)
    return group_accuracy(pred, y, ids, all_groups)


def calibration_from_probs(p, y, n_bins=10):
    if int(n_bins) < 1:
        raise ValidationError("n_bins must be >= 1")
    n_bins = int(n_bins)
    p = np.asarray(p, dtype=np.float64).ravel()
    y = _binary_labels(y)
    if p.size != y.size or p.size == 0:
        raise ValidationError("probabilities and labels must be non-empty and aligned")
    idx = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=p, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=y, minlength=n_bins)
    populated = counts > 0
    conf = np.where(populated, conf_sum / np.maximum(counts, 1), 0.0)
    acc = np.where(populated, acc_sum / np.maximum(counts, 1), 0.0)
    mass = counts / p.size
    ece = float(np.sum(mass * np.abs(conf - acc)))
    return CalibrationCurve(np.linspace(0.0, 1.0, n_bins + 1), conf, acc, mass, ece,
                            counts.astype(np.int64))


def calibration(model, d, n_bins=10, per_group=False, grouping="group"):
    """Equal-width reliability curve of ``P(y=1)`` and its ECE.

    With ``per_group=True`` returns ``{group_id: CalibrationCurve}`` instead.
    """
    p = _probabilities(model, d.X)
    if not per_group:
        return calibration_from_probs(p, d.y, n_bins)
    ids = _grouping_ids(d, grouping, None)
    return {int(g): calibration_from_probs(p[ids == g], d.y[ids == g], n_bins)
            for g in np.unique(ids)}


def _bin_scores(scores, n_bins):
    if int(n_bins) < 1:
        raise ValidationError("n_bins must be >= 1")
    s = np.asarray(scores, dtype=np.float64).ravel()
    if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
        raise ValidationError("scores must lie in [0, 1]")
    return np.minimum((s * int(n_bins)).astype(np.int64), int(n_bins) - 1)


def sufficiency_gap(scores, y, split, n_bins=10):
    """Mass-weighted mean of ``|E[y | bin, e1] - E[y | bin, e2]|``.

    Bins populated by one environment only contribute a gap of 0.
    """
    y = _binary_labels(y)
    env = np.asarray(getattr(split, "assignment", split)).ravel()
    if env.size != y.size:
        raise ValidationError("split does not match the labels")
    ids = np.unique(env)
    if ids.size > 2:
        raise ValidationError("sufficiency_gap compares exactly two environments")
    if ids.size < 2:
        raise DegenerateSplitError("both environments must be populated")
    in1, in2 = env == ids[0], env == ids[1]
    bins = _bin_scores(scores, n_bins)
    total = 0.0
    for b in np.unique(bins):
        m = bins == b
        a, c = m & in1, m & in2
        if a.any() and c.any():
            total += m.sum() * abs(y[a].mean() - y[c].mean())
    return float(total / y.size)


def delta_eic(scores, y, q, n_bins=10):
    """Binned squared difference of soft environment-conditional label means.

    Within each score bin the two means are weighted by ``q`` and ``1 - q``;
    bins where either environment has zero weight contribute nothing.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size != y.size:
        raise ValidationError("assignment does not match the labels")
    if np.any(q < 0) or np.any(q > 1):
        raise ValidationError("soft assignments must lie in [0, 1]")
    bins = _bin_scores(scores, n_bins)
    nb = int(n_bins)
    w1 = np.bincount(bins, weights=q, minlength=nb)
    w2 = np.bincount(bins, weights=1 - q, minlength=nb)
    s1 = np.bincount(bins, weights=q * y, minlength=nb)
    s2 = np.bincount(bins, weights=(1 - q) * y, minlength=nb)
    mass = np.bincount(bins, minlength=nb) / y.size
    ok = (w1 > 0) & (w2 > 0)
    diff = np.zeros(nb)
    diff[ok] = s1[ok] / w1[ok] - s2[ok] / w2[ok]
    return float(np.sum(mass * diff ** 2))


def mse_to_target(coef, target):
    """Mean squared deviation of coefficients from a target vector."""
    coef = np.asarray(coef, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if coef.shape != target.shape:
        raise ValidationError("coefficient and target shapes differ")
    return float(np.mean((coef - target) ** 2))


def causal_noncausal_mse(coef, n_causal):
    """Error of the ``[causal, noncausal]`` coefficient blocks against ``[1, 0]``."""
    coef = np.asarray(coef, dtype=np.float64).ravel()
    return (mse_to_target(coef[:n_causal], np.ones(n_causal)),
            mse_to_target(coef[n_causal:], np.zeros(coef.size - n_causal)))


__all__ = [
    "GroupMetrics", "CalibrationCurve", "evaluate", "group_accuracy", "calibration",
    "calibration_from_probs", "sufficiency_gap", "delta_eic", "mse_to_target",
    "causal_noncausal_mse",
]
