"""Numerical checks of the invariance-violation claims behind environment inference.

Each audit returns an :class:`AuditReport` whose ``passed`` flag is computed
only from the observed numbers and the stated tolerances.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import ColorShapeConfig, gen_color_shape
from .ei import ReferencePack, confidence_bins, infer_env_binned
from .exceptions import ConfigError
from .metrics import sufficiency_gap

MAX_ENUMERATION_BITS = 20
_CHUNK = 1 << 14


@dataclass
class AuditReport:
    claim_id: str
    passed: bool
    observed: dict
    tolerance: dict
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"claim_id": self.claim_id, "passed": bool(self.passed),
                "observed": _plain(self.observed), "tolerance": _plain(self.tolerance),
                "details": _plain(self.details)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def check_enumeration_size(n):
    if n > MAX_ENUMERATION_BITS:
        raise ConfigError(f"exhaustive search over 2^{n} assignments exceeds the "
                          f"2^{MAX_ENUMERATION_BITS} limit")
    if n < 2:
        raise ConfigError("exhaustive search needs at least two examples")


def assignment_chunks(n):
    """Yield ``(codes, B)``: integer codes and 0/1 rows of every assignment.

    Row bit ``j`` set means example ``j`` is in environment 1.
    """
    check_enumeration_size(n)
    shifts = np.arange(n, dtype=np.int64)
    total = 1 << n
    for start in range(0, total, _CHUNK):
        codes = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        yield codes, ((codes[:, None] >> shifts) & 1).astype(np.float64)


def encode(env1_mask):
    bits = np.asarray(env1_mask, dtype=bool).ravel()
    return int(np.sum(bits.astype(np.int64) << np.arange(bits.size, dtype=np.int64)))


def _hard_objective(B, g, normalization):
    n = g.size
    s = B @ g
    t = g.sum() - s
    if normalization == "n":
        return (s / n) ** 2 + (t / n) ** 2
    m1 = B.sum(axis=1)
    m2 = n - m1
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (s / m1) ** 2 + (t / m2) ** 2
    return np.where((m1 > 0) & (m2 > 0), val, -np.inf)


def _binned_stat(B, y, bins, power):
    n = y.size
    out = np.zeros(B.shape[0])
    for b in np.unique(bins):
        m = bins == b
        nb = m.sum()
        c1 = B[:, m].sum(axis=1)
        y1 = B[:, m] @ y[m]
        c2 = nb - c1
        y2 = y[m].sum() - y1
        ok = (c1 > 0) & (c2 > 0)
        diff = np.zeros(B.shape[0])
        diff[ok] = y1[ok] / c1[ok] - y2[ok] / c2[ok]
        out += nb / n * np.abs(diff) ** power
    return out


def exhaustive_search(n, value_fn, atol=1e-12):
    """Maximum of ``value_fn(B)`` over all ``2^n`` hard assignments.

    Returns ``(max_value, argmax_codes)`` with every code within ``atol``.
    """
    best = -np.inf
    winners = []
    for codes, B in assignment_chunks(n):
        vals = value_fn(B)
        top = vals.max()
        if top > best + atol:
            best = top
            winners = []
        if top >= best - atol:
            winners.extend(codes[vals >= best - atol].tolist())
    return float(best), winners


# --------------------------------------------------------------------------
# Maximal violation by the y = z partition
# --------------------------------------------------------------------------

def binary_spurious_data(n, seed, v_noise=0.25, z_noise=0.1):
    """Binary ``(v, z, y)``: ``v`` and ``z`` are noisy copies of ``y``.

    ``z`` agrees with ``y`` more often, so it looks like the better feature,
    but its agreement is the part an environment split can reverse.
    """
    rng = np.random.default_rng([int(seed), 7])
    y = rng.integers(0, 2, size=n)
    v = y ^ (rng.random(n) < v_noise)
    z = y ^ (rng.random(n) < z_noise)
    # both z-values and both partition cells must appear for the claim to be testable
    if n >= 4:
        y[:4] = [0, 1, 0, 1]
        v[:4] = [0, 1, 1, 0]
        z[:4] = [0, 1, 1, 0]
    return v.astype(np.float64), z.astype(np.float64), y.astype(np.float64)


def audit_prop1(n=12, seed=0, exhaustive=True, tol=1e-9):
    """Check that ``{y=z} / {y!=z}`` makes the spurious scorer maximally non-invariant.

    (a) Under that partition, ``S = z`` reaches gap 1, the largest value in
    the scorer family ``{v, z, not z, constant, v xor z}``.  (b) With
    ``S = z`` fixed, no partition of the ``n`` examples beats it (exhaustive
    search, ``n <= 20``).
    """
    if exhaustive:
        check_enumeration_size(n)
    elif n < 4:
        raise ConfigError("audit_prop1 needs n >= 4")
    v, z, y = binary_spurious_data(n, seed)
    split = np.where(y == z, 1, 2)
    scorers = {"v": v, "z": z, "not_z": 1.0 - z, "constant": np.full(n, 0.5),
               "v_xor_z": np.abs(v - z)}
    gaps = {k: sufficiency_gap(s, y, split, n_bins=2) for k, s in scorers.items()}
    claim_a = abs(gaps["z"] - 1.0) <= tol and all(gaps["z"] >= g - tol for g in gaps.values())

    # the z=1 cell: label mean inside the y=z env minus label mean in the other
    z1 = z == 1
    cell = abs(y[z1 & (split == 1)].mean() - y[z1 & (split == 2)].mean())
    observed = {"gaps_by_scorer": gaps, "cell_contribution": cell}
    details = {"n": n, "seed": seed, "split_sizes": [int((split == 1).sum()), int((split == 2).sum())]}
    passed = claim_a and cell == 1.0
    if exhaustive:
        zb = np.minimum((z * 2).astype(np.int64), 1)
        best, winners = exhaustive_search(n, lambda B: _binned_stat(B, y, zb, 1))
        code = encode(split == 1)
        observed["exhaustive_max_gap"] = best
        observed["partition_gap"] = gaps["z"]
        details["partition_is_argmax"] = code in winners
        details["n_argmax"] = len(winners)
        passed = passed and code in winners and abs(best - gaps["z"]) <= tol
    return AuditReport("prop1", bool(passed), observed, {"abs": tol}, details)


# --------------------------------------------------------------------------
# Soft-penalty objective vs. binned invariance violation
# --------------------------------------------------------------------------

def confident_pack(n, seed, accuracy=0.7, low=2.0, high=5.0):
    """Random pack whose logits are far from zero; about ``accuracy`` correct."""
    rng = np.random.default_rng([int(seed), 13])
    sign = rng.choice([-1.0, 1.0], size=n)
    logits = sign * rng.uniform(low, high, size=n)
    pred = (sign > 0).astype(np.float64)
    y = np.where(rng.random(n) < accuracy, pred, 1.0 - pred)
    return ReferencePack.from_logits(logits, y)


def audit_b2_equivalence(n=10, seed=0, n_bins=10, normalization="n", pack=None, atol=1e-12):
    """Exhaustively compare the soft-penalty objective with binned ΔEIC.

    Passes when the per-bin label split lies in the argmax set of both the
    penalty objective (``normalization``) and ΔEIC.  The same check under the
    other normalization is reported in ``details`` without affecting
    ``passed``.
    """
    if n > 16:
        raise ConfigError("audit_b2_equivalence is limited to n <= 16")
    pack = pack if pack is not None else confident_pack(n, seed)
    n = len(pack)
    check_enumeration_size(n)
    g, y = pack.grad_factors, pack.labels
    bins = confidence_bins(pack.probabilities, n_bins)
    label_split = infer_env_binned(pack, n_bins)
    code = encode(label_split.assignment == 1)
    swapped = encode(label_split.assignment == 2)

    results = {}
    for norm in ("n", "mass"):
        best, winners = exhaustive_search(n, lambda B, nm=norm: _hard_objective(B, g, nm), atol)
        results[norm] = (best, set(winners))
    eic_best, eic_winners = exhaustive_search(n, lambda B: _binned_stat(B, y, bins, 2), atol)
    eic_winners = set(eic_winners)

    def value_at(c, fn):
        B = ((np.array([[c]], dtype=np.int64) >> np.arange(n)) & 1).astype(np.float64)
        return float(fn(B)[0])

    d_label = value_at(code, lambda B: _hard_objective(B, g, normalization))
    d_swap = value_at(swapped, lambda B: _hard_objective(B, g, normalization))
    eic_label = value_at(code, lambda B: _binned_stat(B, y, bins, 2))
    best, winners = results[normalization]
    other = "mass" if normalization == "n" else "n"
    passed = (code in winners and code in eic_winners and bool(winners & eic_winners)
              and abs(d_label - d_swap) <= atol)
    observed = {"max_objective": best, "label_split_objective": d_label,
                "swapped_objective": d_swap, "max_delta_eic": eic_best,
                "label_split_delta_eic": eic_label}
    details = {
        "n": n, "seed": seed, "n_bins": n_bins, "normalization": normalization,
        "label_split_code": code,
        "objective_argmax": sorted(winners), "delta_eic_argmax_count": len(eic_winners),
        "argmax_intersection": sorted(winners & eic_winners),
        "degenerate_codes_excluded_under_mass": [0, (1 << n) - 1],
        f"label_split_in_{other}_argmax": code in results[other][1],
        f"max_objective_{other}": results[other][0],
    }
    return AuditReport("b2", bool(passed), observed, {"abs": atol}, details)


# --------------------------------------------------------------------------
# Color-classifier sufficiency gap on the two-color construction
# --------------------------------------------------------------------------

def audit_cmnist_gap(n_per_env=25000, seed=0, correlations=(0.8, 0.9), label_noise=0.25,
                     expected=None, tol=0.02, split_floor=0.98):
    """Sufficiency gap of the color scorer under handcrafted and ``y = color`` envs.

    ``expected`` defaults to the difference of the two color correlations.
    """
    cfg = ColorShapeConfig(label_noise=label_noise, train_color_correlations=tuple(correlations),
                           samples_per_env=n_per_env, seed=seed)
    d = gen_color_shape(cfg, "train")
    color = d.aux["color"].astype(np.float64)
    hand = sufficiency_gap(color, d.y, d.env, n_bins=2)
    yz = np.where(d.y == color, 1, 2)
    split_gap = sufficiency_gap(color, d.y, yz, n_bins=2)
    expected = abs(correlations[1] - correlations[0]) if expected is None else expected
    passed = abs(hand - expected) <= tol and split_gap >= split_floor
    return AuditReport(
        "cmnist-gap", bool(passed),
        {"handcrafted_gap": hand, "label_color_split_gap": split_gap},
        {"handcrafted_expected": expected, "handcrafted_abs": tol,
         "split_floor": split_floor},
        {"n_per_env": n_per_env, "seed": seed, "correlations": list(correlations),
         "label_noise": label_noise},
    )


AUDITS = {"prop1": audit_prop1, "b2": audit_b2_equivalence, "cmnist-gap": audit_cmnist_gap}


def run_audits(which="all", **overrides):
    """Run the named audits (or all); ``overrides`` maps audit name to kwargs."""
    names = list(AUDITS) if which == "all" else [which]
    unknown = [w for w in names if w not in AUDITS]
    if unknown:
        raise ConfigError(f"unknown audit {unknown[0]!r}; choose from {sorted(AUDITS)} or 'all'")
    return [AUDITS[name](**overrides.get(name, {})) for name in names]


def format_table(reports):
    rows = [f"{'audit':<12} {'result':<6} observed"]
    for r in reports:
        obs = ", ".join(f"{k}={_short(v)}" for k, v in r.observed.items())
        rows.append(f"{r.claim_id:<12} {'PASS' if r.passed else 'FAIL':<6} {obs}")
    return "\n".join(rows)


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_short(x)}" for k, x in v.items()) + "}"
    return str(v)
