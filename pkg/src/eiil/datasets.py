"""Dataset container, synthetic generators, MNIST IDX ingestion and CSV I/O."""
from __future__ import annotations

import csv
import gzip
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import IngestionError, ParseError, ValidationError

RESERVED_COLUMNS = ("y", "env", "group")


@dataclass
class Dataset:
    """Feature matrix, labels and optional environment / subgroup ids.

    ``aux`` holds extra per-row arrays that generators expose for analysis
    (clean labels, color bits, ...); it is not written to CSV.
    """

    X: np.ndarray
    y: np.ndarray
    env: np.ndarray | None = None
    group: np.ndarray | None = None
    task: str = "classification"
    meta: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValidationError("X must be a 2-D matrix")
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        n = self.X.shape[0]
        if self.y.size != n:
            raise ValidationError(f"y has {self.y.size} entries, X has {n} rows")
        for name in ("env", "group"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v).ravel().astype(np.int64)
                if v.size != n:
                    raise ValidationError(f"{name} has {v.size} entries, X has {n} rows")
                setattr(self, name, v)
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.task == "classification" and not np.all((self.y == 0) | (self.y == 1)):
            raise ValidationError("classification labels must be in {0, 1}")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    def subset(self, index):
        index = np.asarray(index)
        pick = lambda v: None if v is None else v[index]
        return Dataset(self.X[index], self.y[index], pick(self.env), pick(self.group),
                       self.task, dict(self.meta),
                       {k: v[index] for k, v in self.aux.items()})


def _rng(seed, stream):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream])


# --------------------------------------------------------------------------
# Linear-Gaussian SEM regression
# --------------------------------------------------------------------------

@dataclass
class SemConfig:
    dim: int = 5
    env_noise_levels: tuple = (0.2, 2.0, 5.0)
    samples_per_env: int = 1000
    seed: int = 0
    causal_std: float = 5.0
    spurious_std: float = 1.0

    def __post_init__(self):
        self.env_noise_levels = tuple(float(s) for s in self.env_noise_levels)
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if len(self.env_noise_levels) < 2:
            raise ValidationError("at least two environments are required")
        if any(s < 0 for s in self.env_noise_levels):
            raise ValidationError("noise levels must be nonnegative")
        if self.samples_per_env < 1:
            raise ValidationError("samples_per_env must be positive")


def gen_sem_regression(cfg: SemConfig) -> Dataset:
    """Sample ``v -> y -> z`` chains, one block of rows per noise level.

    Per coordinate: ``v ~ N(0, causal_std^2)``, ``y = v + N(0, s_e^2)``,
    ``z = y + N(0, spurious_std^2)``.  Features are ``[v, z]`` and the target
    is the sum of the ``y`` coordinates, so the invariant solution is
    ``w = [1, ..., 1, 0, ..., 0]``.
    """
    rng = _rng(cfg.seed, 11)
    n, d = cfg.samples_per_env, cfg.dim
    Xs, ys, envs = [], [], []
    for e, s in enumerate(cfg.env_noise_levels):
        v = rng.normal(0.0, cfg.causal_std, size=(n, d))
        yv = v + rng.normal(0.0, 1.0, size=(n, d)) * s
        z = yv + rng.normal(0.0, 1.0, size=(n, d)) * cfg.spurious_std
        Xs.append(np.hstack([v, z]))
        ys.append(yv.sum(axis=1))
        envs.append(np.full(n, e))
    meta = {"generator": "sem_regression", **asdict(cfg)}
    meta["env_noise_levels"] = list(cfg.env_noise_levels)
    return Dataset(np.vstack(Xs), np.concatenate(ys), np.concatenate(envs),
                   task="regression", meta=meta)


# --------------------------------------------------------------------------
# Color / shape classification (CMNIST and a synthetic analog)
# --------------------------------------------------------------------------

@dataclass
class ColorShapeConfig:
    """Two-channel "colored digit" data.

    Color correlations are agreement probabilities between the color bit and
    the emitted (noisy) label.  With ``source='synthetic'`` the digit image
    is a noisy ``shape_dim``-pixel glyph drawn from ten fixed prototypes;
    ``shape_noise`` sets how often the glyph is ambiguous.
    """

    label_noise: float = 0.25
    train_color_correlations: tuple = (0.8, 0.9)
    test_color_correlation: float = 0.1
    source: str = "synthetic"
    samples_per_env: int = 2500
    test_samples: int = 5000
    seed: int = 0
    mnist_dir: str | None = None
    shape_dim: int = 16
    shape_noise: float = 0.3

    def __post_init__(self):
        self.train_color_correlations = tuple(float(c) for c in self.train_color_correlations)
        if not 0.0 <= self.label_noise < 1.0:
            raise ValidationError("label_noise must be in [0, 1)")
        for c in self.train_color_correlations + (self.test_color_correlation,):
            if not 0.0 <= c <= 1.0:
                raise ValidationError("color correlations must be in [0, 1]")
        if self.source not in ("synthetic", "mnist"):
            raise ValidationError(f"unknown source {self.source!r}")
        if self.source == "mnist" and not self.mnist_dir:
            raise ValidationError("source='mnist' requires mnist_dir")
        if self.samples_per_env < 1 or self.test_samples < 1:
            raise ValidationError("sample counts must be positive")


_GLYPH_SEED = 20210701


def glyph_prototypes(shape_dim=16):
    """Ten fixed prototype glyphs in ``[0, 1]^shape_dim`` (seed independent)."""
    return np.random.default_rng(_GLYPH_SEED).uniform(0.0, 1.0, size=(10, shape_dim))


def _synthetic_digits(rng, n, shape_dim, shape_noise):
    digits = rng.integers(0, 10, size=n)
    protos = glyph_prototypes(shape_dim)
    images = protos[digits] + shape_noise * rng.normal(size=(n, shape_dim))
    return np.clip(images, 0.0, 1.0), digits


def _colorize(rng, images, digits, label_noise, color_agreement):
    n = digits.size
    clean = (digits >= 5).astype(np.int64)
    y = clean ^ (rng.random(n) < label_noise)
    color = y ^ (rng.random(n) >= color_agreement)
    X = np.hstack([images * (color == 0)[:, None], images * (color == 1)[:, None]])
    return X, y.astype(np.float64), color.astype(np.int64), clean


def gen_color_shape(cfg: ColorShapeConfig, part="train") -> Dataset:
    """Train environments (``env`` = 0, 1, ...) or the held-out test environment.

    Labels are ``clean XOR Bernoulli(label_noise)`` where ``clean`` is 1 for
    digits 5-9.  The color bit agrees with the emitted label with the
    environment's correlation; ``group`` holds the color bit.
    """
    if part not in ("train", "test"):
        raise ValidationError("part must be 'train' or 'test'")
    rng = _rng(cfg.seed, 21 if part == "train" else 22)
    if part == "train":
        corrs = cfg.train_color_correlations
        sizes = [cfg.samples_per_env] * len(corrs)
    else:
        corrs = (cfg.test_color_correlation,)
        sizes = [cfg.test_samples]
    total = sum(sizes)

    if cfg.source == "synthetic":
        images, digits = _synthetic_digits(rng, total, cfg.shape_dim, cfg.shape_noise)
    else:
        images, digits = _mnist_pool(cfg, part, total, rng)

    parts, start = [], 0
    for e, (corr, n) in enumerate(zip(corrs, sizes)):
        sl = slice(start, start + n)
        start += n
        X, y, color, clean = _colorize(rng, images[sl], digits[sl], cfg.label_noise, corr)
        parts.append((X, y, np.full(n, e), color, clean, digits[sl]))
    X, y, env, color, clean, dig = (np.concatenate(cols) if k else np.vstack(cols)
                                    for k, cols in enumerate(zip(*parts)))
    meta = {"generator": "color_shape", "part": part, **asdict(cfg)}
    meta["train_color_correlations"] = list(cfg.train_color_correlations)
    return Dataset(X, y, env, color, meta=meta,
                   aux={"color": color, "clean_label": clean, "digit": dig})


def _mnist_pool(cfg, part, total, rng):
    images, labels = load_mnist(cfg.mnist_dir, kind="train")
    # 14x14 downsampling as in the standard two-channel construction
    images = images[:, ::2, ::2].reshape(len(images), -1) / 255.0
    if part == "train":
        pool = rng.permutation(min(50000, len(images)))
    else:
        pool = np.arange(50000, len(images))
    if total > pool.size:
        raise ValidationError(
            f"requested {total} {part} images but only {pool.size} are available")
    pick = pool[:total]
    return images[pick], labels[pick].astype(np.int64)


# --------------------------------------------------------------------------
# MNIST IDX files
# --------------------------------------------------------------------------

_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise IngestionError(f"missing MNIST file {os.path.join(directory, stem)}[.gz]")


def read_idx(path, expected_magic):
    """Read one big-endian IDX file into a uint8 array."""
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8:
        raise IngestionError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IngestionError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IngestionError(
            f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(directory, kind="train"):
    """Return ``(images[N, 28, 28] uint8, labels[N] uint8)`` from IDX files."""
    img_stem, lbl_stem = _IDX_NAMES[kind]
    images = read_idx(_find_idx(directory, img_stem), 0x00000803)
    labels = read_idx(_find_idx(directory, lbl_stem), 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{directory}: {images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def write_idx(path, array):
    """Write a uint8 array as an IDX file (used for fixtures and tests)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


# --------------------------------------------------------------------------
# Confounded resampling (Adult-Confounded construction)
# --------------------------------------------------------------------------

ADULT_TRAIN_RATES = (0.31, 0.11, 0.19, 0.06)
ADULT_TEST_RATES = (0.30, 0.12, 0.16, 0.04)


@dataclass
class ConfoundTargets:
    train: tuple = (0.94, 0.06, 0.94, 0.06)
    test: tuple = (0.06, 0.94, 0.06, 0.94)

    def __post_init__(self):
        self.train = tuple(float(r) for r in self.train)
        self.test = tuple(float(r) for r in self.test)
        for r in self.train + self.test:
            if not 0.0 < r < 1.0:
                raise ValidationError("target rates must lie strictly inside (0, 1)")

    def rates(self, part):
        return self.train if part == "train" else self.test


def confound_resample(base: Dataset, target_rates, seed) -> Dataset:
    """Resample ``base`` so that ``p(y=1 | group=g)`` matches ``target_rates[g]``.

    Each group keeps its size; rows are drawn with replacement within the
    group with weight ``target(y|g) / empirical(y|g)``.
    """
    if base.group is None:
        raise ValidationError("confound_resample needs group annotations")
    groups = np.unique(base.group)
    target_rates = np.asarray(target_rates, dtype=np.float64)
    if groups.min() < 0 or groups.max() >= target_rates.size:
        raise ValidationError("group ids must index into target_rates")
    empty = [(int(g), int(c)) for g in groups for c in (0, 1)
             if not np.any((base.group == g) & (base.y == c))]
    if empty:
        raise ValidationError(f"empty (group, label) cells: {empty}")
    rng = _rng(seed, 31)
    picks = []
    for g in groups:
        idx = np.flatnonzero(base.group == g)
        emp = base.y[idx].mean()
        t = target_rates[g]
        w = np.where(base.y[idx] == 1, t / emp, (1 - t) / (1 - emp))
        picks.append(rng.choice(idx, size=idx.size, replace=True, p=w / w.sum()))
    order = np.concatenate(picks)
    out = base.subset(order)
    out.meta = {**base.meta, "resampled_to": target_rates.tolist(), "resample_seed": int(seed)}
    return out


@dataclass
class AdultAnalogConfig:
    """Synthetic stand-in for UCI Adult used when no raw file is supplied.

    Four subgroups (sex x binarized race) with Adult-like sizes and base
    label rates.  ``n_signal`` covariates carry label information identically
    in every subgroup; the remaining columns reveal group membership.
    """

    n_train: int = 6000
    n_test: int = 4000
    group_proportions: tuple = (0.62, 0.28, 0.06, 0.04)
    n_signal: int = 4
    signal_strength: float = 0.45
    n_proxy: int = 2
    proxy_noise: float = 0.5
    seed: int = 0


def gen_adult_base(cfg: AdultAnalogConfig, part="train") -> Dataset:
    rng = _rng(cfg.seed, 41 if part == "train" else 42)
    n = cfg.n_train if part == "train" else cfg.n_test
    rates = ADULT_TRAIN_RATES if part == "train" else ADULT_TEST_RATES
    props = np.asarray(cfg.group_proportions, dtype=np.float64)
    counts = np.floor(props / props.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    group = np.repeat(np.arange(4), counts)
    y = np.zeros(n)
    for g in range(4):
        idx = np.flatnonzero(group == g)
        k = max(1, min(idx.size - 1, int(round(rates[g] * idx.size))))
        y[rng.permutation(idx)[:k]] = 1.0
    sign = 2.0 * y - 1.0
    signal = cfg.signal_strength * sign[:, None] + rng.normal(size=(n, cfg.n_signal))
    female = np.isin(group, (1, 3)).astype(np.float64)
    black = np.isin(group, (2, 3)).astype(np.float64)
    proxies = (2 * female - 1)[:, None] + cfg.proxy_noise * rng.normal(size=(n, cfg.n_proxy))
    X = np.hstack([signal, female[:, None], black[:, None], proxies])
    meta = {"generator": "adult_analog", "part": part, **asdict(cfg)}
    meta["group_proportions"] = list(cfg.group_proportions)
    return Dataset(X, y, group=group, meta=meta)


def gen_adult_confounded(cfg: AdultAnalogConfig, part="train", targets=None) -> Dataset:
    targets = targets or ConfoundTargets()
    base = gen_adult_base(cfg, part)
    return confound_resample(base, targets.rates(part),
                             seed=cfg.seed * 2 + (0 if part == "train" else 1))


def featurize_adult(path, part="train"):
    """Featurize a raw UCI Adult file (``adult.data`` / ``adult.test``).

    Continuous columns are z-scored, categoricals one-hot encoded; sensitive
    columns stay in the features.  ``group`` is sex x (Black / non-Black):
    0 non-Black male, 1 non-Black female, 2 Black male, 3 Black female.
    """
    names = ["age", "workclass", "fnlwgt", "education", "education-num",
             "marital-status", "occupation", "relationship", "race", "sex",
             "capital-gain", "capital-loss", "hours-per-week", "native-country", "income"]
    continuous = {"age", "fnlwgt", "education-num", "capital-gain", "capital-loss",
                  "hours-per-week"}
    rows = []
    try:
        with open(path, newline="") as fh:
            for line_no, rec in enumerate(csv.reader(fh, skipinitialspace=True), 1):
                if not rec or rec[0].startswith("|"):
                    continue
                if len(rec) != len(names):
                    raise ParseError(f"expected {len(names)} fields, got {len(rec)}", line_no)
                if "?" in rec:
                    continue
                rows.append(rec)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path}: no usable records")
    cols = list(zip(*rows))
    feats = []
    for name, col in zip(names, cols):
        if name in ("income",):
            continue
        if name in continuous:
            v = np.asarray(col, dtype=np.float64)
            feats.append(((v - v.mean()) / (v.std() or 1.0))[:, None])
        else:
            levels = sorted(set(col))
            feats.append(np.asarray([[c == lv for lv in levels] for c in col], dtype=np.float64))
    y = np.asarray([c.rstrip(".") == ">50K" for c in cols[-1]], dtype=np.float64)
    female = np.asarray([c == "Female" for c in cols[names.index("sex")]])
    black = np.asarray([c == "Black" for c in cols[names.index("race")]])
    group = female.astype(int) + 2 * black.astype(int)
    return Dataset(np.hstack(feats), y, group=group,
                   meta={"generator": "uci_adult", "path": os.path.abspath(path), "part": part})


# --------------------------------------------------------------------------
# CSV persistence
# --------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def save_csv(d: Dataset, path, sidecar=True):
    """Write ``x0..x{D-1}, y[, env][, group]`` with round-trip float formatting."""
    header = [f"x{j}" for j in range(d.n_features)] + ["y"]
    extra = [name for name in ("env", "group") if getattr(d, name) is not None]
    header += extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(d)):
            row = [_fmt(v) for v in d.X[i]] + [_fmt(d.y[i])]
            row += [str(int(getattr(d, name)[i])) for name in extra]
            w.writerow(row)
    if sidecar:
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump({"task": d.task, "meta": d.meta}, fh, indent=2, sort_keys=True,
                      default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_csv(path, task=None) -> Dataset:
    """Read a CSV written by :func:`save_csv` or by hand.

    Every non-reserved column is a feature.  The task comes from the JSON
    sidecar if present, else from ``task``, else it is inferred from the
    labels.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        if "y" not in header:
            raise ParseError("missing required column 'y'", 1)
        feat_idx = [k for k, h in enumerate(header) if h not in RESERVED_COLUMNS]
        rows = []
        for line_no, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line_no)
            try:
                rows.append([float(v) for v in rec])
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    col = {h: data[:, k] for k, h in enumerate(header)}
    meta = {}
    side = str(path) + ".json"
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            info = json.load(fh)
        meta = info.get("meta", {})
        task = task or info.get("task")
    y = col["y"]
    if task is None:
        task = "classification" if np.all((y == 0) | (y == 1)) else "regression"
    return Dataset(data[:, feat_idx], y,
                   col["env"].astype(np.int64) if "env" in col else None,
                   col["group"].astype(np.int64) if "group" in col else None,
                   task=task, meta=meta)


def save_column(path, values, name, integer=False):
    """One-column CSV aligned with dataset row order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([name])
        for v in np.asarray(values).ravel():
            w.writerow([str(int(v)) if integer else _fmt(v)])


def load_column(path, integer=False):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        vals = [r[0] for r in reader if r]
    return np.asarray([int(v) for v in vals] if integer else [float(v) for v in vals])


def feature_stats(d: Dataset):
    """Small summary used in manifests."""
    return {"n": len(d), "d": d.n_features,
            "label_mean": float(d.y.mean()) if len(d) else math.nan}
