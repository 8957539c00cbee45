"""Seeded end-to-end pipelines: data -> reference -> environments -> learner -> metrics.

A run is described by one JSON document (see ``recipes/``).  Each arm of a
run names a learner, where its environments come from and, for inferred
environments, which reference model to use.  Results are written as plain
files so that rerunning a config with the same seeds reproduces them byte
for byte.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

from . import __version__
from .core import OptimizerConfig
from .datasets import (AdultAnalogConfig, ColorShapeConfig, ConfoundTargets, SemConfig,
                       confound_resample, featurize_adult, gen_adult_confounded,
                       gen_color_shape, gen_sem_regression, load_csv, save_column)
from .ei import (AlphaSpuriousReference, ColorReference, infer_env_binned,
                 infer_env_error_split, infer_env_gradient, harden, random_split,
                 reference_pack, split_objective)
from .exceptions import ConfigError, EIILError, StageError, ValidationError
from .learners import ERM, IRM, EnvSplit, GroupDRO, model_to_json
from .metrics import calibration, causal_noncausal_mse, evaluate

GENERATORS = ("color_shape", "sem", "adult", "csv")
LEARNER_TYPES = {"erm": ERM, "irm": IRM, "groupdro": GroupDRO}
ENV_SOURCES = ("none", "handcrafted", "inferred", "random")
EI_METHODS = ("gradient", "binned", "error_split")
EI_DEFAULTS = {"method": "gradient", "n_restarts": 5, "learning_rate": 1e-3,
               "n_steps": 10000, "normalization": "n", "n_bins": 10,
               "hardening": "threshold"}
EVAL_DEFAULTS = {"groupings": ["group"], "calibration_bins": 10}
_TOP_KEYS = {"name", "description", "dataset", "model", "learners", "ei", "arms",
             "evaluation", "seeds", "sweep"}
_ARM_KEYS = {"name", "learner", "envs", "reference", "params", "ei"}
_DATA_CONFIGS = {"color_shape": ColorShapeConfig, "sem": SemConfig, "adult": AdultAnalogConfig}


# --------------------------------------------------------------------------
# Config loading and validation
# --------------------------------------------------------------------------

def list_recipes():
    return sorted(p.name[:-5] for p in resources.files("eiil.recipes").iterdir()
                  if p.name.endswith(".json"))


def load_config(source):
    """Parse a config from a path, a shipped recipe name, JSON text or a dict.

    A ``manifest.json`` written by :func:`run` is accepted too; its embedded
    config is used.
    """
    if isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        text = None
        source = str(source)
        if os.path.exists(source):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        elif source in list_recipes():
            text = resources.files("eiil.recipes").joinpath(source + ".json").read_text("utf-8")
        elif source.lstrip().startswith("{"):
            text = source
        else:
            raise ConfigError(f"no config file or recipe named {source!r}")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in doc and "input_hash" in doc:
        doc = doc["config"]
    return doc


def _check_keys(where, doc, allowed):
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")


def _dataclass_fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _expand_dataset(ds):
    if not isinstance(ds, dict) or "generator" not in ds:
        raise ConfigError("dataset needs a 'generator'")
    gen = ds["generator"]
    if gen not in GENERATORS:
        raise ConfigError(f"unknown generator {gen!r}; choose from {list(GENERATORS)}")
    out = dict(ds)
    if gen == "csv":
        _check_keys("dataset", ds, {"generator", "train_path", "test_path", "task"})
        if "train_path" not in ds:
            raise ConfigError("csv dataset needs 'train_path'")
        return out
    allowed = {"generator", "params"} | ({"adult_path", "targets"} if gen == "adult" else set())
    _check_keys("dataset", ds, allowed)
    cls = _DATA_CONFIGS[gen]
    params = dict(ds.get("params") or {})
    bad = sorted(set(params) - _dataclass_fields(cls))
    if bad:
        raise ConfigError(f"dataset.params: unknown fields {bad}")
    params.pop("seed", None)
    try:
        inst = cls(seed=0, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset.params: {exc}") from exc
    full = dataclasses.asdict(inst)
    full.pop("seed")
    out["params"] = {k: list(v) if isinstance(v, tuple) else v for k, v in full.items()}
    if gen == "adult":
        targets = ds.get("targets") or {}
        try:
            t = ConfoundTargets(**targets)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dataset.targets: {exc}") from exc
        out["targets"] = {"train": list(t.train), "test": list(t.test)}
        path = ds.get("adult_path")
        if path is not None and not (isinstance(path, dict) and {"train", "test"} <= set(path)):
            raise ConfigError("adult_path must map 'train' and 'test' to raw UCI files")
    return out


def _learner_params(cfg, arm):
    kind = arm["learner"]
    params = dict(cfg.get("model") or {})
    params.update((cfg.get("learners") or {}).get(kind, {}))
    params.update(arm.get("params") or {})
    return params


def _check_estimator_params(where, cls, params):
    valid = set(cls().get_params())
    bad = sorted(set(params) - valid - {"task", "random_state"})
    if bad:
        raise ConfigError(f"{where}: unknown parameters {bad} for {cls.__name__}")
    try:
        cls(**params)._check_params()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def normalize_config(doc):
    """Validate every stage's settings and fill in defaults.

    Raises :class:`ConfigError` before anything is computed.
    """
    cfg = load_config(doc)
    _check_keys("config", cfg, _TOP_KEYS)
    cfg["name"] = str(cfg.get("name", "experiment"))
    cfg["dataset"] = _expand_dataset(cfg.get("dataset"))
    cfg["model"] = dict(cfg.get("model") or {})
    cfg["learners"] = {k: dict(v) for k, v in (cfg.get("learners") or {}).items()}
    for k in cfg["learners"]:
        if k not in LEARNER_TYPES:
            raise ConfigError(f"learners: unknown learner {k!r}")
    ei = dict(EI_DEFAULTS)
    ei.update(cfg.get("ei") or {})
    _check_keys("ei", ei, EI_DEFAULTS)
    cfg["ei"] = ei
    ev = dict(EVAL_DEFAULTS)
    ev.update(cfg.get("evaluation") or {})
    _check_keys("evaluation", ev, EVAL_DEFAULTS)
    if any(g not in ("group", "env") for g in ev["groupings"]):
        raise ConfigError("evaluation.groupings may contain 'group' and 'env'")
    if int(ev["calibration_bins"]) < 1:
        raise ConfigError("evaluation.calibration_bins must be >= 1")
    cfg["evaluation"] = ev

    seeds = cfg.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    cfg["seeds"] = seeds

    arms = cfg.get("arms")
    if not isinstance(arms, list) or not arms:
        raise ConfigError("config needs a non-empty 'arms' list")
    seen = {}
    norm_arms = []
    for i, arm in enumerate(arms):
        where = f"arms[{i}]"
        if not isinstance(arm, dict):
            raise ConfigError(f"{where} must be an object")
        _check_keys(where, arm, _ARM_KEYS)
        arm = dict(arm)
        name = arm.get("name")
        if not isinstance(name, str) or not name:
            raise ConfigError(f"{where} needs a name")
        if name in seen:
            raise ConfigError(f"duplicate arm name {name!r}")
        learner = arm.setdefault("learner", "erm")
        if learner not in LEARNER_TYPES:
            raise ConfigError(f"{where}: unknown learner {learner!r}")
        envs = arm.setdefault("envs", "none" if learner == "erm" else "inferred")
        if envs not in ENV_SOURCES:
            raise ConfigError(f"{where}: envs must be one of {list(ENV_SOURCES)}")
        if learner != "erm" and envs == "none":
            raise ConfigError(f"{where}: {learner} needs environments")
        if learner == "erm" and envs != "none":
            raise ConfigError(f"{where}: erm ignores environments; use envs='none'")
        if envs == "inferred":
            arm["reference"] = _check_reference(where, arm.get("reference"), seen, cfg)
            arm_ei = dict(ei)
            arm_ei.update(arm.get("ei") or {})
            _check_keys(f"{where}.ei", arm_ei, EI_DEFAULTS)
            if arm_ei["method"] not in EI_METHODS:
                raise ConfigError(f"{where}: unknown EI method {arm_ei['method']!r}")
            if arm_ei["normalization"] not in ("n", "mass"):
                raise ConfigError(f"{where}: unknown normalization")
            if arm_ei["hardening"] not in ("threshold", "bernoulli"):
                raise ConfigError(f"{where}: unknown hardening")
            if int(arm_ei["n_restarts"]) < 1 or int(arm_ei["n_bins"]) < 1:
                raise ConfigError(f"{where}: n_restarts and n_bins must be >= 1")
            arm["ei"] = arm_ei
        else:
            if "reference" in arm or "ei" in arm:
                raise ConfigError(f"{where}: 'reference'/'ei' only apply to inferred envs")
        if envs == "handcrafted" and cfg["dataset"]["generator"] == "adult":
            raise ConfigError(f"{where}: the tabular data has no handcrafted environments")
        arm["params"] = dict(arm.get("params") or {})
        _check_estimator_params(where, LEARNER_TYPES[learner], _learner_params(cfg, arm))
        seen[name] = arm
        norm_arms.append(arm)
    cfg["arms"] = norm_arms
    if "sweep" in cfg:
        sw = cfg["sweep"]
        if not isinstance(sw, dict) or set(sw) != {"axis", "values"}:
            raise ConfigError("sweep needs exactly 'axis' and 'values'")
        if not isinstance(sw["values"], list) or not sw["values"]:
            raise ConfigError("sweep values must be a non-empty list")
        get_path(cfg, sw["axis"])
    return cfg


def _check_reference(where, ref, seen, cfg):
    if ref is None:
        raise ConfigError(f"{where}: inferred environments need a 'reference'")
    if isinstance(ref, str):
        if ref not in seen or seen[ref]["learner"] != "erm":
            raise ConfigError(f"{where}: reference {ref!r} must name an earlier erm arm")
        return {"arm": ref}
    if not isinstance(ref, dict):
        raise ConfigError(f"{where}: malformed reference")
    ref = dict(ref)
    if "arm" in ref:
        return _check_reference(where, ref["arm"], seen, cfg)
    if "fixed" in ref:
        kind = ref["fixed"]
        if kind == "color":
            _check_keys(f"{where}.reference", ref, {"fixed", "confidence"})
            ref.setdefault("confidence", 0.85)
            if not 0.5 < ref["confidence"] < 1.0:
                raise ConfigError(f"{where}: color confidence must be in (0.5, 1)")
        elif kind == "alpha_spurious":
            _check_keys(f"{where}.reference", ref, {"fixed", "alpha"})
            ref.setdefault("alpha", 1.0)
            if not 0.0 <= ref["alpha"] <= 1.0:
                raise ConfigError(f"{where}: alpha must be in [0, 1]")
        else:
            raise ConfigError(f"{where}: unknown fixed reference {kind!r}")
        return ref
    if "learner" in ref:
        _check_keys(f"{where}.reference", ref, {"learner", "params"})
        if ref["learner"] != "erm":
            raise ConfigError(f"{where}: trained references must be erm")
        params = dict(cfg.get("model") or {})
        params.update(ref.get("params") or {})
        _check_estimator_params(f"{where}.reference", ERM, params)
        return {"learner": "erm", "params": dict(ref.get("params") or {})}
    raise ConfigError(f"{where}: reference needs 'arm', 'fixed' or 'learner'")


def get_path(cfg, path):
    """Resolve a dotted path (``arms.2.params.penalty_weight`` style) to a scalar."""
    node = cfg
    for part in path.split("."):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ConfigError(f"path {path!r}: bad list index {part!r}") from None
        elif isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise ConfigError(f"path {path!r} does not resolve (missing {part!r})")
    if isinstance(node, (dict, list)):
        raise ConfigError(f"path {path!r} is not a scalar field")
    return node


def set_path(cfg, path, value):
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return cfg


def apply_overrides(doc, overrides):
    """Apply ``path=value`` strings; values parse as JSON when possible."""
    cfg = load_config(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_path(cfg, path.strip(), value)
    return cfg


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (EIILError, ValueError, FloatingPointError, OSError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def make_data(ds, seed):
    """``(train, test)`` for a normalized dataset spec; ``test`` may be None."""
    gen = ds["generator"]
    if gen == "csv":
        train = load_csv(ds["train_path"], task=ds.get("task"))
        test = load_csv(ds["test_path"], task=ds.get("task")) if ds.get("test_path") else None
        return train, test
    cls = _DATA_CONFIGS[gen]
    cfg = cls(seed=seed, **ds["params"])
    if gen == "color_shape":
        return gen_color_shape(cfg, "train"), gen_color_shape(cfg, "test")
    if gen == "sem":
        return gen_sem_regression(cfg), None
    targets = ConfoundTargets(**ds["targets"])
    path = ds.get("adult_path")
    if path:
        out = []
        for k, part in enumerate(("train", "test")):
            base = featurize_adult(path[part], part)
            d = confound_resample(base, targets.rates(part), seed=seed * 2 + k)
            d.meta["source"] = "uci_adult"
            out.append(d)
        _align_columns(*out)
        return tuple(out)
    out = []
    for part in ("train", "test"):
        d = gen_adult_confounded(cfg, part, targets)
        d.meta["source"] = "synthetic_analog"
        d.meta["fallback"] = True
        out.append(d)
    return tuple(out)


def _align_columns(train, test):
    if train.n_features != test.n_features:
        raise ValidationError("train and test featurizations differ in width; "
                              "category levels must match across files")


def build_estimator(kind, params, task, seed):
    cls = LEARNER_TYPES[kind]
    return cls(task=task, random_state=seed, **params)


def fixed_reference(ref):
    if ref["fixed"] == "color":
        return ColorReference(confidence=ref["confidence"])
    return AlphaSpuriousReference(alpha=ref["alpha"])


def infer_split(ref_model, train, ei, seed):
    """Environment split inferred from a reference model on ``train``."""
    kind = "bce" if train.task == "classification" else "squared_error"
    pack = reference_pack(ref_model, train.X, train.y, kind)
    if ei["method"] == "binned":
        split = infer_env_binned(pack, int(ei["n_bins"]))
    elif ei["method"] == "error_split":
        split = infer_env_error_split(pack)
    else:
        opt = OptimizerConfig(method="adam", learning_rate=float(ei["learning_rate"]),
                              steps=int(ei["n_steps"]), seed=seed)
        q = infer_env_gradient(pack, opt, n_restarts=int(ei["n_restarts"]),
                               normalization=ei["normalization"])
        split = harden(q, ei["hardening"], seed)
    if split.degenerate:
        raise ValidationError(f"inferred split is degenerate {split.sizes}")
    return split, float(split_objective(pack, split, ei["normalization"]))


def arm_metrics(model, train, test, cfg, split=None):
    ev = cfg["evaluation"]
    out = {"scalars": {}}
    sc = out["scalars"]
    if train.task == "classification":
        for part_name, d in (("train", train), ("test", test)):
            if d is None:
                continue
            sc[f"{part_name}_accuracy"] = float(np.mean(model.predict(d.X) == d.y))
            for grouping in ev["groupings"]:
                if getattr(d, grouping) is None:
                    continue
                gm = evaluate(model, d, grouping=grouping)
                out[f"{part_name}_by_{grouping}"] = gm.to_dict()
                sc[f"{part_name}_worst_{grouping}_accuracy"] = gm.worst_group_accuracy
            cal = calibration(model, d, n_bins=int(ev["calibration_bins"]))
            out[f"{part_name}_calibration"] = cal.to_dict()
            sc[f"{part_name}_ece"] = cal.ece
        if split is not None:
            gm = evaluate(model, train, grouping="split", split=split)
            out["train_by_inferred_env"] = gm.to_dict()
    else:
        sc["train_mse"] = float(np.mean((model.predict(train.X) - train.y) ** 2))
        if test is not None:
            sc["test_mse"] = float(np.mean((model.predict(test.X) - test.y) ** 2))
        dim = train.meta.get("dim")
        if getattr(model, "architecture", None) == "linear" and dim:
            causal, noncausal = causal_noncausal_mse(model.coef_, int(dim))
            sc["causal_mse"] = causal
            sc["noncausal_mse"] = noncausal
            out["coef"] = [float(v) for v in model.coef_]
    return out


def _safe(name):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def run_seed(cfg, seed, seed_dir):
    """Run every arm for one seed and write its files into ``seed_dir``.

    On a stage failure the metrics collected so far are written with a
    ``failed_stage`` entry and the :class:`StageError` is re-raised.
    """
    os.makedirs(seed_dir, exist_ok=True)
    result = {"seed": seed, "config_hash": config_hash(cfg), "arms": {}}
    models = {}
    try:
        train, test = _stage("data", make_data, cfg["dataset"], seed)
        result["dataset"] = {"n_train": len(train), "n_test": None if test is None else len(test),
                             "task": train.task, "source": train.meta.get("source",
                                                                          train.meta.get("generator"))}
        if train.meta.get("fallback"):
            result["dataset"]["fallback"] = "synthetic analog (no raw file supplied)"
        refs = {}
        for arm in cfg["arms"]:
            name = arm["name"]
            params = _learner_params(cfg, arm)
            split, entry = None, {"learner": arm["learner"], "envs": arm["envs"]}
            if arm["envs"] == "handcrafted":
                if train.env is None:
                    raise StageError(f"envs:{name}", ValidationError("dataset has no env column"))
                envs = train.env
            elif arm["envs"] == "random":
                split = random_split(len(train), seed)
                envs = split
            elif arm["envs"] == "inferred":
                ref = arm["reference"]
                key = canonical_json(ref)
                if key not in refs:
                    if "arm" in ref:
                        refs[key] = models[ref["arm"]]
                    elif "fixed" in ref:
                        refs[key] = fixed_reference(ref)
                    else:
                        rp = dict(cfg["model"])
                        rp.update(ref["params"])
                        refs[key] = _stage("reference", lambda: build_estimator(
                            "erm", rp, train.task, seed).fit(train.X, train.y))
                split, objective = _stage(f"ei:{name}", infer_split, refs[key], train,
                                          arm["ei"], seed)
                entry["ei_objective"] = objective
                envs = split
            else:
                envs = None
            if split is not None:
                entry["split_sizes"] = list(split.sizes)
                save_column(os.path.join(seed_dir, f"envsplit_{_safe(name)}.csv"),
                            split.assignment, "env", integer=True)
            est = build_estimator(arm["learner"], params, train.task, seed)
            if envs is None:
                model = _stage(f"train:{name}", est.fit, train.X, train.y)
            else:
                model = _stage(f"train:{name}", est.fit, train.X, train.y, envs)
            models[name] = model
            model_to_json(model, os.path.join(seed_dir, f"model_{_safe(name)}.json"))
            entry.update(_stage(f"eval:{name}", arm_metrics, model, train, test, cfg, split))
            result["arms"][name] = entry
    except StageError as exc:
        result["failed_stage"] = exc.stage
        result["error"] = str(exc.cause)
        _write(os.path.join(seed_dir, "metrics.json"), canonical_json(result))
        raise
    _write(os.path.join(seed_dir, "metrics.json"), canonical_json(result))
    return result


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _sha_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _input_files(cfg):
    ds = cfg["dataset"]
    files = []
    if ds["generator"] == "csv":
        files += [ds["train_path"]] + ([ds["test_path"]] if ds.get("test_path") else [])
    elif ds["generator"] == "adult" and ds.get("adult_path"):
        files += [ds["adult_path"]["train"], ds["adult_path"]["test"]]
    elif ds["generator"] == "color_shape" and ds["params"].get("source") == "mnist":
        d = ds["params"]["mnist_dir"]
        files += sorted(os.path.join(d, f) for f in os.listdir(d) if "ubyte" in f)
    return files


def input_hash(cfg):
    """SHA-256 over the canonical config and the bytes of every input file.

    Unreadable inputs are hashed as a marker so a failed run still gets a
    manifest.
    """
    h = hashlib.sha256(canonical_json(cfg).encode())
    try:
        files = _input_files(cfg)
    except OSError:
        files = []
        h.update(b"<unlisted inputs>")
    for path in files:
        h.update(os.path.basename(path).encode())
        try:
            h.update(_sha_file(path).encode())
        except OSError:
            h.update(b"<missing>")
    return h.hexdigest()


def summarize(results):
    """Mean and sample std of every scalar metric, per arm, sorted for stability."""
    table = {}
    for res in sorted(results, key=lambda r: r["seed"]):
        for arm, entry in res["arms"].items():
            for metric, value in entry.get("scalars", {}).items():
                table.setdefault((arm, metric), []).append(value)
    rows = []
    arm_order = []
    for res in results:
        for arm in res["arms"]:
            if arm not in arm_order:
                arm_order.append(arm)
    for arm in arm_order:
        for (a, metric), vals in sorted(table.items()):
            if a != arm:
                continue
            v = np.asarray(vals, dtype=np.float64)
            std = float(v.std(ddof=1)) if v.size > 1 else 0.0
            rows.append({"arm": arm, "metric": metric, "mean": float(v.mean()),
                         "std": std, "n": int(v.size)})
    return rows


def write_summary(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "metric", "mean", "std", "n"])
        for r in rows:
            w.writerow([r["arm"], r["metric"], repr(r["mean"]), repr(r["std"]), r["n"]])


def _seed_job(args):
    cfg, seed, seed_dir = args
    return run_seed(cfg, seed, seed_dir)


def run(config, out_dir, seeds=None, jobs=1):
    """Run a config for every seed; returns ``(summary_rows, per_seed_results)``.

    Files written under ``out_dir``: ``seed_<s>/metrics.json``,
    ``seed_<s>/model_<arm>.json``, ``seed_<s>/envsplit_<arm>.csv``,
    ``summary.csv`` and ``manifest.json``.
    """
    cfg = normalize_config(config)
    if seeds is not None:
        cfg = normalize_config({**cfg, "seeds": list(seeds)})
    cfg.pop("sweep", None)
    os.makedirs(out_dir, exist_ok=True)
    jobs_args = [(cfg, s, os.path.join(out_dir, f"seed_{s}")) for s in cfg["seeds"]]
    results, failure = [], None
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_seed_job, a) for a in jobs_args]
            for fut in futures:
                try:
                    results.append(fut.result())
                except StageError as exc:
                    failure = failure or exc
    else:
        for a in jobs_args:
            try:
                results.append(_seed_job(a))
            except StageError as exc:
                failure = exc
                break
    rows = summarize(results)
    write_summary(rows, os.path.join(out_dir, "summary.csv"))
    _write_manifest(cfg, out_dir, failure)
    if failure is not None:
        raise failure
    return rows, results


def _write_manifest(cfg, out_dir, failure=None):
    outputs = {}
    for root, _, files in os.walk(out_dir):
        for f in sorted(files):
            if f == "manifest.json":
                continue
            full = os.path.join(root, f)
            outputs[os.path.relpath(full, out_dir).replace(os.sep, "/")] = _sha_file(full)
    manifest = {
        "config": cfg,
        "seeds": cfg["seeds"],
        "input_hash": input_hash(cfg),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "status": "ok" if failure is None else f"failed at stage {failure.stage}",
        "outputs": dict(sorted(outputs.items())),
    }
    _write(os.path.join(out_dir, "manifest.json"), canonical_json(manifest))
    return manifest


def _fmt_value(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep(config, out_dir, axis=None, values=None, seeds=None, jobs=1):
    """One :func:`run` per value of ``axis``; writes a long-format ``sweep.csv``.

    Columns: ``axis, value, seed, arm, metric, metric_value``.
    """
    cfg = normalize_config(config)
    if axis is None:
        if "sweep" not in cfg:
            raise ConfigError("no sweep axis given and the config has no 'sweep' block")
        axis, values = cfg["sweep"]["axis"], cfg["sweep"]["values"] if values is None else values
    if values is None or len(values) == 0:
        raise ConfigError("sweep needs at least one value")
    get_path(cfg, axis)
    base = {k: v for k, v in cfg.items() if k != "sweep"}
    # validate every point before running any of them
    points = [normalize_config(set_path(copy.deepcopy(base), axis, v)) for v in values]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    leaf = axis.split(".")[-1]
    for value, point in zip(values, points):
        sub = os.path.join(out_dir, f"{_safe(leaf)}={_safe(_fmt_value(value))}")
        _, results = run(point, sub, seeds=seeds, jobs=jobs)
        for res in sorted(results, key=lambda r: r["seed"]):
            for arm, entry in res["arms"].items():
                for metric, mv in sorted(entry.get("scalars", {}).items()):
                    rows.append([axis, _fmt_value(value), res["seed"], arm, metric, repr(mv)])
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "arm", "metric", "metric_value"])
        w.writerows(rows)
    return rows


def aggregate(rows_or_results, arm, metric):
    """Mean of ``metric`` for ``arm`` from summary rows or per-seed results."""
    vals = []
    for r in rows_or_results:
        if "arms" in r:
            v = r["arms"].get(arm, {}).get("scalars", {}).get(metric)
            if v is not None:
                vals.append(v)
        elif r.get("arm") == arm and r.get("metric") == metric:
            return r["mean"]
    return float(np.mean(vals)) if vals else math.nan


__all__ = [
    "load_config", "normalize_config", "apply_overrides", "list_recipes", "run", "sweep",
    "run_seed", "make_data", "infer_split", "summarize", "aggregate", "get_path", "set_path",
    "input_hash", "config_hash", "canonical_json", "EnvSplit",
]
