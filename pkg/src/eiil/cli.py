"""Command-line entry point (``eiil``).

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 audit failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import __version__
from .audit import AUDITS, format_table, run_audits
from .datasets import load_column, load_csv, save_column, save_csv
from .exceptions import ConfigError, EIILError, StageError
from .ei import random_split
from .experiments import (EI_DEFAULTS, apply_overrides, build_estimator, canonical_json,
                          fixed_reference, infer_split, load_config, make_data,
                          normalize_config, run, sweep)
from .learners import EnvSplit, model_from_json, model_to_json
from .metrics import calibration, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_AUDIT = 0, 2, 3, 4


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _value_list(text):
    out = []
    for raw in text.split(","):
        raw = raw.strip()
        if not raw:
            continue
        try:
            out.append(json.loads(raw))
        except json.JSONDecodeError:
            out.append(raw)
    return out


def _config(args, required=True):
    if getattr(args, "config", None) is None:
        if required:
            raise ConfigError("--config is required")
        return None
    cfg = apply_overrides(args.config, getattr(args, "grid", None))
    return normalize_config(cfg)


def _seed(args):
    return 0 if args.seed is None else args.seed


def _learner_defaults(cfg, kind):
    params = dict(cfg["model"]) if cfg else {}
    if cfg:
        params.update(cfg["learners"].get(kind, {}))
    return params


def cmd_gen_data(args):
    cfg = _config(args)
    seed = _seed(args)
    train, test = make_data(cfg["dataset"], seed)
    os.makedirs(args.out, exist_ok=True)
    save_csv(train, os.path.join(args.out, "train.csv"))
    written = ["train.csv"]
    if test is not None:
        save_csv(test, os.path.join(args.out, "test.csv"))
        written.append("test.csv")
    print(f"wrote {', '.join(written)} to {args.out}")
    return EXIT_OK


def _load_data(path, task=None):
    return load_csv(path, task=task)


def cmd_train_ref(args):
    cfg = _config(args, required=False)
    d = _load_data(args.data)
    params = _learner_defaults(cfg, "erm")
    model = build_estimator("erm", params, d.task, _seed(args)).fit(d.X, d.y)
    model_to_json(model, args.out)
    print(f"reference model written to {args.out}")
    return EXIT_OK


def cmd_infer_env(args):
    cfg = _config(args, required=False)
    d = _load_data(args.data)
    ei = dict(cfg["ei"]) if cfg else {}
    ei = {**EI_DEFAULTS, **ei}
    if args.method:
        ei["method"] = args.method
    if args.restarts is not None:
        ei["n_restarts"] = args.restarts
    if args.model and args.fixed:
        raise ConfigError("give either --model or --fixed, not both")
    if args.model:
        ref = model_from_json(args.model)
    elif args.fixed:
        spec = {"fixed": args.fixed, "confidence": 0.85, "alpha": args.alpha}
        ref = fixed_reference(spec)
    else:
        raise ConfigError("infer-env needs --model or --fixed")
    split, objective = infer_split(ref, d, ei, _seed(args))
    save_column(args.out, split.assignment, "env", integer=True)
    print(f"environment sizes {split.sizes}, objective {objective:.6g}; written to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args, required=False)
    d = _load_data(args.data)
    params = _learner_defaults(cfg, args.learner)
    est = build_estimator(args.learner, params, d.task, _seed(args))
    if args.learner == "erm":
        model = est.fit(d.X, d.y)
    else:
        if args.envs == "handcrafted":
            if d.env is None:
                raise ConfigError("dataset has no env column for --envs handcrafted")
            envs = d.env
        elif args.envs == "random":
            envs = random_split(len(d), _seed(args))
        elif args.envs:
            envs = EnvSplit(load_column(args.envs, integer=True))
        else:
            raise ConfigError(f"{args.learner} needs --envs (a split CSV, 'handcrafted' or 'random')")
        model = est.fit(d.X, d.y, envs)
    model_to_json(model, args.out)
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    d = _load_data(args.data)
    model = model_from_json(args.model)
    out = {}
    if d.task == "classification":
        out["accuracy"] = float(np.mean(model.predict(d.X) == d.y))
        for grouping in ("group", "env"):
            if getattr(d, grouping) is not None:
                out[f"by_{grouping}"] = evaluate(model, d, grouping=grouping).to_dict()
        cal = calibration(model, d, n_bins=args.bins)
        out["calibration"] = cal.to_dict()
        if args.calibration_csv:
            cal.to_csv(args.calibration_csv)
    else:
        out["mse"] = float(np.mean((model.predict(d.X) - d.y) ** 2))
    text = canonical_json(out)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def _print_summary(rows):
    for r in rows:
        print(f"{r['arm']:<16} {r['metric']:<32} {r['mean']:.4f} +/- {r['std']:.4f} (n={r['n']})")


def cmd_run(args):
    cfg = _config(args)
    rows, _ = run(cfg, args.out, seeds=args.seeds or ([args.seed] if args.seed is not None else None),
                  jobs=args.jobs)
    _print_summary(rows)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    values = _value_list(args.values) if args.values is not None else None
    if args.values is not None and not values:
        raise ConfigError("--values is empty")
    seeds = args.seeds or ([args.seed] if args.seed is not None else None)
    rows = sweep(cfg, args.out, axis=args.axis, values=values, seeds=seeds, jobs=args.jobs)
    print(f"{len(rows)} rows written to {os.path.join(args.out, 'sweep.csv')}")
    return EXIT_OK


def cmd_audit(args):
    overrides = {}
    if args.config:
        doc = load_config(args.config)
        overrides = {k: dict(v) for k, v in doc.get("audits", {}).items()}
        unknown = sorted(set(overrides) - set(AUDITS))
        if unknown:
            raise ConfigError(f"unknown audits in config: {unknown}")
    names = list(AUDITS) if args.which == "all" else [args.which]
    for name in names:
        o = overrides.setdefault(name, {})
        if args.seed is not None:
            o["seed"] = args.seed
        if args.n is not None:
            o["n_per_env" if name == "cmnist-gap" else "n"] = args.n
        if args.correlations and name == "cmnist-gap":
            o["correlations"] = tuple(_value_list(args.correlations))
    if "cmnist-gap" in overrides and "correlations" in overrides["cmnist-gap"]:
        overrides["cmnist-gap"]["correlations"] = tuple(overrides["cmnist-gap"]["correlations"])
    reports = run_audits(args.which, **overrides)
    print(format_table(reports))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(canonical_json([r.to_dict() for r in reports]))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_AUDIT


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or shipped recipe name")
    common.add_argument("--seed", type=int, help="single seed")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads (default: library default)")
    common.add_argument("--grid", action="append", metavar="PATH=VALUE",
                        help="override a config field, e.g. model.learning_rate=0.002 (repeatable)")

    p = argparse.ArgumentParser(prog="eiil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate train/test CSVs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-ref", parents=[common], help="train an ERM reference model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_ref)

    s = sub.add_parser("infer-env", parents=[common], help="infer a two-environment split")
    s.add_argument("--data", required=True)
    s.add_argument("--model", help="reference model JSON")
    s.add_argument("--fixed", choices=["color", "alpha_spurious"], help="hand-coded reference")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--method", choices=["gradient", "binned", "error_split"])
    s.add_argument("--restarts", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer_env)

    s = sub.add_parser("train", parents=[common], help="train ERM, IRM or GroupDRO")
    s.add_argument("--data", required=True)
    s.add_argument("--learner", choices=["erm", "irm", "groupdro"], default="irm")
    s.add_argument("--envs", help="split CSV, 'handcrafted' or 'random'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a model on a CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--calibration-csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", parents=[common], help="run a full experiment config")
    s.add_argument("--seeds", type=_seed_list, help="comma-separated seeds")
    s.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="run a config once per axis value")
    s.add_argument("--axis", help="dotted config path, e.g. dataset.params.label_noise")
    s.add_argument("--values", help="comma-separated values")
    s.add_argument("--seeds", type=_seed_list)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("audit", parents=[common], help="numerical checks of the theory")
    s.add_argument("which", nargs="?", default="all", choices=["all", *AUDITS])
    s.add_argument("--n", type=int, help="sample size (examples, or per env for cmnist-gap)")
    s.add_argument("--correlations", help="two color correlations, e.g. 0.8,0.9")
    s.add_argument("--out", help="write reports as JSON")
    s.set_defaults(func=cmd_audit)
    return p


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (EIILError, ValueError, OSError) as exc:
        print(f"stage failure [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
