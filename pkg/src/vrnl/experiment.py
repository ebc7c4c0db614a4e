"""Config handling and end-to-end runs shared by the command line and tests.

A config is a flat ``key = value`` text file. Every run resolves it against
``DEFAULTS`` and records the resolved dict in its summary, so the summary
alone is enough to repeat the run.
"""

import csv
import json
import logging
import os
import time
from contextlib import contextmanager

import numpy as np

from . import data, noise
from .classifier import CrossEntropyHead, ForwardHead, load_checkpoint, save_checkpoint
from .noise import perturb_and_normalize, save_matrix
from .numerics import rng_stream
from .risk import RiskSpec
from .trainer import (OptimizerConfig, PipelineConfig, diagnostics_pass, fit, read_report_csv,
                      report_summary, warmup)

log = logging.getLogger(__name__)

METHOD_NAMES = ("ce", "forward", "forward-vrnl", "reweight", "reweight-vrnl", "volmin", "volmin-vrnl")

DEFAULTS = {
    "dataset": "synthetic",
    "classes": 3,
    "dim": 2,
    "n": 3000,
    "n_test": 2000,
    "radius": 2.0,
    "scale": 1.0,
    "anchors_per_class": 1,
    "mnist_dir": "data/mnist",
    "mnist_subsample": 10000,
    "noise": "symmetric",
    "noise_rate": 0.2,
    "method": "forward-vrnl",
    "alpha": "auto",
    "lambda": 1e-4,
    "mean_mode": "batch",
    "weight_floor": 0.0,
    "lr": 1e-2,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "batch_size": 128,
    "epochs": 80,
    "lr_drops": "30,60",
    "drop_factor": 10.0,
    "seed": 0,
    "hidden": "auto",
    "val_fraction": 0.1,
    "warmup_epochs": 20,
    "percentile": 97.0,
    "transition": "estimated",
    "volmin_init": -4.0,
    "gammas": "0.01,0.05,0.10,0.15",
    "seeds": "0",
    "methods": "reweight,reweight-vrnl",
    "deterministic": False,
}

_INT_KEYS = {"classes", "dim", "n", "n_test", "anchors_per_class", "mnist_subsample", "batch_size",
             "epochs", "seed", "warmup_epochs"}
_FLOAT_KEYS = {"radius", "scale", "noise_rate", "lambda", "weight_floor", "lr", "momentum",
               "weight_decay", "drop_factor", "val_fraction", "percentile", "volmin_init"}


class ConfigError(ValueError):
    pass


def parse_config_text(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def load_config_file(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def _coerce(key, val):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if key in _INT_KEYS:
            return int(val)
        if key in _FLOAT_KEYS:
            return float(val)
        if key == "deterministic":
            return val if isinstance(val, bool) else str(val).lower() in ("1", "true", "yes", "on")
        if key == "alpha":
            return val if val == "auto" else float(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {val!r}") from exc
    return val


def default_alpha(method, noise_kind, dataset):
    """Regularisation strength used when ``alpha = auto``."""
    if not method.endswith("-vrnl"):
        return 0.0
    if method.startswith("volmin"):
        return 0.005 if noise_kind == "pair" and dataset == "mnist" else 0.05
    return 0.01 if noise_kind == "pair" else 0.1


def resolve(*layers):
    """Merge layers of raw settings over ``DEFAULTS`` (later layers win)."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, val in layer.items():
            cfg[key] = _coerce(key, val)
    if cfg["method"] not in METHOD_NAMES:
        raise ConfigError(f"unknown method {cfg['method']!r}; expected one of {METHOD_NAMES}")
    if cfg["noise"] not in noise.KINDS:
        raise ConfigError(f"unknown noise kind {cfg['noise']!r}")
    if cfg["dataset"] not in ("synthetic", "mnist"):
        raise ConfigError(f"unknown dataset {cfg['dataset']!r}")
    if cfg["alpha"] == "auto":
        cfg["alpha"] = default_alpha(cfg["method"], cfg["noise"], cfg["dataset"])
    if cfg["dataset"] == "mnist":
        cfg["classes"] = 10
    if cfg["hidden"] == "auto":
        cfg["hidden"] = "256" if cfg["dataset"] == "mnist" else "32,32"
    return cfg


def parse_list(text, kind=float):
    text = str(text).strip()
    return [kind(v) for v in text.split(",") if v.strip()] if text else []


def risk_spec(cfg, method=None):
    method = method or cfg["method"]
    base = method.removesuffix("-vrnl")
    alpha = cfg["alpha"] if method.endswith("-vrnl") or base == "ce" else 0.0
    return RiskSpec(base, alpha, cfg["lambda"], cfg["mean_mode"], cfg["weight_floor"])


def optimizer_config(cfg):
    return OptimizerConfig(cfg["lr"], cfg["momentum"], cfg["weight_decay"], cfg["batch_size"],
                           cfg["epochs"], tuple(parse_list(cfg["lr_drops"], int)),
                           cfg["drop_factor"], cfg["seed"])


def pipeline_config(cfg):
    return PipelineConfig(tuple(parse_list(cfg["hidden"], int)), cfg["warmup_epochs"],
                          cfg["percentile"], cfg["transition"], cfg["volmin_init"])


@contextmanager
def determinism(enabled):
    """Pin BLAS to one thread so every reduction runs in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- data --------------------------------------------------------------------

def true_transition(cfg):
    return noise.build(cfg["noise"], cfg["classes"], cfg["noise_rate"], cfg["seed"])


def noisy_pool(cfg):
    """The corrupted training pool (before the validation split) and the
    clean test set, plus the transition matrix used."""
    seed = cfg["seed"]
    if cfg["dataset"] == "synthetic":
        spec = data.SyntheticSpec(data.circle_means(cfg["classes"], cfg["dim"], cfg["radius"]),
                                  cfg["scale"], cfg["n"] + cfg["n_test"], seed,
                                  cfg["anchors_per_class"])
        ds, _ = data.generate_gaussian_mixture(spec)
        idx = np.arange(len(ds))
        is_test = (idx >= cfg["n"]) & ~ds.anchor
        pool, test = ds.subset(idx[~is_test]), ds.subset(idx[is_test])
    else:
        d = cfg["mnist_dir"]
        pool = data.load_idx(os.path.join(d, "train-images-idx3-ubyte"),
                             os.path.join(d, "train-labels-idx1-ubyte"))
        test = data.load_idx(os.path.join(d, "t10k-images-idx3-ubyte"),
                             os.path.join(d, "t10k-labels-idx1-ubyte"))
        pool = data.subsample(pool, cfg["mnist_subsample"], rng_stream(seed, "subsample"))
    T = true_transition(cfg)
    pool = data.corrupt(pool, T, rng_stream(seed, "corruption"))
    return pool, test, T


def prepare(cfg):
    """``(train, val, test, T)`` ready for training."""
    pool, test, T = noisy_pool(cfg)
    train, val = data.split(pool, cfg["val_fraction"], rng_stream(cfg["seed"], "split"))
    if cfg["dataset"] == "synthetic":
        train, val, test = data.standardize(train, val, test)
    return train, val, test, T


# -- runs ----------------------------------------------------------------------

def run_method(cfg, splits=None, method=None, T_override=None, warm=None):
    train, val, test, T = splits if splits is not None else prepare(cfg)
    return fit(risk_spec(cfg, method), train, val, test, optimizer_config(cfg), pipeline_config(cfg),
               n_classes=T.C, true_T=np.asarray(T), T_override=T_override, warm=warm)


def warm_model(cfg, splits):
    train, val, test, T = splits
    return warmup(train, val, test, optimizer_config(cfg), pipeline_config(cfg), T.C)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def cmd_corrupt(cfg, out):
    os.makedirs(out, exist_ok=True)
    with determinism(cfg["deterministic"]):
        pool, _, T = noisy_pool(cfg)
    data.export_csv(os.path.join(out, "dataset.csv"), pool)
    save_matrix(os.path.join(out, "transition.txt"), T,
                header=f"true transition: {cfg['noise']} rate {cfg['noise_rate']}")
    flips = int(pool.mislabeled().sum())
    write_json(os.path.join(out, "corrupt.json"), {"config": cfg, "n": len(pool), "n_flipped": flips,
                                                    "transition": np.asarray(T)})
    return pool, T


def cmd_train(cfg, out):
    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    with determinism(cfg["deterministic"]):
        splits = prepare(cfg)
        result = run_method(cfg, splits)
    rep = result.report
    rep.to_csv(os.path.join(out, "report.csv"))
    rep.diagnostics_to_csv(os.path.join(out, "diagnostics.csv"))
    if result.warmup is not None:
        result.warmup.to_csv(os.path.join(out, "warmup_report.csv"))
    extra = {"best_epoch": rep.best_epoch}
    if result.beta is not None:
        extra["beta"] = result.beta
    if result.transition is not None:
        extra["transition"] = np.asarray(result.transition)
        source = "learned jointly" if cfg["method"].startswith("volmin") else (
            "true matrix" if cfg["transition"] == "true" else
            f"anchor estimate, percentile {cfg['percentile']}")
        save_matrix(os.path.join(out, "transition_hat.txt"), result.transition,
                    header=f"{source}; method {cfg['method']}; seed {cfg['seed']}")
    save_checkpoint(os.path.join(out, "checkpoint.npz"), result.best_params, **extra)
    summary = {"config": cfg, **report_summary(result), "wall_time_s": time.time() - t0,
               "n_train": len(splits[0]), "n_val": len(splits[1]), "n_test": len(splits[2])}
    write_json(os.path.join(out, "summary.json"), summary)
    return result, summary


def bias_sweep(cfg):
    """Train every method in ``cfg['methods']`` with a perturbed true matrix
    for each gamma and seed; returns rows sorted by (method, gamma, seed)."""
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    bad = [m for m in methods if m not in METHOD_NAMES or m.startswith(("volmin", "ce"))]
    if bad:
        raise ConfigError(f"bias sweep needs forward/reweight methods, got {bad}")
    gammas, seeds = parse_list(cfg["gammas"]), parse_list(cfg["seeds"], int)
    rows = []
    for seed in seeds:
        scfg = dict(cfg, seed=seed)
        splits = prepare(scfg)
        T = splits[3]
        delta = rng_stream(seed, "perturbation").standard_normal((T.C, T.C))
        warm = warm_model(scfg, splits) if any(m.startswith("reweight") for m in methods) else None
        for gamma in gammas:
            T_n, eps = perturb_and_normalize(T, gamma, delta=delta)
            for method in methods:
                res = run_method(scfg, splits, method, T_override=np.asarray(T_n), warm=warm)
                rows.append({"method": method, "gamma": gamma, "seed": seed, "eps_T": eps,
                             "test_acc": res.report.best_row()["test_acc"],
                             "best_epoch": res.report.best_epoch})
                log.info("%s gamma=%.3f seed=%d eps_T=%.4f acc=%.4f", method, gamma, seed, eps,
                         rows[-1]["test_acc"])
    rows.sort(key=lambda r: (r["method"], r["gamma"], r["seed"]))
    return rows


BIAS_COLUMNS = ("method", "gamma", "seed", "eps_T", "test_acc", "best_epoch")


def cmd_bias_sweep(cfg, out):
    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    with determinism(cfg["deterministic"]):
        rows = bias_sweep(cfg)
    with open(os.path.join(out, "bias_sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BIAS_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in BIAS_COLUMNS])
    write_json(os.path.join(out, "summary.json"), {"config": cfg, "rows": rows,
                                                   "wall_time_s": time.time() - t0})
    return rows


SPLIT_COLUMNS = ("source", "epoch", "loss_correct", "loss_incorrect", "loss_var")


def cmd_diagnose(run_dir, out=None):
    """Re-emit the loss-split curves of a finished run and recompute the
    split for its saved checkpoint on the regenerated training set."""
    out = out or run_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(run_dir, "summary.json")) as fh:
        cfg = resolve(json.load(fh)["config"])
    params, extras = load_checkpoint(os.path.join(run_dir, "checkpoint.npz"))
    with determinism(cfg["deterministic"]):
        train, _, _, _ = prepare(cfg)
        if "transition" in extras and not cfg["method"].startswith("reweight"):
            head = ForwardHead(extras["transition"])
        else:
            head = CrossEntropyHead()
        split = diagnostics_pass(params, train, head, beta=extras.get("beta"))
    rows = [{"source": "report", **{k: r[k] for k in SPLIT_COLUMNS[1:]}}
            for r in read_report_csv(os.path.join(run_dir, "report.csv"))]
    rows.append({"source": "checkpoint", "epoch": int(extras.get("best_epoch", -1)),
                 "loss_correct": split.correct, "loss_incorrect": split.incorrect,
                 "loss_var": split.variance})
    with open(os.path.join(out, "loss_split.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPLIT_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in SPLIT_COLUMNS])
    return rows
