"""Experiment runner.

    dualctr <mode> [--config FILE] [--seed 0,1,2] [--out DIR] [--print-config]

Modes: train, simulate, replay, generate-log, diagnose. Every mode runs once
per seed and writes into ``<out>/seed-<s>/``; a ``summary.tsv`` with mean,
std and median over seeds goes to ``<out>``.

Exit codes: 0 ok, 2 config error, 3 io error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np
import yaml

from . import data as dt
from . import dnn, environment as env, metrics, svgp
from .mapping import SparseBatch
from .numkit import NumericalError
from .replay import replay
from .strategies import STRATEGIES, make_strategy

MODES = ("train", "simulate", "replay", "generate-log", "diagnose")
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _dual_defaults():
    d = asdict(svgp.DualConfig())
    d["hidden"] = list(d["hidden"])
    return d


def _dnn_defaults():
    d = asdict(dnn.DnnConfig())
    d["hidden"] = list(d["hidden"])
    return d


DEFAULTS = {
    "mode": "simulate",
    "seeds": [0],
    "out": "runs",
    "workers": 1,
    "environment": {"name": "cold_start", "params": {}},
    "strategies": ["dual-ts", "dual-greedy", "dnn-greedy", "dnn-epsilon-greedy"],
    "kappa": 1.0,
    "epsilon": 0.1,
    "prior_c": 1.0,
    "model": _dual_defaults(),
    "dnn": _dnn_defaults(),
    "schedule": asdict(env.Schedule()),
    "keep_records": True,
    "generate_log": {"entries": 20000},
    "replay": {"log": None, "update_every": 800, "pretrain_first": 800, "epochs": 1, "pretrain_epochs": 10},
    "train": {"data": None, "family": "dual", "n": 500, "eval_n": 500},
    "diagnose": {"checkpoint": None, "data": None, "bins": 10, "cut": 0.01},
}

ENVIRONMENTS = {
    "fig2": lambda rng, p: env.fig2_scenario(**p),
    "cold_start": lambda rng, p: env.cold_start_scenario(rng, **p),
    "r6b": lambda rng, p: env.r6b_scenario(rng, **p),
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        # free-form sub-dicts (scenario parameters) are replaced, not merged
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "params":
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_seeds(text):
    """``"0,1,2"`` or ``"0-31"`` or a mix of both."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError as e:
            raise ConfigError(f"bad seed list {text!r}") from e
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def dual_config(cfg, mean_c=None):
    m = dict(cfg["model"])
    m["hidden"] = tuple(m["hidden"])
    if mean_c is not None:
        m["mean_c"] = mean_c
    return svgp.DualConfig(**m)


def dnn_config(cfg):
    m = dict(cfg["dnn"])
    m["hidden"] = tuple(m["hidden"])
    return dnn.DnnConfig(**m)


def validate(cfg):
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if not isinstance(cfg["seeds"], list) or not cfg["seeds"]:
        raise ConfigError("seeds must be a nonempty list")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    try:
        dual_config(cfg).validate()
        dnn_config(cfg).validate()
        env.Schedule(**cfg["schedule"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if cfg["kappa"] < 0:
        raise ConfigError("kappa must be >= 0")
    if not 0 <= cfg["epsilon"] <= 1:
        raise ConfigError("epsilon must lie in [0, 1]")
    if cfg["environment"]["name"] not in ENVIRONMENTS:
        raise ConfigError(f"environment.name must be one of {sorted(ENVIRONMENTS)}")
    if cfg["mode"] in ("simulate", "replay"):
        for s in cfg["strategies"]:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; choose from {sorted(STRATEGIES)}")
    if cfg["mode"] == "replay" and not cfg["replay"]["log"]:
        raise ConfigError("replay mode needs replay.log")
    if cfg["mode"] == "replay" and int(cfg["replay"]["update_every"]) < 1:
        raise ConfigError("replay.update_every must be >= 1")
    if cfg["mode"] == "diagnose" and not cfg["diagnose"]["checkpoint"]:
        raise ConfigError("diagnose mode needs diagnose.checkpoint")
    if cfg["train"]["family"] not in ("dual", "dnn"):
        raise ConfigError("train.family must be dual or dnn")
    return cfg


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


# ---------------------------------------------------------------- helpers

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_tsv(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(x) for x in r) + "\n")


def read_tsv(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        return header, [line.rstrip("\n").split("\t") for line in fh if line.strip()]


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std()), float(np.median(v))


def seed_rngs(seed):
    """(environment construction, model initialization) generators for a seed."""
    a, b = np.random.SeedSequence([seed, 7]).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def build_environment(cfg, seed):
    e = cfg["environment"]
    return ENVIRONMENTS[e["name"]](seed_rngs(seed)[0], dict(e.get("params") or {}))


def make_model(family, fields, cfg, seed):
    rng = seed_rngs(seed)[1]
    if family == "dual":
        return svgp.DualModel(fields, dual_config(cfg), rng)
    if family == "dual-prior":
        return svgp.DualModel(fields, dual_config(cfg, mean_c=cfg["prior_c"]), rng)
    if family == "dnn":
        return dnn.LogitModel(fields, dnn_config(cfg), rng)
    return None


def save_model(model, path):
    if isinstance(model, svgp.DualModel):
        svgp.save_checkpoint(model, path)
    elif isinstance(model, dnn.LogitModel):
        dnn.save_checkpoint(model, path)


def load_model(path, cfg=None):
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["kind"]) if "kind" in z.files else ""
    if kind == svgp.CHECKPOINT_KIND:
        return svgp.load_checkpoint(path, dual_config(cfg) if cfg else None)
    if kind == dnn.CHECKPOINT_KIND:
        return dnn.load_checkpoint(path, dnn_config(cfg) if cfg else None)
    raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")


def strategy_cfg(cfg):
    return {"kappa": cfg["kappa"], "epsilon": cfg["epsilon"]}


def _seed_dir(cfg, seed, *parts):
    d = os.path.join(cfg["out"], f"seed-{seed}", *parts)
    os.makedirs(d, exist_ok=True)
    return d


def _template(path, seed):
    return path.format(seed=seed) if path else path


# ---------------------------------------------------------------- modes

def simulate_one(cfg, seed, name, keep_records=None):
    """One (seed, strategy) bandit run. Returns the trajectory, the model and the spec."""
    spec = build_environment(cfg, seed)
    family, strategy = make_strategy(name, strategy_cfg(cfg))
    model = make_model(family, spec.fields, cfg, seed)
    keep = cfg["keep_records"] if keep_records is None else keep_records
    tr = env.run_loop(spec, strategy, model, env.Schedule(**cfg["schedule"]), seed=seed, keep_records=keep)
    return tr, model, spec


def run_simulate(cfg, seed):
    results = {}
    for name in cfg["strategies"]:
        d = _seed_dir(cfg, seed, name)
        tr, model, spec = simulate_one(cfg, seed, name)
        if tr.records:
            dt.write_jsonl(os.path.join(d, "trajectory.jsonl"),
                           dt.header(dt.TRAJECTORY_FORMAT, spec.fields, dt.TRAJECTORY_COLUMNS, seed,
                                     spec.describe(), strategy=name),
                           tr.records)
        every = cfg["schedule"]["update_every"]
        rows = []
        for k, c in enumerate(tr.period_ctr):
            end = min((k + 1) * every, spec.horizon)
            rows.append((end, float(tr.welfare[end - 1]), float(tr.regret[end - 1]), float(c)))
        write_tsv(os.path.join(d, "metrics.tsv"), ["round", "welfare", "regret", "period_ctr"], rows)
        write_tsv(os.path.join(d, "impressions.tsv"), ["ad", "impressions"], enumerate(tr.impressions.tolist()))
        res = {"welfare": tr.total_welfare, "regret": float(tr.regret[-1]), "updates": float(tr.updates)}
        write_tsv(os.path.join(d, "result.tsv"), ["metric", "value"], res.items())
        if model is not None:
            save_model(model, os.path.join(d, "model.npz"))
        results[name] = res
    return results


def run_generate_log(cfg, seed):
    spec = build_environment(cfg, seed)
    d = _seed_dir(cfg, seed)
    n = int(cfg["generate_log"]["entries"])
    entries = env.synth_r6b_generator(spec, n, seed)
    dt.write_log(os.path.join(d, "log.jsonl"), entries, spec.fields, seed, spec.describe())
    np.save(os.path.join(d, "true_ctr.npy"), spec.ctr)
    return {"log": {"entries": float(n), "contexts": float(len(spec.contexts)), "ads": float(len(spec.ads))}}


def run_replay(cfg, seed):
    rc = cfg["replay"]
    path = _template(rc["log"], seed)
    results = {}
    for name in cfg["strategies"]:
        head, entries = dt.read_log(path)
        fields = dt.header_fields(head)
        family, strategy = make_strategy(name, strategy_cfg(cfg))
        model = make_model(family, fields, cfg, seed)
        rep = replay(entries, strategy, model, fields, update_every=int(rc["update_every"]),
                     pretrain_first=int(rc["pretrain_first"]), seed=seed, epochs=int(rc["epochs"]),
                     pretrain_epochs=int(rc["pretrain_epochs"]))
        d = _seed_dir(cfg, seed, name)
        write_json(os.path.join(d, "report.json"), rep.as_dict())
        write_tsv(os.path.join(d, "ctr_series.tsv"), ["period", "ctr"], enumerate(rep.ctr_series))
        res = {"welfare": rep.welfare, "matched": float(rep.matched), "ctr": rep.ctr}
        write_tsv(os.path.join(d, "result.tsv"), ["metric", "value"], res.items())
        if model is not None:
            save_model(model, os.path.join(d, "model.npz"))
        results[name] = res
    return results


def _train_data(cfg, seed):
    tc = cfg["train"]
    if tc["data"]:
        fields, feats, y = dt.read_dataset(_template(tc["data"], seed))
        return fields, feats, y, None, None
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    fields, feats, y = dt.sanity_task(int(tc["n"]) + int(tc["eval_n"]), rng)
    n = int(tc["n"])
    return fields, feats[:n], y[:n], feats[n:], y[n:]


def run_train(cfg, seed):
    fields, feats, y, ev_x, ev_y = _train_data(cfg, seed)
    d = _seed_dir(cfg, seed)
    family = cfg["train"]["family"]
    model = make_model(family, fields, cfg, seed)
    batch = SparseBatch.from_features(feats, model.fields)
    train_rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    losses = model.fit(batch, np.asarray(y, dtype=np.float64), train_rng)
    save_model(model, os.path.join(d, "model.npz"))
    write_tsv(os.path.join(d, "losses.tsv"), ["step", "loss"], enumerate(losses))
    dt.write_dataset(os.path.join(d, "train.jsonl"), feats, y, fields, seed)
    if ev_x:
        dt.write_dataset(os.path.join(d, "eval.jsonl"), ev_x, ev_y, fields, seed)
    p = model.predict_ctr(batch)
    res = {"train_auc": metrics.auc(y, p) if 0 < np.sum(y) < len(y) else float("nan"),
           "train_log_loss": metrics.log_loss(y, p), "final_loss": float(losses[-1]) if losses else float("nan")}
    write_tsv(os.path.join(d, "result.tsv"), ["metric", "value"], res.items())
    return {family: res}


def run_diagnose(cfg, seed):
    dc = cfg["diagnose"]
    model = load_model(_template(dc["checkpoint"], seed), None)
    if dc["data"]:
        _, feats, y = dt.read_dataset(_template(dc["data"], seed))
    else:
        _, _, _, feats, y = _train_data(cfg, seed)
    if not feats:
        raise ConfigError("diagnose needs a nonempty evaluation set")
    batch = SparseBatch.from_features(feats, model.fields)
    p = model.predict_ctr(batch)
    _, var = model.posterior(batch)
    rep = metrics.calibration_report(y, p, var, int(dc["bins"]), float(dc["cut"]))
    d = _seed_dir(cfg, seed)
    write_json(os.path.join(d, "diagnose.json"), rep)
    keys = ("auc", "log_loss", "mean_predictive_variance", "overconfident_fraction")
    res = {k: rep[k] for k in keys}
    write_tsv(os.path.join(d, "result.tsv"), ["metric", "value"], res.items())
    return {"diagnose": res}


RUNNERS = {"train": run_train, "simulate": run_simulate, "replay": run_replay,
           "generate-log": run_generate_log, "diagnose": run_diagnose}


def _run_seed(args):
    cfg, seed = args
    return seed, RUNNERS[cfg["mode"]](cfg, seed)


def write_summary(cfg, per_seed):
    """``per_seed``: seed -> {group -> {metric -> value}}."""
    rows = []
    seeds = sorted(per_seed)
    groups = list(per_seed[seeds[0]])
    for g in groups:
        for m in per_seed[seeds[0]][g]:
            vals = [per_seed[s][g][m] for s in seeds]
            rows.append((g, m, len(vals), *summarize(vals)))
    write_tsv(os.path.join(cfg["out"], "summary.tsv"), ["group", "metric", "n", "mean", "std", "median"], rows)
    return rows


def run(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.yaml"), "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    jobs = [(cfg, s) for s in cfg["seeds"]]
    workers = min(int(cfg["workers"]), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            per_seed = dict(ex.map(_run_seed, jobs))
    else:
        per_seed = dict(map(_run_seed, jobs))
    return write_summary(cfg, per_seed)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="dualctr", description=__doc__.split("\n\n")[0])
    ap.add_argument("mode", nargs="?", choices=MODES, help="defaults to the config's mode")
    ap.add_argument("--config", help="YAML file merged over the defaults")
    ap.add_argument("--seed", help="seed list, e.g. 0,1,2 or 0-31")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int, help="parallel seed workers")
    ap.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    args = ap.parse_args(argv)
    over = {}
    if args.mode:
        over["mode"] = args.mode
    if args.out:
        over["out"] = args.out
    if args.workers:
        over["workers"] = args.workers
    try:
        if args.seed:
            over["seeds"] = parse_seeds(args.seed)
        cfg = load_config(args.config, over)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    if args.print_config:
        yaml.safe_dump(cfg, sys.stdout, sort_keys=True)
        return EXIT_OK
    try:
        rows = run(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, dt.MalformedLogEntry) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    for g, m, n, mean, std, med in rows:
        print(f"{g}\t{m}\tn={n}\tmean={mean:.6g}\tstd={std:.6g}\tmedian={med:.6g}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
