"""Command-line interface.

Every command reads an optional JSON ``--config`` whose keys mirror the long
flag names (dashes or underscores); explicit flags win. Each run writes its
outputs plus ``manifest.json`` (resolved config, seed, input/output hashes)
into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import benchmark as bench
from .causal import (estimate_ate, estimate_iste, extract_rules, fit_the_fit, functional_iste,
                     predict_rmst, predict_survival_prob, rule_report, summarize)
from .data import DataError, load_dataset, save_dataset, validate
from .impute import chained_impute
from .sampler import ChainConfig, PosteriorDraws, run_chains
from .selection import SelectConfig, aggregate_bootstrap_select, permutation_select
from .simulate import PAIRS_ALL, AmputationPlan, DgpConfig, ampute, simulate, true_iste_oracle

log = logging.getLogger("riaftbart")

DEFAULTS = {
    "seed": 0, "jobs": 1, "out_dir": ".",
    # simulate
    "mode": "heterogeneity", "setting": "a", "hazard": "PH", "K": 10, "n_k": 200,
    "censoring": 0.5,
    # chains
    "draws": 4500, "burn_in": 1000, "m": 200, "chains": 1, "keep_forests": False,
    "progress_every": 0,
    # effects
    "pair": [1, 2], "scale": "log", "t": 21.0 / 365.0, "b_mode": "cluster",
    "arm": None, "rf_trees": 200, "threshold": 0.01, "depth": 3, "min_leaf": 20,
    # selection
    "P": 100, "alpha": 0.05, "B": 100, "pi": 0.5, "null_draws": 1500, "null_burn_in": 500,
    "cycles": 10,
    # benchmark
    "replicates": 1,
}


def _pkg_version():
    try:
        return version("riaftbart")
    except PackageNotFoundError:
        return "unknown"


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Resolved settings plus manifest bookkeeping for one command."""

    def __init__(self, args):
        self.command = args.command
        cfg = {}
        if args.config:
            cfg = {k.replace("-", "_"): v for k, v in json.loads(Path(args.config).read_text()).items()}
        self.opts = dict(DEFAULTS)
        self.opts.update(cfg)
        for k, v in vars(args).items():
            if k in ("command", "config", "func") or v is None:
                continue
            self.opts[k] = v
        self.out = Path(self.opts["out_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.t0 = time.time()

    def __getitem__(self, key):
        return self.opts[key]

    def get(self, key, default=None):
        return self.opts.get(key, default)

    def input(self, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"input file not found: {path}")
        self.inputs[str(path)] = sha256(path)
        return path

    def output(self, name):
        path = self.out / name
        self.outputs.append(path)
        return path

    def write_json(self, name, obj):
        path = self.output(name)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return path

    def chain_config(self, **extra):
        return ChainConfig(draws=int(self["draws"]), burn_in=int(self["burn_in"]), m=int(self["m"]),
                           hyper=dict(self.get("hyper", {})), seed=int(self["seed"]),
                           keep_forests=bool(self["keep_forests"]),
                           progress_every=int(self["progress_every"]), **extra)

    def select_config(self):
        return SelectConfig(P=int(self["P"]), alpha=float(self["alpha"]),
                            chain=self.chain_config(keep_f=False, counterfactual=False),
                            null_draws=int(self["null_draws"]), null_burn_in=int(self["null_burn_in"]))

    def finish(self):
        missing = [str(p) for p in self.outputs if not p.exists()]
        if missing:
            raise RuntimeError(f"declared outputs not written: {missing}")
        manifest = {
            "command": self.command,
            "config": {k: v for k, v in sorted(self.opts.items()) if k != "out_dir"},
            "seed": self["seed"],
            "version": _pkg_version(),
            "inputs": self.inputs,
            "outputs": {p.name: sha256(p) for p in self.outputs},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self.t0)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "runtime_seconds": round(time.time() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                           default=str) + "\n")


def _csv(path, header, rows):
    import csv

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ------------------------------------------------------------------ commands
def cmd_simulate(run):
    dgp = DgpConfig.from_dict({k: run[k] for k in ("mode", "setting", "hazard", "K", "n_k", "censoring")}
                              | dict(run.get("dgp", {})) | {"seed": int(run["seed"])})
    ds, truth = simulate(dgp)
    save_dataset(ds, run.output("data.csv"), codebook_path=None)
    if ds.codebooks:
        run.outputs.append(run.out / "data.codebook.json")
    tj = {"dgp": asdict(dgp), **truth.to_json(ds.cluster)}
    if dgp.mode == "heterogeneity":
        b_row = truth.b_row(ds.cluster)
        tj["iste_log"] = {f"{a}v{b}": true_iste_oracle(ds.X, b_row, dgp, (a, b)).tolist()
                          for a, b in PAIRS_ALL}
    run.write_json("truth.json", tj)
    print(json.dumps(validate(ds), sort_keys=True))


def _load(run, key="data"):
    ds = load_dataset(run.input(run[key]))
    return ds


def cmd_fit(run):
    ds = _load(run)
    if ds.mask.any():
        raise DataError("dataset has missing covariates; run `impute` first")
    cfg = run.chain_config()
    draws = run_chains(ds, cfg, int(run["chains"]), int(run["jobs"]))
    draws.save(run.output("draws.jsonl"))
    mean, lo, hi = (summarize(draws.f)[k] for k in ("mean", "lo", "hi"))
    _csv(run.output("fitted.csv"), ["row", "f_mean", "f_lo", "f_hi"],
         ([i + 1, mean[i], lo[i], hi[i]] for i in range(ds.n)))
    run.write_json("fit_summary.json", {
        "centering": asdict(draws.centering), "kept_draws": int(draws.n_draws),
        "sigma2_mean": float(draws.sigma2.mean()), "tau2_mean": float(draws.tau2.mean()),
        "b_mean": draws.b.mean(axis=0).tolist(), "acceptance": draws.acceptance,
        "vip": dict(zip(draws.predictor_names, draws.vip.mean(axis=0).tolist()))})


def _draws(run):
    return PosteriorDraws.load(run.input(run["draws_file"]))


def cmd_predict(run):
    ds = _load(run)
    draws = _draws(run)
    a = run.get("arm")
    if draws.forests is not None:
        f = np.stack([fr.predict(ds.design(a=a) if ds.a is not None else ds.design())
                      + draws.centering.mu_aft for fr in draws.forests])
    else:
        from .sampler import predict_posterior
        f = predict_posterior(draws, a=a)
    s = summarize(f)
    header = ["row", "f_mean", "f_lo", "f_hi"]
    cols = [s["mean"], s["lo"], s["hi"]]
    if run.get("with_survival"):
        t = float(run["t"])
        sp = summarize(predict_survival_prob(draws, ds, a, t, b_mode=run["b_mode"],
                                             rng=np.random.default_rng(int(run["seed"]))))
        rm = summarize(predict_rmst(draws, ds, a, t, b_mode=run["b_mode"],
                                    rng=np.random.default_rng(int(run["seed"]))))
        header += ["surv_mean", "surv_lo", "surv_hi", "rmst_mean", "rmst_lo", "rmst_hi"]
        cols += [sp["mean"], sp["lo"], sp["hi"], rm["mean"], rm["lo"], rm["hi"]]
    _csv(run.output("predictions.csv"), header,
         ([i + 1] + [c[i] for c in cols] for i in range(f.shape[1])))


def _iste(run, ds, draws):
    pair = tuple(int(p) for p in run["pair"])
    if run["scale"] == "log":
        return estimate_iste(draws, ds, pair)
    return functional_iste(draws, ds, pair, float(run["t"]), scale=run["scale"],
                           b_mode=run["b_mode"], seed=int(run["seed"]))


def cmd_iste(run):
    ds = _load(run)
    draws = _draws(run)
    iste = _iste(run, ds, draws)
    iste.to_csv(run.output("iste.csv"))
    run.write_json("ate.json", {**estimate_ate(iste).to_dict(), "scale": iste.scale})


def cmd_subgroups(run):
    ds = _load(run)
    draws = _draws(run)
    iste = _iste(run, ds, draws)
    res = fit_the_fit(iste.mean, ds.X, ds.column_names, n_trees=int(run["rf_trees"]),
                      threshold=float(run["threshold"]), seed=int(run["seed"]))
    rules = []
    if res.selected:
        rules = extract_rules(res.forest, ds.X, iste, ds.column_names, depth=int(run["depth"]),
                              min_leaf=int(run["min_leaf"]), seed=int(run["seed"]))
    report = json.loads(rule_report(rules))
    report["selected"] = res.names
    report["r2_path"] = res.r2_path
    report["pair"] = list(iste.pair)
    run.write_json("subgroups.json", report)


def cmd_select(run):
    ds = _load(run)
    cfg = run.select_config()
    seed, jobs = int(run["seed"]), int(run["jobs"])
    if ds.mask.any():
        res = aggregate_bootstrap_select(ds, int(run["B"]), float(run["pi"]), cfg, seed,
                                         imp_cycles=int(run["cycles"]), jobs=jobs)
    else:
        res = permutation_select(ds, cfg, seed, jobs=jobs)
    res.to_csv(run.output("selection.csv"))
    print(",".join(res.selected_names))


def cmd_ampute(run):
    ds = _load(run)
    plan = AmputationPlan.from_dict(run["plan"]) if run.get("plan") else AmputationPlan()
    out = ampute(ds, plan, np.random.default_rng(int(run["seed"])))
    save_dataset(out, run.output("amputed.csv"))
    if out.codebooks:
        run.outputs.append(run.out / "amputed.codebook.json")
    print(json.dumps(validate(out), sort_keys=True))


def cmd_impute(run):
    ds = _load(run)
    out = chained_impute(ds, cycles=int(run["cycles"]), rng=np.random.default_rng(int(run["seed"])))
    save_dataset(out, run.output("imputed.csv"))
    if out.codebooks:
        run.outputs.append(run.out / "imputed.codebook.json")


def cmd_benchmark(run):
    if run.get("scenario") is None:
        raise DataError("benchmark needs --scenario (JSON file)")
    scenario = json.loads(run.input(run["scenario"]).read_text())
    result = bench.run_experiment(scenario, int(run["replicates"]), int(run["seed"]),
                                  int(run["jobs"]))
    slim = {k: v for k, v in result.items() if k != "replicates"}
    slim["replicates"] = [{k: v for k, v in r.items() if not k.startswith("_") and k != "seconds"}
                          for r in result["replicates"]]
    run.write_json("result.json", slim)
    for p in bench.write_tables(result, run.out):
        run.outputs.append(p)
    # wall-clock per replicate is reported here rather than in the deterministic outputs
    run.opts["replicate_seconds"] = [r["seconds"] for r in result["replicates"]]


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "iste": cmd_iste,
    "subgroups": cmd_subgroups, "select": cmd_select, "ampute": cmd_ampute,
    "impute": cmd_impute, "benchmark": cmd_benchmark,
}


def build_parser():
    p = argparse.ArgumentParser(prog="riaftbart", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings (flags override)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, help="worker processes for independent tasks")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("-v", "--verbose", action="store_true", default=None)

    def chain(sp):
        sp.add_argument("--draws", type=int, help="total iterations per chain")
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--m", type=int, help="number of trees")
        sp.add_argument("--progress-every", dest="progress_every", type=int)

    def effects(sp):
        sp.add_argument("--data")
        sp.add_argument("--draws-file", dest="draws_file")
        sp.add_argument("--pair", type=int, nargs=2)
        sp.add_argument("--scale", choices=["log", "surv", "rmst"])
        sp.add_argument("--t", type=float, help="time horizon for surv/rmst scales")
        sp.add_argument("--b-mode", dest="b_mode", choices=["cluster", "marginal", "zero"])

    sp = sub.add_parser("simulate", help="generate a benchmark dataset with oracle truth")
    common(sp)
    sp.add_argument("--mode", choices=["heterogeneity", "varselect"])
    sp.add_argument("--setting", choices=["a", "b", "c"])
    sp.add_argument("--hazard", choices=["PH", "nPH"])
    sp.add_argument("--K", type=int)
    sp.add_argument("--n-k", dest="n_k", type=int)
    sp.add_argument("--censoring", type=float)

    sp = sub.add_parser("fit", help="run riAFT-BART chains and save posterior draws")
    common(sp)
    chain(sp)
    sp.add_argument("--data")
    sp.add_argument("--chains", type=int)
    sp.add_argument("--keep-forests", dest="keep_forests", action="store_true", default=None)

    sp = sub.add_parser("predict", help="posterior predictions of f (and S(t), RMST)")
    common(sp)
    effects(sp)
    sp.add_argument("--arm", type=int)
    sp.add_argument("--with-survival", dest="with_survival", action="store_true", default=None)

    sp = sub.add_parser("iste", help="individual survival treatment effects and the ATE")
    common(sp)
    effects(sp)

    sp = sub.add_parser("subgroups", help="fit-the-fit subgroup rules")
    common(sp)
    effects(sp)
    sp.add_argument("--rf-trees", dest="rf_trees", type=int)
    sp.add_argument("--threshold", type=float, help="minimum R^2 gain to add a covariate")
    sp.add_argument("--depth", type=int)
    sp.add_argument("--min-leaf", dest="min_leaf", type=int)

    sp = sub.add_parser("select", help="permutation variable selection")
    common(sp)
    chain(sp)
    sp.add_argument("--data")
    sp.add_argument("--P", type=int, help="permutations")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--B", type=int, help="bootstrap imputations (incomplete data)")
    sp.add_argument("--pi", type=float)
    sp.add_argument("--null-draws", dest="null_draws", type=int)
    sp.add_argument("--null-burn-in", dest="null_burn_in", type=int)
    sp.add_argument("--cycles", type=int)

    sp = sub.add_parser("ampute", help="MAR amputation by weighted sum scores")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--plan", type=json.loads, help="amputation plan as JSON")

    sp = sub.add_parser("impute", help="chained-equations single imputation")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--cycles", type=int)

    sp = sub.add_parser("benchmark", help="replicated simulation experiment")
    common(sp)
    sp.add_argument("--scenario")
    sp.add_argument("--replicates", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        if run.command == "benchmark" and args.seed is None and "seed" not in (
                json.loads(Path(args.config).read_text()) if args.config else {}):
            raise DataError("benchmark runs require an explicit --seed")
        COMMANDS[run.command](run)
        run.finish()
    except (DataError, ValueError, KeyError, FileNotFoundError) as exc:
        err = {"error": str(exc), "command": args.command}
        for attr in ("row", "column"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
