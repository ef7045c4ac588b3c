"""Replicated simulation experiments: generate, (ampute, impute), fit,
estimate or select, and score.

A scenario is a JSON-able dict with a ``kind`` of ``heterogeneity``,
``varselect`` or ``null`` plus the DGP and method settings.
"""
from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np

from .causal import estimate_ate, estimate_iste, functional_iste
from .data import make_dataset
from .metrics import metric_bias_rmse_by_gps, metric_pehe, metric_selection
from .parallel import derive_seed, map_tasks
from .sampler import ChainConfig, run_chain
from .selection import (SelectConfig, bootstrap_selections, boot_counts, permutation_select,
                        select_by_count)
from .simulate import (PAIRS_ALL, AmputationPlan, DgpConfig, ampute, simulate,
                       true_iste_oracle)

log = logging.getLogger(__name__)

PAIRS = PAIRS_ALL
THREE_WEEKS = 21.0 / 365.0
PI_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


def _chain(sc, **extra):
    return ChainConfig(**{**sc.get("chain", {}), **extra})


def _select_cfg(sc):
    s = dict(sc.get("select", {}))
    s["chain"] = _chain(sc, keep_f=False, counterfactual=False)
    return SelectConfig(**s)


# ------------------------------------------------------------ heterogeneity
def heterogeneity_replicate(sc, seed):
    dgp = DgpConfig.from_dict({**sc.get("dgp", {}), "mode": "heterogeneity"})
    ds, truth = simulate(dgp, seed=derive_seed(seed, 0))
    draws = run_chain(ds, _chain(sc, seed=derive_seed(seed, 1), counterfactual=True))
    t = float(sc.get("horizon", THREE_WEEKS))
    b_row = truth.b_row(ds.cluster)
    out = {"n": ds.n, "censoring": float(1 - ds.delta.mean())}
    for pair in PAIRS:
        key = f"{pair[0]}v{pair[1]}"
        iste = estimate_iste(draws, ds, pair)
        ate = estimate_ate(iste)
        tr_log = true_iste_oracle(ds.X, b_row, dgp, pair)
        out[f"pehe_log_{key}"] = metric_pehe(iste.mean, tr_log)
        out[f"pehe_log_naive_{key}"] = metric_pehe(np.full(ds.n, ate.mean), tr_log)
        out[f"ate_{key}"] = ate.mean
        out[f"ate_true_{key}"] = float(tr_log.mean())
        for scale in ("surv", "rmst"):
            est = functional_iste(draws, ds, pair, t, scale=scale)
            tr = true_iste_oracle(ds.X, b_row, dgp, pair, scale=scale, t=t)
            out[f"pehe_{scale}_{key}"] = metric_pehe(est.mean, tr)
            out.setdefault("_gps", truth.gps.tolist())
            out[f"_est_{scale}_{key}"] = est.mean.tolist()
            out[f"_true_{scale}_{key}"] = tr.tolist()
    return out


# -------------------------------------------------------- variable selection
def _useful_noise(names):
    useful = [nm for nm in names if int(nm[1:]) <= 8]
    return useful, [nm for nm in names if nm not in useful]


def varselect_replicate(sc, seed):
    dgp = DgpConfig.from_dict({**sc.get("dgp", {}), "mode": "varselect"})
    ds, _ = simulate(dgp, seed=derive_seed(seed, 0))
    method = sc.get("method", "full")
    if sc.get("missing", False) or method in ("bootstrap", "complete_case"):
        plan = AmputationPlan.from_dict(sc["amputation"]) if "amputation" in sc else AmputationPlan()
        ds = ampute(ds, plan, np.random.default_rng(derive_seed(seed, 1)))
    cfg = _select_cfg(sc)
    useful, noise = _useful_noise(ds.column_names)
    out = {"n": ds.n, "censoring": float(1 - ds.delta.mean()),
           "row_missingness": float(ds.mask.any(axis=1).mean())}
    if method == "bootstrap":
        B = int(sc.get("B", 100))
        results = bootstrap_selections(ds, B, cfg, derive_seed(seed, 2),
                                       imp_cycles=int(sc.get("imp_cycles", 10)))
        counts = boot_counts(results, ds.L)
        out["boot_count"] = counts.tolist()
        for pi in sc.get("pi_grid", PI_GRID):
            sel = select_by_count(counts, B, pi, ds.column_names)
            _score(out, f"pi{pi}_", sel.selected_names, useful, noise, ds.column_names)
        return out
    if method == "complete_case":
        keep = np.flatnonzero(~ds.mask.any(axis=1))
        ds = ds.take(keep, relabel=True)
        out["n_analysed"] = ds.n
    elif ds.mask.any():
        raise ValueError("method 'full' needs fully observed covariates")
    res = permutation_select(ds, cfg, derive_seed(seed, 2))
    out["vip"] = res.vip.tolist()
    _score(out, "", res.selected_names, useful, noise, ds.column_names)
    return out


def _score(out, prefix, selected, useful, noise, names):
    m = metric_selection(selected, useful, noise)
    for k in ("precision", "recall", "f1", "type1"):
        out[prefix + k] = m[k]
    out[prefix + "selected"] = [int(nm in selected) for nm in names]


def null_replicate(sc, seed):
    """Outcomes independent of L standard-normal covariates."""
    rng = np.random.default_rng(derive_seed(seed, 0))
    K, n_k, L = int(sc.get("K", 5)), int(sc.get("n_k", 100)), int(sc.get("L", 10))
    n = K * n_k
    X = rng.standard_normal((n, L))
    logt = rng.normal(0, 1, n)
    logc = rng.normal(0.5, 1, n)
    ds = make_dataset(np.exp(np.minimum(logt, logc)), (logt <= logc).astype(int),
                      np.repeat(np.arange(1, K + 1), n_k), X)
    res = permutation_select(ds, _select_cfg(sc), derive_seed(seed, 1))
    return {"n": n, "selected": [int(j in res.selected) for j in range(L)],
            "n_selected": len(res.selected)}


KINDS = {"heterogeneity": heterogeneity_replicate, "varselect": varselect_replicate,
         "null": null_replicate}


def _replicate_task(args):
    sc, seed, r = args
    t0 = time.perf_counter()
    try:
        res = KINDS[sc["kind"]](sc, derive_seed(seed, r))
        res["ok"] = True
    except Exception as exc:  # a failed replicate is reported, not fatal
        log.warning("replicate %d failed: %s", r, exc)
        res = {"ok": False, "error": str(exc)}
    res["replicate"] = r
    res["seconds"] = time.perf_counter() - t0
    return res


def run_experiment(scenario, R, seed, jobs=1):
    """Run R seeded replicates; returns per-replicate records and aggregates."""
    if scenario.get("kind") not in KINDS:
        raise ValueError(f"unknown scenario kind {scenario.get('kind')!r}")
    reps = map_tasks(_replicate_task, [(scenario, seed, r) for r in range(R)], jobs)
    reps.sort(key=lambda d: d["replicate"])
    ok = [r for r in reps if r["ok"]]
    return {"scenario": scenario, "R": R, "seed": seed, "completed": len(ok),
            "replicates": reps, "summary": aggregate(ok, scenario)}


def aggregate(reps, scenario=None):
    """Mean and sd of every scalar metric; per-covariate rates; GPS table."""
    summary = {}
    if not reps:
        return summary
    keys = [k for k, v in reps[0].items()
            if not k.startswith("_") and isinstance(v, (int, float)) and not isinstance(v, bool)
            and k not in ("replicate", "seconds")]
    for k in keys:
        vals = [r[k] for r in reps if r.get(k) is not None]
        if vals:
            summary[k] = {"mean": float(np.mean(vals)),
                          "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                          "count": len(vals)}
    for k, v in reps[0].items():
        if k.endswith("selected") and isinstance(v, list):
            summary[k + "_rate"] = np.mean([r[k] for r in reps], axis=0).tolist()
    if "_gps" in reps[0]:
        gps = np.array([r["_gps"] for r in reps])
        for k in reps[0]:
            if k.startswith("_est_"):
                tail = k[len("_est_"):]
                est = np.array([r[k] for r in reps])
                tru = np.array([r["_true_" + tail] for r in reps])
                summary["gps_" + tail] = metric_bias_rmse_by_gps(est, tru, gps)
    if scenario and scenario.get("method") == "bootstrap":
        best = max(scenario.get("pi_grid", PI_GRID),
                   key=lambda pi: summary.get(f"pi{pi}_f1", {}).get("mean", -1))
        summary["best_pi"] = best
    return summary


def _fmt(v):
    return f"{v:.3f}"


def write_tables(result, out_dir):
    """CSV tables: per-replicate scalars and the mean (sd) summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reps = [r for r in result["replicates"] if r.get("ok")]
    summ = result["summary"]
    scalar = [k for k, v in summ.items() if isinstance(v, dict) and "mean" in v]
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "sd", "display", "count"])
        for k in scalar:
            s = summ[k]
            w.writerow([k, repr(s["mean"]), repr(s["sd"]), f"{_fmt(s['mean'])} ({_fmt(s['sd'])})",
                        s["count"]])
    with (out_dir / "replicates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate"] + scalar)
        for r in reps:
            w.writerow([r["replicate"]] + [repr(r.get(k)) for k in scalar])
    files = [out_dir / "summary.csv", out_dir / "replicates.csv"]
    gps_keys = [k for k in summ if k.startswith("gps_")]
    if gps_keys:
        with (out_dir / "gps_subclasses.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["effect", "subclass", "n", "bias", "bias_is_absolute", "rmse"])
            for k in gps_keys:
                for row in summ[k]:
                    if row["present"]:
                        w.writerow([k[4:], row["subclass"], repr(row["n"]), repr(row["bias"]),
                                    int(row["bias_is_absolute"]), repr(row["rmse"])])
                    else:
                        w.writerow([k[4:], row["subclass"], 0, "", "", ""])
        files.append(out_dir / "gps_subclasses.csv")
    return files
