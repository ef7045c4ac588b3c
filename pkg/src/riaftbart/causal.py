"""Counterfactual effects from posterior draws, imputation pooling and
fit-the-fit subgroup discovery."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special
from sklearn.ensemble import RandomForestRegressor
from sklearn.tree import DecisionTreeRegressor

from .sampler import concat_draws, predict_posterior


def _summary(draws, level=0.95):
    lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
    mean = draws.mean(axis=0)
    lo = np.quantile(draws, lo_q, axis=0)
    hi = np.quantile(draws, hi_q, axis=0)
    # keep lo <= mean <= hi under floating-point rounding
    return mean, np.minimum(lo, mean), np.maximum(hi, mean)


@dataclass
class IsteEstimate:
    """Per-draw ISTE of arm ``pair[0]`` versus ``pair[1]``, shape (D, n)."""

    pair: tuple
    draws: np.ndarray
    scale: str = "log"
    mean: np.ndarray = field(init=False)
    lo: np.ndarray = field(init=False)
    hi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, float)
        self.mean, self.lo, self.hi = _summary(self.draws)

    @property
    def n(self):
        return self.draws.shape[1]

    def negate(self):
        return IsteEstimate(self.pair[::-1], -self.draws, self.scale)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "mean", "lo", "hi"])
            for i in range(self.n):
                w.writerow([i + 1, repr(float(self.mean[i])), repr(float(self.lo[i])),
                            repr(float(self.hi[i]))])
        return path


def _check_arms(draws, ds, pair):
    J = ds.J if ds is not None else (draws.cf.shape[1] if draws.cf is not None else 0)
    for a in pair:
        if not 1 <= int(a) <= J:
            raise ValueError(f"treatment {a} outside 1..{J}")


def estimate_iste(draws, ds, pair):
    """f(a_j, x) - f(a_j', x) per draw and row (mu_aft cancels)."""
    j, jp = (int(a) for a in pair)
    _check_arms(draws, ds, pair)
    fj = predict_posterior(draws, a=j, ds=ds if draws.forests is not None else None)
    if j == jp:
        return IsteEstimate((j, jp), np.zeros_like(fj))
    fjp = predict_posterior(draws, a=jp, ds=ds if draws.forests is not None else None)
    return IsteEstimate((j, jp), fj - fjp)


@dataclass
class AteEstimate:
    pair: tuple
    draws: np.ndarray
    mean: float
    lo: float
    hi: float

    def to_dict(self):
        return {"pair": list(self.pair), "mean": self.mean, "lo": self.lo, "hi": self.hi,
                "n_draws": int(self.draws.size)}


def estimate_ate(draws_or_iste, ds=None, pair=None):
    """Per-draw average ISTE over the sample, summarized by mean and 95% interval."""
    iste = draws_or_iste if isinstance(draws_or_iste, IsteEstimate) else \
        estimate_iste(draws_or_iste, ds, pair)
    per_draw = iste.draws.mean(axis=1)
    mean, lo, hi = _summary(per_draw[:, None])
    return AteEstimate(iste.pair, per_draw, float(mean[0]), float(lo[0]), float(hi[0]))


# ------------------------------------------------------- survival functionals
def _intercepts(draws, ds, rows, b_mode, rng):
    D = draws.n_draws
    if b_mode == "cluster":
        return draws.b[:, ds.cluster[rows] - 1]
    if b_mode == "marginal":
        rng = rng if rng is not None else np.random.default_rng(0)
        sd = np.sqrt(draws.tau2 * draws.alpha)
        return (sd * rng.standard_normal(D))[:, None] * np.ones((1, rows.size))
    if b_mode == "zero":
        return np.zeros((D, rows.size))
    raise ValueError(f"unknown intercept mode {b_mode!r}")


def _location_scale(draws, ds, a, rows, b_mode, rng):
    rows = np.arange(ds.n) if rows is None else np.atleast_1d(rows)
    f = predict_posterior(draws, a=a, ds=ds if draws.forests is not None else None)
    if a is None and draws.forests is not None:
        f = predict_posterior(draws, ds=ds)
    m = f[:, rows] + _intercepts(draws, ds, rows, b_mode, rng)
    s = np.sqrt(draws.sigma2)[:, None]
    return m, s


def lognormal_survival(t, m, s):
    return special.ndtr(-(np.log(t) - m) / s)


def lognormal_rmst(t_star, m, s):
    """int_0^t* S(u) du for log T ~ N(m, s^2), closed form:
    t* S(t*) + exp(m + s^2/2) Phi((log t* - m - s^2) / s)."""
    lt = np.log(t_star)
    return (t_star * special.ndtr(-(lt - m) / s)
            + np.exp(m + 0.5 * s * s) * special.ndtr((lt - m - s * s) / s))


def lognormal_rmst_quad(t_star, m, s, tol=1e-6):
    val, err = integrate.quad(lambda u: lognormal_survival(u, m, s) if u > 0 else 1.0,
                              0.0, t_star, epsabs=tol, limit=200)
    if not np.isfinite(val) or err > 10 * tol:
        raise ArithmeticError("quadrature did not converge")
    return val


def predict_survival_prob(draws, ds, a, t, rows=None, b_mode="cluster", rng=None):
    """Per-draw S(t) = 1 - Phi((log t - f - b) / sigma), shape (D, rows)."""
    if t <= 0:
        raise ValueError("t must be positive")
    m, s = _location_scale(draws, ds, a, rows, b_mode, rng)
    return lognormal_survival(t, m, s)


def predict_rmst(draws, ds, a, t_star, rows=None, b_mode="cluster", rng=None, method="closed"):
    """Per-draw restricted mean survival time up to ``t_star``.

    ``method="quad"`` integrates numerically per draw and row; the default
    uses the log-normal closed form.
    """
    if t_star <= 0:
        raise ValueError("t_star must be positive")
    m, s = _location_scale(draws, ds, a, rows, b_mode, rng)
    if method == "closed":
        return lognormal_rmst(t_star, m, s)
    s_full = np.broadcast_to(s, m.shape)
    return np.vectorize(lambda mm, ss: lognormal_rmst_quad(t_star, mm, ss))(m, s_full)


def functional_iste(draws, ds, pair, t, scale="surv", b_mode="cluster", seed=0):
    """ISTE on the survival-probability or RMST scale at horizon ``t``."""
    fn = predict_survival_prob if scale == "surv" else predict_rmst
    j, jp = (int(a) for a in pair)
    # identical intercept draws for both arms when integrating b out
    s1 = fn(draws, ds, j, t, b_mode=b_mode, rng=np.random.default_rng(seed))
    s2 = fn(draws, ds, jp, t, b_mode=b_mode, rng=np.random.default_rng(seed))
    return IsteEstimate((j, jp), s1 - s2, scale=scale)


def summarize(draws):
    mean, lo, hi = _summary(np.asarray(draws))
    return {"mean": mean, "lo": lo, "hi": hi}


# ------------------------------------------------------------------- pooling
def pool_imputations(runs):
    """Concatenate per-draw ISTEs (or posterior draws) across imputed datasets."""
    if not runs:
        raise ValueError("nothing to pool")
    if isinstance(runs[0], IsteEstimate):
        n = runs[0].n
        if any(r.n != n or tuple(r.pair) != tuple(runs[0].pair) for r in runs):
            raise ValueError("runs are not row-aligned")
        if len(runs) == 1:
            return runs[0]
        return IsteEstimate(runs[0].pair, np.concatenate([r.draws for r in runs]), runs[0].scale)
    n = runs[0].f.shape[1] if runs[0].f is not None else None
    if any((r.f.shape[1] if r.f is not None else None) != n for r in runs):
        raise ValueError("runs are not row-aligned")
    return runs[0] if len(runs) == 1 else concat_draws(runs)


# -------------------------------------------------------------- fit-the-fit
@dataclass
class RandomForestModel:
    features: list
    model: RandomForestRegressor | None
    r2: float

    def predict(self, X):
        if self.model is None:
            return np.zeros(X.shape[0])
        return self.model.predict(X[:, self.features])


@dataclass
class FitTheFitResult:
    selected: list
    names: list
    r2_path: list
    forest: RandomForestModel


def _forest_r2(X, z, features, n_trees, max_depth, seed):
    rf = RandomForestRegressor(n_estimators=n_trees, max_depth=max_depth,
                               max_features=max(1, math.ceil(len(features) / 3)),
                               bootstrap=True, random_state=seed, n_jobs=1)
    rf.fit(X[:, features], z)
    return rf, float(rf.score(X[:, features], z))


def fit_the_fit(zeta_hat, X, names=None, n_trees=200, threshold=0.01, max_depth=6, seed=0):
    """Forward selection of effect modifiers with random forests.

    Starts from the single covariate with the largest in-sample R^2, then adds
    the covariate giving the largest R^2; stops once the gain in R^2 is below
    ``threshold`` (in R^2 units, 0.01 = one percentage point).
    """
    z = np.asarray(zeta_hat, float)
    X = np.asarray(X, float)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    if np.ptp(z) == 0:
        return FitTheFitResult([], [], [], RandomForestModel([], None, 0.0))
    selected, path = [], []
    best_rf, best_r2 = None, -np.inf
    remaining = list(range(X.shape[1]))
    while remaining:
        trial = [(_forest_r2(X, z, selected + [j], n_trees, max_depth, seed), j) for j in remaining]
        (rf, r2), j = max(trial, key=lambda t: (t[0][1], -t[1]))
        if selected and r2 - best_r2 < threshold:
            break
        selected.append(j)
        remaining.remove(j)
        path.append(r2)
        best_rf, best_r2 = rf, r2
        if threshold >= 1.0:
            break
    return FitTheFitResult(selected, [names[j] for j in selected], path,
                           RandomForestModel(list(selected), best_rf, best_r2))


@dataclass
class SubgroupRule:
    conditions: list
    members: np.ndarray
    effect: float
    lo: float
    hi: float

    @property
    def n(self):
        return int(self.members.size)

    def to_dict(self):
        return {"conditions": self.conditions, "n": self.n, "effect": self.effect,
                "lo": self.lo, "hi": self.hi}

    def describe(self):
        return " & ".join(f"{c['variable']} {c['op']} {c['threshold']:.4g}"
                          for c in self.conditions) or "all"


def extract_rules(rf, X, iste, names=None, depth=3, min_leaf=20, min_gain=0.01, seed=0):
    """Summarize the forest by one shallow regression tree fit to its predictions.

    Each leaf is a subgroup; its effect is the mean posterior-mean ISTE of the
    members and its interval comes from per-draw member averages. Splits that
    explain less than ``min_gain`` of the prediction variance are not made.
    """
    X = np.asarray(X, float)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    zeta_draws = iste.draws if isinstance(iste, IsteEstimate) else np.asarray(iste, float)[None, :]
    zeta_hat = zeta_draws.mean(axis=0)
    pred = rf.predict(X)
    tree = DecisionTreeRegressor(max_depth=depth, min_samples_leaf=min(min_leaf, X.shape[0]),
                                 min_impurity_decrease=min_gain * float(np.var(pred)),
                                 random_state=seed)
    tree.fit(X, pred)
    t = tree.tree_
    leaf = tree.apply(X)
    rules = []

    def walk(node, conds):
        if t.children_left[node] == -1:
            members = np.flatnonzero(leaf == node)
            if members.size == 0:
                return
            per_draw = zeta_draws[:, members].mean(axis=1)
            _, lo, hi = _summary(per_draw[:, None])
            rules.append(SubgroupRule(conds, members, float(zeta_hat[members].mean()),
                                      float(lo[0]), float(hi[0])))
            return
        var, thr = names[t.feature[node]], float(t.threshold[node])
        walk(t.children_left[node], conds + [{"variable": var, "op": "<=", "threshold": thr}])
        walk(t.children_right[node], conds + [{"variable": var, "op": ">", "threshold": thr}])

    walk(0, [])
    return rules


def rule_report(rules, path=None):
    text = json.dumps({"rules": [r.to_dict() for r in rules]}, indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
