"""Data-generating processes for the heterogeneity and variable-selection
benchmarks, exponential censoring, MAR amputation and closed-form truth.

Survival times follow a Weibull model written both as AFT and as PH:
``S(t) = exp(-lam * exp(q) * t ** eta)``, sampled by inverse transform.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize, special

from .data import make_dataset

EULER_GAMMA = float(np.euler_gamma)
HET_LAMBDA = (5000.0, 800.0, 1200.0)
VS_LAMBDA = (3000.0,)
PAIRS_ALL = ((1, 2), (1, 3), (2, 3))


@dataclass
class DgpConfig:
    """Simulation scenario.

    ``mode`` is ``"heterogeneity"`` (3 arms, 7 confounders) or ``"varselect"``
    (no treatment, 8 useful + 20 noise predictors).
    """

    K: int = 10
    n_k: int = 200
    mode: str = "heterogeneity"
    setting: str = "a"
    hazard: str = "PH"
    lam: tuple | None = None
    censoring: float = 0.5
    tau_sd: float = 1.0
    b_sd: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("heterogeneity", "varselect"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.setting not in ("a", "b", "c"):
            raise ValueError(f"unknown heterogeneity setting {self.setting!r}")
        if self.hazard not in ("PH", "nPH"):
            raise ValueError(f"unknown hazard {self.hazard!r}")
        if self.K < 1 or self.n_k < 1:
            raise ValueError("K and n_k must be >= 1")
        if not 0 <= self.censoring < 1:
            raise ValueError("censoring target must lie in [0, 1)")
        if self.lam is None:
            self.lam = HET_LAMBDA if self.mode == "heterogeneity" else VS_LAMBDA
        self.lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        if min(self.lam) <= 0:
            raise ValueError("lambda must be positive")

    @property
    def n(self):
        return self.K * self.n_k

    @property
    def J(self):
        return len(self.lam)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- covariates
def covariate_layout(cfg):
    """Column names and categorical flags for the scenario's covariates."""
    if cfg.mode == "heterogeneity":
        return [f"x{l}" for l in range(1, 8)], np.array([False] * 5 + [True] * 2)
    is_cat = np.zeros(28, dtype=bool)
    is_cat[[0, 1]] = True
    is_cat[18:28] = True
    return [f"x{l}" for l in range(1, 29)], is_cat


def codebooks_for(cfg):
    names, is_cat = covariate_layout(cfg)
    labels = ["0", "1", "2"] if cfg.mode == "heterogeneity" else ["0", "1"]
    return {nm: list(labels) for nm, c in zip(names, is_cat) if c}


def gen_covariates(cfg, rng):
    """Covariates; categorical levels take the values 0, 1, 2 (binary 0/1),
    which also serve as the dataset codes."""
    n = cfg.n
    if cfg.mode == "heterogeneity":
        X = np.empty((n, 7))
        X[:, :5] = rng.standard_normal((n, 5))
        for j in (5, 6):
            X[:, j] = rng.choice([0.0, 1.0, 2.0], size=n, p=[0.3, 0.3, 0.4])
        return X
    X = np.empty((n, 28))
    X[:, 0] = rng.binomial(1, 0.5, n)
    X[:, 1] = rng.binomial(1, 0.5, n)
    X[:, 2] = rng.standard_normal(n)
    X[:, 3] = rng.standard_normal(n)
    x2, x3, x4 = X[:, 1], X[:, 2], X[:, 3]
    X[:, 4] = 0.3 * x2 - 0.2 * x3 + rng.standard_normal(n)
    x5 = X[:, 4]
    X[:, 5] = -0.4 * x3 + 0.4 * x4 + 0.3 * x3 * x4 + rng.standard_normal(n)
    x6 = X[:, 5]
    X[:, 6] = 0.1 * x4 * (x5 - 2) ** 2 - 0.1 * x6**2 + rng.standard_normal(n)
    x7 = X[:, 6]
    X[:, 7] = -0.3 * x5**2 + 0.5 * x6 + 0.3 * x7 + 0.2 * x6 * x7 + rng.standard_normal(n)
    X[:, 8:18] = rng.standard_normal((n, 10))
    X[:, 18:28] = rng.binomial(1, 0.5, (n, 10))
    return X


# ----------------------------------------------------------------- treatment
def treatment_logits(X, tau_row):
    """Log-odds of arms 1 and 2 against arm 3 (columns), one row per unit."""
    x1, x2, x3, x4, x5, x6, x7 = (X[:, j] for j in range(7))
    l1 = (1.5 + .1 * x1 + .1 * x2 + .1 * x3 + .5 * x4 + .4 * x5 + .2 * x6 + .3 * x7
          + .4 * x2**2 + .4 * x2**2 * x5 + tau_row)
    l2 = (.7 + .1 * x1 + .3 * x2 + .2 * x3 + .2 * x4 + .1 * x5 + .4 * x6 + .5 * x7
          - .3 * x2 * x4 + .7 * x2**2 * x4 + tau_row)
    return np.column_stack([l1, l2])


def gps_from_logits(logits):
    full = np.column_stack([logits, np.zeros(logits.shape[0])])
    return special.softmax(full, axis=1)


def assign_treatment(X, cluster, cfg, rng, tau=None):
    """Draw arms from the random-intercept multinomial logit.

    Returns ``(a, gps, tau)`` with labels in 1..3 and the true GPS triples.
    """
    if cfg.mode != "heterogeneity":
        raise ValueError("treatment assignment is defined for the heterogeneity mode only")
    K = int(np.max(cluster))
    if tau is None:
        tau = rng.normal(0.0, cfg.tau_sd, K)
    gps = gps_from_logits(treatment_logits(X, tau[cluster - 1]))
    u = rng.random(X.shape[0])
    a = 1 + (u[:, None] > np.cumsum(gps, axis=1)[:, :2]).sum(axis=1)
    return a.astype(int), gps, tau


# ------------------------------------------------------------------ outcomes
def q_functions(X, b_row, cfg):
    """Linear predictors q_a(x, b), shape (n, J)."""
    s = np.sin
    pi = np.pi
    if cfg.mode == "varselect":
        x1, x2, x3, x4, x5, x6, x7, x8 = (X[:, j] for j in range(8))
        q = (1.8 * x1 + 0.5 * x2 + 1.1 * x3 - 0.4 * np.exp(x5) + 0.4 * (x6 - 1.5) ** 2
             + 0.1 * (x7 - 0.1) ** 3 - 5 * s(0.1 * pi * x4 * x8) - 0.4 * x5 * x7 + b_row)
        return q[:, None]
    x1, x2, x3, x4, x5, x6, x7 = (X[:, j] for j in range(7))
    st = cfg.setting
    q1 = (.1 * x1 + .3 * x2 + s(pi * x3) + .6 * x4 + .5 * x5 + 1.2 * x6
          + (0.4 if st == "a" else 0.3 if st == "b" else 0.0) * x7
          + .3 * x2**2 + .5 * x4 * x5 + b_row - 1)
    if st in ("a", "b"):
        q2 = (.4 * x1 + 1.2 * s(pi * x2) + .4 * x3 + .3 * x4 + 1.0 * x5 + .8 * x6
              + (0.2 if st == "a" else 0.1) * x7 + .7 * x1**2 + .4 * x1 * x4 + b_row)
    else:
        q2 = (.4 * x1 + 1.2 * s(pi * x3) + .4 * x4 + .3 * x5 + 1.0 * x6 + .8 * x7
              + .7 * x1**2 + .4 * x1 * x4 + b_row)
    if st == "a":
        q3 = .4 * x1 + .9 * x2 + .4 * x3 + .9 * x4 + .4 * x5 + .4 * x6 + .3 * x7 + b_row - 2
    elif st == "b":
        q3 = (.4 * s(pi * x1) + .9 * x2 + .9 * x3 + .4 * x4 + .4 * x5 + .9 * x6 + .3 * x7
              + .4 * x4**2 - .3 * x2 * x3 + b_row - 3)
    else:
        q3 = (.4 * s(pi * x2) + .9 * x3 + .9 * x4 + .4 * x5 + .4 * x6 + .9 * x7
              + .4 * x4**2 - .3 * x2 * x3 + b_row - 3)
    return np.column_stack([q1, q2, q3])


def weibull_shape(X, cfg):
    if cfg.hazard == "PH":
        return np.full(X.shape[0], 2.0)
    return np.exp(0.7 + 0.5 * X[:, 0])


def gen_survival_times(X, a, b_row, cfg, rng, oracle=False, u=None):
    """Inverse-transform Weibull times; one uniform per row shared by all arms.

    Returns observed T, plus the (n, J) counterfactual matrix when ``oracle``.
    """
    n = X.shape[0]
    if u is None:
        u = rng.random(n)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    rate = np.asarray(cfg.lam)[None, :] * np.exp(q_functions(X, b_row, cfg))
    eta = weibull_shape(X, cfg)[:, None]
    T_all = (-np.log(u)[:, None] / rate) ** (1.0 / eta)
    if a is None:
        T = T_all[:, 0]
    else:
        T = T_all[np.arange(n), np.asarray(a) - 1]
    return (T, T_all) if oracle else T


def expected_log_time(X, b_row, cfg):
    """E[log T(a) | x, b] = (-gamma - log lam_a - q_a) / eta, shape (n, J)."""
    q = q_functions(X, b_row, cfg)
    eta = weibull_shape(X, cfg)[:, None]
    return (-EULER_GAMMA - np.log(np.asarray(cfg.lam))[None, :] - q) / eta


def weibull_survival(t, X, b_row, cfg):
    """True S_a(t | x, b) = exp(-c t^eta) with c = lam_a exp(q_a), shape (n, J)."""
    c = np.asarray(cfg.lam)[None, :] * np.exp(q_functions(X, b_row, cfg))
    eta = weibull_shape(X, cfg)[:, None]
    return np.exp(-c * t**eta)


def weibull_rmst(t_star, X, b_row, cfg):
    """True RMST up to ``t_star``: int_0^t* exp(-c u^eta) du
    = c^(-1/eta) Gamma(1/eta) P(1/eta, c t*^eta) / eta."""
    c = np.asarray(cfg.lam)[None, :] * np.exp(q_functions(X, b_row, cfg))
    eta = np.broadcast_to(weibull_shape(X, cfg)[:, None], c.shape)
    s = 1.0 / eta
    return special.gammainc(s, c * t_star**eta) * special.gamma(s) * c ** (-s) / eta


def true_iste_oracle(X, b_row, cfg, pair, scale="log", t=None):
    """True ISTE of arm ``pair[0]`` versus ``pair[1]`` per row.

    ``scale`` selects expected log time (default), survival probability at
    ``t`` or RMST up to ``t``.
    """
    j, jp = (int(p) - 1 for p in pair)
    if scale == "log":
        m = expected_log_time(X, b_row, cfg)
    elif scale == "surv":
        m = weibull_survival(t, X, b_row, cfg)
    elif scale == "rmst":
        m = weibull_rmst(t, X, b_row, cfg)
    else:
        raise ValueError(f"unknown scale {scale!r}")
    return m[:, j] - m[:, jp]


# ------------------------------------------------------------------ censoring
def solve_censoring_rate(times, target, rng, tol=1e-10):
    """Exponential censoring rate hitting a target censored fraction.

    Standard exponential draws are fixed first (common random numbers) and the
    rate is bisected on log scale until the realized fraction of ``C < T`` is
    the smallest value at or above ``target``. Returns ``(rate, y, delta)``.
    """
    times = np.asarray(times, dtype=float)
    if not 0 < target < 1:
        raise ValueError("censoring target must lie strictly between 0 and 1")
    e = rng.exponential(size=times.size)
    frac = lambda log_r: np.mean(e / np.exp(log_r) < times) - target
    lo, hi = -60.0, 60.0
    if frac(lo) > 0 or frac(hi) < 0:
        raise ValueError("censoring target cannot be bracketed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if frac(mid) >= 0:
            hi = mid
        else:
            lo = mid
    rate = float(np.exp(hi))
    c = e / rate
    delta = (times <= c).astype(int)
    return rate, np.minimum(times, c), delta


# ----------------------------------------------------------------- full draw
@dataclass
class SimTruth:
    """Oracle quantities; ``b`` holds the per-cluster outcome intercepts."""

    b: np.ndarray
    tau: np.ndarray | None
    gps: np.ndarray | None
    T_all: np.ndarray
    T: np.ndarray
    censor_rate: float | None

    def b_row(self, cluster):
        return self.b[np.asarray(cluster) - 1]

    def to_json(self, cluster):
        d = {"b": self.b.tolist(), "T_all": self.T_all.tolist(), "censor_rate": self.censor_rate}
        if self.tau is not None:
            d["tau"] = self.tau.tolist()
            d["gps"] = self.gps.tolist()
        return d


def simulate(cfg, seed=None):
    """One dataset from the scenario plus the oracle quantities."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    cluster = np.repeat(np.arange(1, cfg.K + 1), cfg.n_k)
    X = gen_covariates(cfg, rng)
    a = gps = tau = None
    if cfg.mode == "heterogeneity":
        a, gps, tau = assign_treatment(X, cluster, cfg, rng)
    b = rng.normal(0.0, cfg.b_sd, cfg.K)
    T, T_all = gen_survival_times(X, a, b[cluster - 1], cfg, rng, oracle=True)
    if cfg.censoring > 0:
        rate, y, delta = solve_censoring_rate(T, cfg.censoring, rng)
    else:
        rate, y, delta = None, T.copy(), np.ones(cfg.n, dtype=int)
    names, is_cat = covariate_layout(cfg)
    ds = make_dataset(y, delta, cluster, X, column_names=names,
                      is_categorical=is_cat, a=a, codebooks=codebooks_for(cfg))
    return ds, SimTruth(b=b, tau=tau, gps=gps, T_all=T_all, T=T, censor_rate=rate)


# ----------------------------------------------------------------- amputation
def _term(*cols):
    return tuple(cols)


@dataclass
class AmputationPlan:
    """Subsample-wise MAR amputation by weighted sum scores.

    ``wss[s]`` lists ``(weight, columns)`` terms; a term's value is the product
    of its columns (repeat a name to square it).
    """

    proportions: tuple = (0.30, 0.09, 0.09, 0.08, 0.08, 0.16, 0.10, 0.10)
    targets: tuple = (("x5",), ("x6",), ("x7",), ("x8",),
                      ("x5", "x6"), ("x6", "x7"), ("x7", "x8"), ("x6", "x8"))
    wss: tuple = (
        ((1, _term("x3")), (1, _term("x4")), (1, _term("x3", "x4"))),
        ((1, _term("x3")), (1, _term("x4")), (1, _term("x5")), (1, _term("x5", "x5")),
         (1, _term("x3", "x4"))),
        ((1, _term("x4")), (1, _term("x5")), (1, _term("x6")), (1, _term("x6", "x6")),
         (1, _term("x4", "x5"))),
        ((1, _term("x5")), (1, _term("x6")), (1, _term("x7")), (1, _term("x6", "x7"))),
        ((1, _term("x3")), (1, _term("x4"))),
        ((1, _term("x5")),),
        ((1, _term("x4")), (1, _term("x5")), (0.5, _term("x4", "x5"))),
        ((1, _term("x3")), (1, _term("x4")), (1, _term("x3", "x4"))),
    )
    tails: tuple = ("right",) * 5 + ("both",) * 3
    rate: float = 0.4

    def __post_init__(self):
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError("subsample proportions must sum to 1")
        if not (len(self.proportions) == len(self.targets) == len(self.wss) == len(self.tails)):
            raise ValueError("plan components must have one entry per subsample")
        for s, (tg, w) in enumerate(zip(self.targets, self.wss)):
            used = {c for _, cols in w for c in cols}
            if used & set(tg):
                raise ValueError(f"subsample {s + 1}: score uses an amputated column")
        if any(t not in ("right", "left", "both", "mid") for t in self.tails):
            raise ValueError("tails must be right, left, both or mid")
        if not 0 <= self.rate < 1:
            raise ValueError("amputation rate must lie in [0, 1)")

    def to_dict(self):
        return {"proportions": list(self.proportions),
                "targets": [list(t) for t in self.targets],
                "wss": [[[w, list(c)] for w, c in terms] for terms in self.wss],
                "tails": list(self.tails), "rate": self.rate}

    @classmethod
    def from_dict(cls, d):
        kw = dict(d)
        if "targets" in kw:
            kw["targets"] = tuple(tuple(t) for t in kw["targets"])
        if "wss" in kw:
            kw["wss"] = tuple(tuple((w, tuple(c)) for w, c in terms) for terms in kw["wss"])
        for key in ("proportions", "tails"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def weighted_sum_score(X, names, terms):
    idx = {nm: j for j, nm in enumerate(names)}
    out = np.zeros(X.shape[0])
    for w, cols in terms:
        v = np.ones(X.shape[0])
        for c in cols:
            v = v * X[:, idx[c]]
        out += w * v
    return out


def _tail_score(s, tail):
    return {"right": s, "left": -s, "both": np.abs(s), "mid": -np.abs(s)}[tail]


def ampute(ds, plan=None, rng=None, return_groups=False):
    """Mask covariates by the plan; outcomes, clusters and arms are untouched.

    Rows are shuffled into subsamples of the planned sizes. Within each, the
    standardized score is passed through the logistic CDF with a shift solved
    so the expected missing share equals ``plan.rate``.
    """
    plan = plan or AmputationPlan()
    rng = rng if rng is not None else np.random.default_rng()
    X = ds.X.copy()
    n = ds.n
    names = list(ds.column_names)
    if np.isnan(X).any():
        raise ValueError("amputation expects fully observed covariates")
    counts = np.floor(np.asarray(plan.proportions) * n).astype(int)
    counts[np.argsort(-(np.asarray(plan.proportions) * n - counts))[: n - counts.sum()]] += 1
    perm = rng.permutation(n)
    groups = np.empty(n, dtype=int)
    start = 0
    for s, c in enumerate(counts):
        rows = perm[start:start + c]
        start += c
        groups[rows] = s
        if c == 0:
            raise ValueError(f"subsample {s + 1} is empty")
        if plan.rate == 0:
            continue
        score = weighted_sum_score(ds.X[rows], names, plan.wss[s])
        sd = score.std()
        z = (score - score.mean()) / sd if sd > 0 else np.zeros(c)
        z = _tail_score(z, plan.tails[s])
        shift = optimize.brentq(lambda h: special.expit(h + z).mean() - plan.rate, -60, 60,
                                xtol=1e-12)
        miss = rng.random(c) < special.expit(shift + z)
        for col in plan.targets[s]:
            X[rows[miss], names.index(col)] = np.nan
    out = ds.with_X(X)
    return (out, groups) if return_groups else out
