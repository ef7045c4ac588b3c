"""Metropolis-within-Gibbs sampler for the random-intercept AFT model with a
BART mean function.

Working scale: ``z = log y - mu_aft`` (centered log times). Each iteration
updates the random intercepts, their variance and the expansion parameter,
backfits the forest on ``z - b``, then redraws the latent log times of the
censored rows from lower-truncated normals.
"""
from __future__ import annotations

import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special

from .bart import Forest, ForestHyper, compute_vip, init_forest

log = logging.getLogger(__name__)


class ChainError(RuntimeError):
    """Sampler failure; ``state`` holds the last valid chain state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# ----------------------------------------------------------------- centering
@dataclass(frozen=True)
class CenteringConstants:
    mu_aft: float
    sigma_aft: float

    def __post_init__(self):
        if not (np.isfinite(self.mu_aft) and np.isfinite(self.sigma_aft) and self.sigma_aft > 0):
            raise ValueError("centering constants must be finite with sigma_aft > 0")


def _lognormal_loglik(theta, x, d):
    mu, s = theta
    sig = np.exp(s)
    z = (x - mu) / sig
    return np.sum(d * (-s - 0.5 * z * z)) + np.sum((1 - d) * special.log_ndtr(-z))


def _lognormal_grad_hess(theta, x, d):
    mu, s = theta
    sig = np.exp(s)
    z = (x - mu) / sig
    ev = d == 1
    ze, zc = z[ev], z[~ev]
    # inverse Mills ratio phi/Q computed stably
    hc = np.exp(-0.5 * zc * zc - special.log_ndtr(-zc)) / np.sqrt(2 * np.pi)
    hp = hc * (hc - zc)
    g_mu = ze.sum() / sig + hc.sum() / sig
    g_s = np.sum(ze * ze - 1.0) + np.sum(hc * zc)
    h_mm = -ev.sum() / sig**2 - hp.sum() / sig**2
    h_ms = -2.0 * ze.sum() / sig - np.sum(hp * zc + hc) / sig
    h_ss = -2.0 * np.sum(ze * ze) - np.sum((hp * zc + hc) * zc)
    return np.array([g_mu, g_s]), np.array([[h_mm, h_ms], [h_ms, h_ss]])


def center_responses(y, delta, tol=1e-8, max_iter=100):
    """Right-censored log-normal intercept-only MLE of (mu, sigma) on log y.

    Newton iterations on (mu, log sigma) from the moment start; if they fail
    to converge, falls back to a golden-section search over log sigma with mu
    profiled out.
    """
    x = np.log(np.asarray(y, dtype=float))
    d = np.asarray(delta, dtype=int)
    if d.sum() == 0:
        raise ValueError("all observations are censored; cannot center responses")
    if d.sum() < 2:
        raise ValueError("need at least two uncensored observations to center responses")
    floor = np.finfo(float).eps
    sd0 = x.std()
    if sd0 <= floor:
        warnings.warn("log times have zero spread; sigma_aft set to the machine floor",
                      RuntimeWarning, stacklevel=2)
        return CenteringConstants(float(x.mean()), floor)
    theta = np.array([x.mean(), np.log(sd0)])
    cur = _lognormal_loglik(theta, x, d)
    for _ in range(max_iter):
        g, H = _lognormal_grad_hess(theta, x, d)
        if np.linalg.norm(g) < tol:
            return CenteringConstants(float(theta[0]), float(np.exp(theta[1])))
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or g @ step <= 0:
            step = g / max(1.0, np.abs(H).max())
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            val = _lognormal_loglik(cand, x, d)
            if np.isfinite(val) and val >= cur - 1e-12 * max(1.0, abs(cur)):
                break
            t *= 0.5
        if t * np.linalg.norm(step) < 1e-13:
            # no representable progress left: at the optimum to rounding
            return CenteringConstants(float(theta[0]), float(np.exp(theta[1])))
        theta, cur = cand, val
    warnings.warn("Newton iterations for the centering model did not converge; "
                  "using a profile search", RuntimeWarning, stacklevel=2)
    return _profile_center(x, d)


def _profile_center(x, d):
    def best_mu(s):
        f = lambda mu: _lognormal_grad_hess(np.array([mu, s]), x, d)[0][0]
        lo, hi = x.min() - 50 * np.exp(s), x.max() + 50 * np.exp(s)
        return optimize.brentq(f, lo, hi, xtol=1e-12)

    res = optimize.minimize_scalar(lambda s: -_lognormal_loglik(np.array([best_mu(s), s]), x, d),
                                   bracket=(np.log(x.std()) - 1, np.log(x.std()) + 1),
                                   method="golden", tol=1e-10)
    s = res.x
    return CenteringConstants(float(best_mu(s)), float(np.exp(s)))


# ---------------------------------------------------------- conjugate pieces
def b_conditional(resid_sum, n_k, tau2, alpha, sigma2):
    """Mean and variance of the normal full conditional of a random intercept."""
    if tau2 <= 0 or alpha <= 0 or sigma2 <= 0:
        raise ChainError("tau2, alpha and sigma2 must be positive")
    v = tau2 * alpha
    denom = n_k * v + sigma2
    return v * resid_sum / denom, sigma2 * v / denom


def alpha_conditional(b, tau2):
    """(shape, scale) of the inverse-gamma conditional of the expansion parameter."""
    if tau2 <= 0:
        raise ChainError("tau2 must be positive")
    return 1.0, 1.0 + np.sum(np.square(b)) / (2.0 * tau2)


def tau2_conditional(b, alpha):
    """(shape, scale) of the inverse-gamma conditional of tau^2."""
    if alpha <= 0:
        raise ChainError("alpha must be positive")
    b = np.asarray(b)
    return b.size / 2.0 + 1.0, (np.sum(np.square(b)) + 2.0 * alpha) / (2.0 * alpha)


def draw_inverse_gamma(shape, scale, rng, size=None):
    return scale / rng.gamma(shape, size=size)


# --------------------------------------------------------- truncated normal
_TAIL_SWITCH = 4.0


def sample_trunc_normal(mu, sigma, lower, rng):
    """Draws from N(mu, sigma^2) conditioned on exceeding ``lower``.

    Inverse-CDF below ``lower - mu = 4 sigma``; beyond that, exponential
    proposals with the optimal rate (Robert, 1995). Broadcasts over arrays.
    """
    mu, sigma, lower = np.broadcast_arrays(np.asarray(mu, float), np.asarray(sigma, float),
                                           np.asarray(lower, float))
    a = (lower - mu) / sigma
    out = np.empty(a.shape)
    u = rng.random(a.shape)
    body = a < _TAIL_SWITCH
    ab = a[body]
    ub = u[body]
    neg = ab <= 0
    xb = np.empty(ab.shape)
    # left half: invert the CDF from below; right half: invert the upper tail
    pa = special.ndtr(ab[neg])
    xb[neg] = special.ndtri(pa + ub[neg] * (1.0 - pa))
    qa = special.ndtr(-ab[~neg])
    xb[~neg] = -special.ndtri(ub[~neg] * qa)
    xb = np.maximum(xb, ab)
    out[body] = xb
    tail = np.flatnonzero(~body)
    if tail.size:
        at = a.ravel()[tail]
        rate = 0.5 * (at + np.sqrt(at * at + 4.0))
        res = np.empty(tail.size)
        todo = np.arange(tail.size)
        while todo.size:
            x = at[todo] + rng.exponential(size=todo.size) / rate[todo]
            ok = rng.random(todo.size) <= np.exp(-0.5 * (x - rate[todo]) ** 2)
            res[todo[ok]] = x[ok]
            todo = todo[~ok]
        out.ravel()[tail] = res
    draw = mu + sigma * out
    draw = np.maximum(draw, lower)
    return draw if draw.ndim else float(draw)


# --------------------------------------------------------------- chain state
@dataclass
class ChainConfig:
    draws: int = 4500
    burn_in: int = 1000
    m: int = 200
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    keep_f: bool = True
    counterfactual: bool = True
    keep_forests: bool = False
    thin: int = 1
    progress_every: int = 0

    def __post_init__(self):
        if self.draws <= self.burn_in:
            raise ValueError("draws must exceed burn_in")
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")

    def forest_hyper(self):
        return ForestHyper(**{**self.hyper, "m": self.m})


@dataclass
class RiaftState:
    b: np.ndarray
    tau2: float
    alpha: float
    forest: Forest
    z: np.ndarray
    centering: CenteringConstants
    cluster: np.ndarray  # 0-based cluster index per row
    lower: np.ndarray  # centered log observed times
    delta: np.ndarray

    @property
    def sigma2(self):
        return self.forest.sigma2

    @property
    def f(self):
        return self.forest.fit

    def check(self):
        if not (self.tau2 > 0 and self.alpha > 0 and self.sigma2 > 0):
            raise ChainError("tau2, alpha and sigma2 must stay positive", self)
        cens = self.delta == 0
        if np.any(self.z[cens] < self.lower[cens]) or np.any(self.z[~cens] != self.lower[~cens]):
            raise ChainError("augmented log times violate the censoring bounds", self)


def gibbs_update_b(state, k, rng, n_k=None, resid_sum=None):
    """Redraw the random intercept of cluster ``k`` (0-based)."""
    if n_k is None:
        rows = state.cluster == k
        n_k = int(rows.sum())
        resid_sum = float(np.sum(state.z[rows] - state.f[rows]))
    mean, var = b_conditional(resid_sum, n_k, state.tau2, state.alpha, state.sigma2)
    state.b[k] = mean + np.sqrt(var) * rng.standard_normal()
    return state.b[k]


def gibbs_update_all_b(state, rng):
    K = state.b.shape[0]
    n_k = np.bincount(state.cluster, minlength=K)
    sums = np.bincount(state.cluster, weights=state.z - state.f, minlength=K)
    mean, var = b_conditional(sums, n_k, state.tau2, state.alpha, state.sigma2)
    state.b[:] = mean + np.sqrt(var) * rng.standard_normal(K)
    return state.b


def gibbs_update_alpha(state, rng):
    shape, scale = alpha_conditional(state.b, state.tau2)
    state.alpha = float(draw_inverse_gamma(shape, scale, rng))
    return state.alpha


def gibbs_update_tau2(state, rng):
    shape, scale = tau2_conditional(state.b, state.alpha)
    state.tau2 = float(draw_inverse_gamma(shape, scale, rng))
    return state.tau2


def augment_censored(state, rng):
    """Redraw latent log times of censored rows above their observed bound."""
    cens = np.flatnonzero(state.delta == 0)
    if cens.size:
        mean = state.f[cens] + state.b[state.cluster[cens]]
        state.z[cens] = sample_trunc_normal(mean, np.sqrt(state.sigma2), state.lower[cens], rng)
    return state.z


def init_state(ds, config, centering=None):
    centering = centering or center_responses(ds.y, ds.delta)
    lower = np.log(ds.y) - centering.mu_aft
    Xd = ds.design()
    forest = init_forest(config.m, lower, is_cat=ds.design_is_categorical(),
                         hyper=config.forest_hyper(), sigma_hat=centering.sigma_aft)
    forest._attach(Xd)
    return RiaftState(b=np.zeros(ds.K), tau2=1.0, alpha=1.0, forest=forest, z=lower.copy(),
                      centering=centering, cluster=ds.cluster - 1, lower=lower,
                      delta=np.asarray(ds.delta).copy())


def iterate(state, Xd, rng):
    """One full iteration: intercepts, tau^2, alpha; forest; augmentation."""
    gibbs_update_all_b(state, rng)
    gibbs_update_tau2(state, rng)
    gibbs_update_alpha(state, rng)
    state.forest.sweep(Xd, state.z - state.b[state.cluster], rng)
    augment_censored(state, rng)
    return state


# ------------------------------------------------------------- posterior draws
@dataclass
class PosteriorDraws:
    """Kept draws of one or more chains. ``f`` and ``cf`` are on the log-time
    scale (centering constant already added back)."""

    b: np.ndarray
    tau2: np.ndarray
    alpha: np.ndarray
    sigma2: np.ndarray
    vip: np.ndarray
    iters: np.ndarray
    chain: np.ndarray
    centering: CenteringConstants
    predictor_names: tuple
    burn_in: int
    f: np.ndarray | None = None
    cf: np.ndarray | None = None
    forests: list | None = None
    config: dict = field(default_factory=dict)
    seed: int | None = None
    acceptance: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.tau2.shape[0]

    def vip_mean(self, names=None):
        if self.n_draws == 0:
            raise ValueError("no kept draws")
        v = self.vip.mean(axis=0)
        if names is None:
            return v
        idx = [self.predictor_names.index(nm) for nm in names]
        return v[idx]

    def f_mean(self):
        return self.f.mean(axis=0)

    # ----------------------------------------------------------- draw file
    def save(self, path, include_f=True, include_forests=True):
        path = Path(path)
        with path.open("w") as fh:
            head = {"type": "header", "config": self.config, "seed": self.seed,
                    "centering": asdict(self.centering), "predictor_names": list(self.predictor_names),
                    "burn_in": self.burn_in, "acceptance": self.acceptance,
                    "n_draws": int(self.n_draws)}
            fh.write(json.dumps(head) + "\n")
            for d in range(self.n_draws):
                rec = {"iter": int(self.iters[d]), "chain": int(self.chain[d]),
                       "b": self.b[d].tolist(), "tau2": float(self.tau2[d]),
                       "alpha": float(self.alpha[d]), "sigma2": float(self.sigma2[d]),
                       "vip": self.vip[d].tolist()}
                if include_f and self.f is not None:
                    rec["f"] = self.f[d].tolist()
                if include_f and self.cf is not None:
                    rec["cf"] = self.cf[d].tolist()
                if include_forests and self.forests is not None:
                    rec["forest"] = self.forests[d].to_records()
                fh.write(json.dumps(rec) + "\n")
        return path

    @classmethod
    def load(cls, path):
        with Path(path).open() as fh:
            head = json.loads(fh.readline())
            recs = [json.loads(line) for line in fh if line.strip()]
        get = lambda key: np.array([r[key] for r in recs], dtype=float)
        nb = len(recs[0]["b"]) if recs else 0
        return cls(
            b=get("b") if recs else np.zeros((0, nb)), tau2=get("tau2"), alpha=get("alpha"),
            sigma2=get("sigma2"), vip=get("vip") if recs else np.zeros((0, 0)),
            iters=np.array([r["iter"] for r in recs], dtype=int),
            chain=np.array([r.get("chain", 0) for r in recs], dtype=int),
            centering=CenteringConstants(**head["centering"]),
            predictor_names=tuple(head["predictor_names"]), burn_in=head["burn_in"],
            f=get("f") if recs and "f" in recs[0] else None,
            cf=get("cf") if recs and "cf" in recs[0] else None,
            forests=[Forest.from_records(r["forest"]) for r in recs] if recs and "forest" in recs[0] else None,
            config=head.get("config", {}), seed=head.get("seed"),
            acceptance=head.get("acceptance", {}))


def concat_draws(runs):
    """Merge chains by concatenating their draws (chain ids preserved)."""
    first = runs[0]
    cat = lambda key: (None if getattr(first, key) is None
                       else np.concatenate([getattr(r, key) for r in runs]))
    forests = None
    if first.forests is not None:
        forests = [f for r in runs for f in r.forests]
    return PosteriorDraws(b=cat("b"), tau2=cat("tau2"), alpha=cat("alpha"), sigma2=cat("sigma2"),
                          vip=cat("vip"), iters=cat("iters"), chain=cat("chain"),
                          centering=first.centering, predictor_names=first.predictor_names,
                          burn_in=first.burn_in, f=cat("f"), cf=cat("cf"), forests=forests,
                          config=first.config, seed=first.seed, acceptance=first.acceptance)


def run_chain(ds, config=None, chain_id=0, centering=None, progress=None, **overrides):
    """Run one chain and return its kept draws.

    Per iteration: all b_k, then tau^2, then alpha; backfit the forest on
    ``z - b``; augment censored log times. Kept iterations record f (+ mu_aft)
    for every row, b, tau^2, alpha, sigma^2 and the VIP vector; with
    ``counterfactual`` the forest is also evaluated at every arm.
    """
    config = config or ChainConfig()
    if overrides:
        config = ChainConfig(**{**asdict(config), **overrides})
    if ds.mask.any():
        raise ValueError("dataset has missing covariates; impute before fitting")
    rng = np.random.default_rng([config.seed, chain_id])
    state = init_state(ds, config, centering)
    Xd = ds.design()
    mu_aft = state.centering.mu_aft
    arms = list(range(1, ds.J + 1)) if (config.counterfactual and ds.a is not None) else []
    Xarm = [ds.design(a=j) for j in arms]

    keep = list(range(config.burn_in, config.draws, config.thin))
    D = len(keep)
    n, K, p = ds.n, ds.K, Xd.shape[1]
    out_b = np.empty((D, K))
    out_tau2 = np.empty(D)
    out_alpha = np.empty(D)
    out_sigma2 = np.empty(D)
    out_vip = np.empty((D, p))
    out_f = np.empty((D, n)) if config.keep_f else None
    out_cf = np.empty((D, len(arms), n)) if arms else None
    forests = [] if config.keep_forests else None
    progress = progress or (_heartbeat if config.progress_every else None)

    d = 0
    for it in range(config.draws):
        try:
            iterate(state, Xd, rng)
        except (FloatingPointError, ValueError, ChainError) as exc:
            raise ChainError(f"chain {chain_id} failed at iteration {it}: {exc}", state) from exc
        if config.progress_every and (it + 1) % config.progress_every == 0:
            progress(chain_id, it + 1, config.draws)
        if d < D and it == keep[d]:
            out_b[d] = state.b
            out_tau2[d] = state.tau2
            out_alpha[d] = state.alpha
            out_sigma2[d] = state.sigma2
            out_vip[d] = compute_vip(state.forest)
            if out_f is not None:
                out_f[d] = state.f + mu_aft
            for j, Xa in enumerate(Xarm):
                out_cf[d, j] = state.forest.predict(Xa) + mu_aft
            if forests is not None:
                forests.append(Forest.from_records(state.forest.to_records()))
            d += 1
    acc = {kind: [int(p_), int(a_)] for kind, p_, a_ in
           zip(("grow", "prune", "change", "swap"), state.forest.n_proposed, state.forest.n_accepted)}
    return PosteriorDraws(b=out_b, tau2=out_tau2, alpha=out_alpha, sigma2=out_sigma2, vip=out_vip,
                          iters=np.array(keep), chain=np.full(D, chain_id),
                          centering=state.centering, predictor_names=ds.design_names(),
                          burn_in=config.burn_in, f=out_f, cf=out_cf, forests=forests,
                          config=_jsonable(asdict(config)), seed=config.seed, acceptance=acc)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def _heartbeat(chain_id, it, total):
    print(f"[chain {chain_id}] iteration {it}/{total}", file=sys.stderr, flush=True)


def run_chains(ds, config, n_chains=1, jobs=1):
    """Independent chains (seeded by chain id) merged by concatenation."""
    from .parallel import map_tasks

    runs = map_tasks(_chain_task, [(ds, config, c) for c in range(n_chains)], jobs)
    return concat_draws(runs)


def _chain_task(args):
    ds, config, c = args
    return run_chain(ds, config, chain_id=c)


def predict_posterior(draws, X=None, a=None, ds=None):
    """Per-draw f (+ mu_aft) at the given rows, shape (D, n).

    With persisted forests any design matrix can be scored (``ds`` + ``a``
    builds it); otherwise only the training rows are available, at the
    observed arm (``draws.f``) or at an arm ``a`` (``draws.cf``).
    """
    if draws.forests is not None and (X is not None or ds is not None):
        Xd = X if X is not None else ds.design(a=a)
        if Xd.shape[1] != len(draws.predictor_names):
            raise ValueError("design matrix does not match the fitted predictors")
        mu = draws.centering.mu_aft
        return np.stack([f.predict(Xd) + mu for f in draws.forests])
    if X is not None:
        raise ValueError("scoring new rows needs persisted forests (keep_forests=True)")
    if a is None:
        if draws.f is None:
            raise ValueError("f draws were not kept")
        return draws.f
    if draws.cf is None:
        raise ValueError("counterfactual draws were not kept")
    if np.ndim(a) == 0:
        return draws.cf[:, int(a) - 1, :]
    a = np.asarray(a, int)
    return draws.cf[:, a - 1, np.arange(a.size)]
