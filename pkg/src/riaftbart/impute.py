"""Single imputation by chained equations.

Continuous columns use predictive mean matching on a Bayesian linear fit;
categorical columns use a (multinomial) logistic fit with the category drawn
from the predicted probabilities. Every model conditions on the other
covariates plus log y and the event indicator.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

log = logging.getLogger(__name__)


def _predictors(X, is_cat, skip, extra):
    cols = []
    for j in range(X.shape[1]):
        if j == skip:
            continue
        v = X[:, j]
        if is_cat[j]:
            levels = np.unique(v)
            # one-hot without the first level
            cols.extend((v == lev).astype(float) for lev in levels[1:])
        else:
            cols.append(v)
    cols.extend(extra)
    return np.column_stack([np.ones(X.shape[0])] + cols)


def pmm_draw(Z, v, obs, rng, k=5):
    """Predictive mean matching for the rows where ``obs`` is False.

    A posterior draw of the regression coefficients predicts the missing rows;
    each takes the observed value of one of the ``k`` donors whose fitted mean
    (at the least-squares fit) is closest.
    """
    Zo, vo = Z[obs], v[obs]
    n_o, p = Zo.shape
    beta, *_ = np.linalg.lstsq(Zo, vo, rcond=None)
    resid = vo - Zo @ beta
    df = max(n_o - p, 1)
    sigma = np.sqrt(resid @ resid / rng.chisquare(df))
    # covariance of beta from a ridge-stabilized (Z'Z)^-1
    ztz = Zo.T @ Zo
    ztz += 1e-6 * np.trace(ztz) / p * np.eye(p)
    chol = np.linalg.cholesky(np.linalg.inv(ztz))
    beta_star = beta + sigma * chol @ rng.standard_normal(p)
    yhat_obs = Zo @ beta
    yhat_mis = Z[~obs] @ beta_star
    k = min(k, n_o)
    order = np.argsort(yhat_obs, kind="stable")
    sorted_hat = yhat_obs[order]
    out = np.empty(yhat_mis.size)
    for i, target in enumerate(yhat_mis):
        dist = np.abs(sorted_hat - target)
        donors = np.argpartition(dist, k - 1)[:k] if k < n_o else np.arange(n_o)
        out[i] = vo[order[donors[rng.integers(donors.size)]]]
    return out


def logistic_draw(Z, v, obs, rng):
    levels = np.unique(v[obs])
    if levels.size == 1:
        return np.full(int((~obs).sum()), levels[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = LogisticRegression(C=1e4, max_iter=500).fit(Z[obs][:, 1:], v[obs])
    prob = model.predict_proba(Z[~obs][:, 1:])
    u = rng.random(prob.shape[0])[:, None]
    pick = (u > np.cumsum(prob, axis=1)[:, :-1]).sum(axis=1)
    return model.classes_[pick]


def chained_impute(ds, cycles=10, rng=None, k=5):
    """Completed copy of ``ds``; a dataset without missing cells is returned as is."""
    mask = ds.mask
    if not mask.any():
        return ds
    rng = rng if rng is not None else np.random.default_rng()
    X = ds.X.copy()
    is_cat = ds.is_categorical
    todo = [j for j in range(ds.L) if mask[:, j].any()]
    for j in todo:
        obs = ~mask[:, j]
        if not obs.any():
            raise ValueError(f"column {ds.column_names[j]} has no observed values")
        X[~obs, j] = rng.choice(X[obs, j], size=int((~obs).sum()))
    extra = [np.log(ds.y), ds.delta.astype(float)]
    for _ in range(cycles):
        for j in todo:
            obs = ~mask[:, j]
            Z = _predictors(X, is_cat, j, extra)
            try:
                if is_cat[j]:
                    X[~obs, j] = logistic_draw(Z, X[:, j], obs, rng)
                else:
                    X[~obs, j] = pmm_draw(Z, X[:, j], obs, rng, k)
            except (np.linalg.LinAlgError, ValueError) as exc:
                log.warning("imputation model for %s failed (%s); using a marginal draw",
                            ds.column_names[j], exc)
                X[~obs, j] = rng.choice(X[obs, j], size=int((~obs).sum()))
    return ds.with_X(X)
