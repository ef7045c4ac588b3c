"""Permutation-based variable selection from posterior variable inclusion
proportions, with bootstrap-imputation aggregation for incomplete data."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import bootstrap_resample
from .impute import chained_impute
from .parallel import derive_seed, map_tasks
from .sampler import ChainConfig, ChainError, run_chain

log = logging.getLogger(__name__)

QUANTILE_METHOD = "higher"


def average_vip(draws):
    """Posterior mean VIP over kept draws, indexed by covariate (treatment column dropped)."""
    if draws.n_draws == 0:
        raise ValueError("no kept draws")
    names = list(draws.predictor_names)
    keep = [j for j, nm in enumerate(names) if nm != "a"]
    return draws.vip[:, keep].mean(axis=0)


def permute_outcomes(ds, seed):
    """Jointly permute the (y, delta) pairs across rows."""
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.with_outcomes(ds.y[perm], ds.delta[perm])


def null_quantile(null, alpha):
    """Column-wise empirical (1 - alpha) quantile (``higher`` order statistic)."""
    return np.quantile(np.asarray(null), 1.0 - alpha, axis=0, method=QUANTILE_METHOD)


@dataclass
class SelectConfig:
    """Settings of one permutation selection; null chains use their own budget."""

    P: int = 100
    alpha: float = 0.05
    chain: ChainConfig = field(default_factory=ChainConfig)
    null_draws: int = 1500
    null_burn_in: int = 500
    retries: int = 2

    def __post_init__(self):
        if isinstance(self.chain, dict):
            self.chain = ChainConfig(**self.chain)
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.P < 1:
            raise ValueError("P must be >= 1")

    def null_chain(self):
        return replace(self.chain, draws=self.null_draws, burn_in=self.null_burn_in,
                       keep_f=False, counterfactual=False, keep_forests=False)


@dataclass
class SelectionResult:
    names: list
    vip: np.ndarray
    threshold: np.ndarray | None
    selected: list
    boot_count: np.ndarray | None = None
    B: int | None = None
    pi: float | None = None

    @property
    def selected_names(self):
        return [self.names[j] for j in self.selected]

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "vip", "threshold", "selected", "boot_count"])
            chosen = set(self.selected)
            for j, nm in enumerate(self.names):
                thr = "" if self.threshold is None else repr(float(self.threshold[j]))
                cnt = "" if self.boot_count is None else str(int(self.boot_count[j]))
                w.writerow([nm, repr(float(self.vip[j])), thr, int(j in chosen), cnt])
        return path


def _vip_task(args):
    ds, chain, seed, retries = args
    for attempt in range(retries + 1):
        try:
            cfg = replace(chain, seed=derive_seed(seed, attempt))
            return average_vip(run_chain(ds, cfg))
        except ChainError as exc:
            log.warning("chain failed (attempt %d): %s", attempt + 1, exc)
    raise ChainError(f"chain failed after {retries + 1} attempts")


def build_null(ds, P, chain, seed, jobs=1, retries=2):
    """P x L matrix of mean VIPs from chains fitted to permuted outcomes."""
    tasks = [(permute_outcomes(ds, derive_seed(seed, p, 0)), chain, derive_seed(seed, p, 1), retries)
             for p in range(P)]
    return np.vstack(map_tasks(_vip_task, tasks, jobs))


def local_threshold_select(vip, null, alpha=0.05, names=None):
    """Select covariate l iff VIP_l exceeds the (1 - alpha) quantile of its null column."""
    vip = np.asarray(vip, float)
    null = np.atleast_2d(np.asarray(null, float))
    thr = null_quantile(null, alpha)
    sel = [int(j) for j in np.flatnonzero(vip > thr)]
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(vip.size)]
    return SelectionResult(names, vip, thr, sel)


def permutation_select(ds, cfg, seed, jobs=1):
    """Observed-data chain plus P permutation chains, then local thresholds."""
    vip = _vip_task((ds, replace(cfg.chain, keep_f=False, counterfactual=False),
                     derive_seed(seed, 0), cfg.retries))
    null = build_null(ds, cfg.P, cfg.null_chain(), derive_seed(seed, 1), jobs, cfg.retries)
    return local_threshold_select(vip, null, cfg.alpha, ds.column_names)


def _boot_task(args):
    ds, cfg, seed, imp_cycles, max_retry = args
    for attempt in range(max_retry + 1):
        s = derive_seed(seed, attempt)
        try:
            boot = bootstrap_resample(ds, derive_seed(s, 0))
            full = chained_impute(boot, cycles=imp_cycles, rng=np.random.default_rng(derive_seed(s, 1)))
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("imputation failed on a bootstrap replicate (%s); redrawing", exc)
            continue
        return permutation_select(full, cfg, derive_seed(s, 2))
    raise RuntimeError("bootstrap imputation failed repeatedly")


def boot_counts(results, L):
    counts = np.zeros(L, dtype=int)
    for r in results:
        counts[r.selected] += 1
    return counts


def select_by_count(counts, B, pi, names, vip=None):
    chosen = [int(j) for j in np.flatnonzero(np.asarray(counts) >= pi * B)]
    vip = np.zeros(len(names)) if vip is None else vip
    return SelectionResult(list(names), vip, None, chosen, np.asarray(counts), B, pi)


def bootstrap_selections(ds, B, cfg, seed, imp_cycles=10, jobs=1):
    """Per-replicate SelectionResults for B bootstrap-imputed datasets."""
    tasks = [(ds, cfg, derive_seed(seed, b), imp_cycles, 3) for b in range(B)]
    return map_tasks(_boot_task, tasks, jobs)


def aggregate_bootstrap_select(ds, B, pi, cfg, seed, imp_cycles=10, jobs=1, results=None):
    """Covariates chosen in at least pi * B bootstrap-imputed replicates."""
    if B < 1 or not 0 < pi < 1:
        raise ValueError("need B >= 1 and pi in (0, 1)")
    results = results or bootstrap_selections(ds, B, cfg, seed, imp_cycles, jobs)
    counts = boot_counts(results, ds.L)
    vip = np.mean([r.vip for r in results], axis=0)
    return select_by_count(counts, B, pi, ds.column_names, vip)
