"""riAFT-BART: random-intercept accelerated failure time models with Bayesian
additive regression trees for clustered, right-censored survival data."""

from .data import (DataError, SurvivalDataset, bootstrap_resample, load_dataset, make_dataset,
                   save_dataset, validate)
from .sampler import ChainConfig, PosteriorDraws, center_responses, run_chain, run_chains

__all__ = [
    "DataError", "SurvivalDataset", "bootstrap_resample", "load_dataset", "make_dataset",
    "save_dataset", "validate", "ChainConfig", "PosteriorDraws", "center_responses",
    "run_chain", "run_chains",
]
