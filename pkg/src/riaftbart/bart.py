"""Sum-of-trees regression engine (BART) with Bayesian backfitting.

The heavy lifting lives in :mod:`riaftbart._kernels`; this module holds the
forest state, hyperparameters, prediction, variable inclusion proportions and
line-delimited JSON serialization.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import chi2

from . import _kernels as K

MOVE_KINDS = ("grow", "prune", "change", "swap")


@dataclass
class ForestHyper:
    """Prior and proposal settings of the forest.

    ``base``/``power`` give the depth prior ``base * (1 + d) ** -power``;
    ``k`` sets the leaf scale, ``nu``/``q`` the inverse chi-square prior on
    sigma^2 (``q`` is the prior probability that sigma is below the rough
    estimate used for calibration).
    """

    m: int = 200
    base: float = 0.95
    power: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.90
    node_min: int = 5
    max_cuts: int = 100
    move_probs: tuple = (0.28, 0.28, 0.40, 0.04)
    max_depth: int = 10
    capacity: int = 128

    def __post_init__(self):
        self.move_probs = tuple(float(p) for p in self.move_probs)
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if abs(sum(self.move_probs) - 1.0) > 1e-12 or len(self.move_probs) != 4:
            raise ValueError("move_probs must be four probabilities summing to 1")


def calibrate_lambda(sigma_hat, nu, q):
    """Scale of the sigma^2 prior such that P(sigma < sigma_hat) = q."""
    return sigma_hat**2 * chi2.ppf(1.0 - q, nu) / nu


@dataclass
class TreeMove:
    kind: str
    node: int
    var: int = -1
    cut: float = 0.0
    right_codes: tuple = ()
    log_ratio: float = float("-inf")

    @property
    def accept_prob(self):
        return float(min(1.0, np.exp(min(self.log_ratio, 0.0))))


@dataclass
class DecisionTree:
    """Preorder node list of one tree.

    Each node is a dict: leaves ``{"mu": value}``, continuous splits
    ``{"var": j, "cut": c}`` (x > c goes right), categorical splits
    ``{"var": j, "right": [codes]}``.
    """

    nodes: list = field(default_factory=lambda: [{"mu": 0.0}])

    @property
    def n_leaves(self):
        return sum("mu" in nd for nd in self.nodes)

    @property
    def depth(self):
        best = 0
        stack = [0]
        for nd in self.nodes:
            d = stack.pop()
            best = max(best, d)
            if "mu" not in nd:
                stack.extend([d + 1, d + 1])
        return best


def _mask_from_codes(codes):
    m = 0
    for c in codes:
        m |= 1 << int(c)
    return m


def _codes_from_mask(mask):
    return [c for c in range(63) if (int(mask) >> c) & 1]


class Forest:
    """State of a sum-of-trees model: m trees, sigma^2 and hyperparameters."""

    def __init__(self, hyper, n_vars, is_cat=None, sigma2=1.0, sigma_mu=1.0, lam=1.0):
        self.hyper = hyper
        self.n_vars = int(n_vars)
        self.is_cat = (np.zeros(n_vars, dtype=np.bool_) if is_cat is None
                       else np.asarray(is_cat, dtype=np.bool_).copy())
        if self.is_cat.shape[0] != self.n_vars:
            raise ValueError("is_cat length must equal n_vars")
        self.sigma2 = float(sigma2)
        self.sigma_mu = float(sigma_mu)
        self.lam = float(lam)
        m, cap = hyper.m, hyper.capacity
        self.var = np.full((m, cap), -1, dtype=np.int32)
        self.cut = np.zeros((m, cap))
        self.rmask = np.zeros((m, cap), dtype=np.int64)
        self.left = np.full((m, cap), -1, dtype=np.int32)
        self.right = np.full((m, cap), -1, dtype=np.int32)
        self.parent = np.full((m, cap), -1, dtype=np.int32)
        self.depth = np.zeros((m, cap), dtype=np.int32)
        self.mu = np.zeros((m, cap))
        self.used = np.zeros((m, cap), dtype=np.bool_)
        self.used[:, 0] = True
        self.leaf_of = None
        self.fit = None
        self.n_proposed = np.zeros(4, dtype=np.int64)
        self.n_accepted = np.zeros(4, dtype=np.int64)

    @property
    def m(self):
        return self.hyper.m

    # ------------------------------------------------------------------ sampling
    def _attach(self, X):
        n = X.shape[0]
        if self.leaf_of is None or self.leaf_of.shape[1] != n:
            self.leaf_of = np.zeros((self.m, n), dtype=np.int32)
            for h in range(self.m):
                self.leaf_of[h] = self._route_tree(h, X)
            self.fit = K.predict(self.var, self.cut, self.rmask, self.left, self.right,
                                 self.mu, self.used, X, self.is_cat)

    def _route_tree(self, h, X):
        out = np.zeros(X.shape[0], dtype=np.int32)
        for i in range(X.shape[0]):
            j = 0
            while self.var[h, j] >= 0:
                v = self.var[h, j]
                right = K.go_right(X[i, v], self.is_cat[v], self.cut[h, j], self.rmask[h, j])
                j = self.right[h, j] if right else self.left[h, j]
            out[i] = j
        return out

    def sweep(self, X, r, rng, update_sigma=True):
        """One Bayesian-backfitting pass; see :func:`backfit_sweep`."""
        X = _as_design(X, self.n_vars)
        r = np.ascontiguousarray(r, dtype=np.float64)
        if r.shape[0] != X.shape[0]:
            raise ValueError("X and r have different numbers of rows")
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("non-finite residuals passed to backfit_sweep")
        self._attach(X)
        K.seed(int(rng.integers(2**31 - 1)))
        hp = self.hyper
        self.sigma2 = K.sweep(
            self.var, self.cut, self.rmask, self.left, self.right, self.parent,
            self.depth, self.mu, self.used, self.leaf_of, X, self.is_cat, r, self.fit,
            self.sigma2, self.sigma_mu**2, hp.base, hp.power, hp.node_min, hp.max_cuts,
            np.asarray(hp.move_probs), hp.max_depth, hp.nu, self.lam, update_sigma,
            self.n_proposed, self.n_accepted)
        return self

    # -------------------------------------------------------------- prediction
    def predict(self, X):
        X = _as_design(X, self.n_vars)
        return K.predict(self.var, self.cut, self.rmask, self.left, self.right,
                         self.mu, self.used, X, self.is_cat)

    def split_counts(self):
        return K.split_counts(self.var, self.used, self.n_vars)

    def vip(self):
        return compute_vip(self)

    def tree_depths(self):
        return np.array([self.depth[h][self.used[h]].max() for h in range(self.m)])

    # ----------------------------------------------------------- tree views
    def tree(self, h):
        nodes = []
        stack = [0]
        while stack:
            j = stack.pop()
            v = int(self.var[h, j])
            if v < 0:
                nodes.append({"mu": float(self.mu[h, j])})
                continue
            if self.is_cat[v]:
                nodes.append({"var": v, "right": _codes_from_mask(self.rmask[h, j])})
            else:
                nodes.append({"var": v, "cut": float(self.cut[h, j])})
            stack.extend([int(self.right[h, j]), int(self.left[h, j])])
        return DecisionTree(nodes)

    def set_tree(self, h, tree):
        cap = self.hyper.capacity
        if len(tree.nodes) > cap:
            raise ValueError("tree exceeds node capacity")
        for arr, fill in ((self.var, -1), (self.left, -1), (self.right, -1),
                          (self.parent, -1), (self.depth, 0), (self.cut, 0.0),
                          (self.rmask, 0), (self.mu, 0.0), (self.used, False)):
            arr[h] = fill
        pos = iter(range(len(tree.nodes)))

        def build(parent, depth):
            idx = next(pos)
            nd = tree.nodes[idx]
            j = idx
            self.used[h, j] = True
            self.parent[h, j] = parent
            self.depth[h, j] = depth
            if "mu" in nd:
                self.mu[h, j] = nd["mu"]
                return j
            self.var[h, j] = nd["var"]
            if "right" in nd:
                self.rmask[h, j] = _mask_from_codes(nd["right"])
            else:
                self.cut[h, j] = nd["cut"]
            self.left[h, j] = build(j, depth + 1)
            self.right[h, j] = build(j, depth + 1)
            return j

        build(-1, 0)
        self.leaf_of = None
        self.fit = None

    @classmethod
    def from_trees(cls, trees, n_vars, is_cat=None, hyper=None, sigma2=1.0):
        hyper = hyper or ForestHyper(m=len(trees))
        if hyper.m != len(trees):
            hyper = ForestHyper(**{**asdict(hyper), "m": len(trees)})
        f = cls(hyper, n_vars, is_cat, sigma2=sigma2)
        for h, t in enumerate(trees):
            f.set_tree(h, t)
        return f

    # --------------------------------------------------------- serialization
    def to_records(self):
        head = {"type": "forest", "hyper": asdict(self.hyper), "n_vars": self.n_vars,
                "is_cat": self.is_cat.astype(int).tolist(), "sigma2": self.sigma2,
                "sigma_mu": self.sigma_mu, "lam": self.lam}
        head["hyper"]["move_probs"] = list(self.hyper.move_probs)
        return [head] + [{"type": "tree", "h": h, "nodes": self.tree(h).nodes}
                         for h in range(self.m)]

    def dumps(self):
        return "\n".join(json.dumps(rec) for rec in self.to_records()) + "\n"

    @classmethod
    def from_records(cls, records):
        head, *trees = records
        hp = dict(head["hyper"])
        hp["move_probs"] = tuple(hp["move_probs"])
        f = cls(ForestHyper(**hp), head["n_vars"], np.array(head["is_cat"], dtype=bool),
                sigma2=head["sigma2"], sigma_mu=head["sigma_mu"], lam=head["lam"])
        for rec in trees:
            f.set_tree(rec["h"], DecisionTree(rec["nodes"]))
        return f

    @classmethod
    def loads(cls, text):
        return cls.from_records([json.loads(line) for line in text.splitlines() if line.strip()])


def _as_design(X, n_vars):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != n_vars:
        raise ValueError(f"expected {n_vars} predictor columns, got {X.shape[1]}")
    if np.isnan(X).any():
        raise ValueError("missing covariate values must be imputed before BART")
    return X


def init_forest(m, response, is_cat=None, n_vars=None, hyper=None, sigma_hat=None, **overrides):
    """Forest of ``m`` single-leaf trees (mu = 0) calibrated to ``response``.

    sigma^2 starts at the response variance, the leaf scale is
    ``range / (2 k sqrt(m))`` and the sigma^2 prior scale is calibrated so that
    ``P(sigma < sigma_hat) = q`` (``sigma_hat`` defaults to the response sd).
    """
    response = np.asarray(response, dtype=float)
    if response.size == 0:
        raise ValueError("empty response")
    base = asdict(hyper) if hyper is not None else {}
    base.update(overrides)
    base["m"] = m
    hp = ForestHyper(**base)
    if n_vars is None:
        n_vars = 1 if is_cat is None else len(is_cat)
    tiny = np.finfo(float).tiny
    var = float(np.var(response))
    sigma2 = max(var, tiny)
    sigma_mu = max((response.max() - response.min()) / (2.0 * hp.k * np.sqrt(m)), np.sqrt(tiny))
    sh = np.sqrt(sigma2) if sigma_hat is None else float(sigma_hat)
    lam = max(calibrate_lambda(sh, hp.nu, hp.q), tiny)
    return Forest(hp, n_vars, is_cat, sigma2=sigma2, sigma_mu=sigma_mu, lam=lam)


def backfit_sweep(f, X, r, rng, update_sigma=True):
    """Propose and accept/reject one move per tree against its partial
    residuals, redraw every leaf value, then redraw sigma^2."""
    return f.sweep(X, r, rng, update_sigma=update_sigma)


def predict_forest(f, X):
    return f.predict(X)


def compute_vip(f):
    """Share of splitting rules that use each predictor (zeros for an all-stump forest)."""
    counts = f.split_counts()
    total = counts.sum()
    return counts / total if total > 0 else counts


def propose_move(f, h, X, r, rng):
    """Draw (without applying) one move for tree ``h`` of a forest."""
    X = _as_design(X, f.n_vars)
    f._attach(X)
    K.seed(int(rng.integers(2**31 - 1)))
    resid = np.ascontiguousarray(r, dtype=float) - f.fit + f.mu[h, f.leaf_of[h]]
    hp = f.hyper
    kind, node, v, c, mask, lr = K.propose(
        h, f.var, f.cut, f.rmask, f.left, f.right, f.parent, f.depth, f.used, f.leaf_of,
        X, f.is_cat, resid, f.sigma2, f.sigma_mu**2, hp.base, hp.power, hp.node_min,
        hp.max_cuts, np.asarray(hp.move_probs), hp.max_depth)
    if kind < 0:
        return TreeMove("null", int(node))
    codes = tuple(_codes_from_mask(mask)) if v >= 0 and f.is_cat[v] else ()
    return TreeMove(MOVE_KINDS[kind], int(node), int(v), float(c), codes, float(lr))


def apply_move(f, h, move, X):
    """Apply a proposed move to tree ``h`` (used by tests and tooling)."""
    if move.kind == "null":
        return f
    X = _as_design(X, f.n_vars)
    f._attach(X)
    K.apply_move(h, MOVE_KINDS.index(move.kind), move.node, move.var, move.cut,
                 np.int64(_mask_from_codes(move.right_codes)), f.var, f.cut, f.rmask,
                 f.left, f.right, f.parent, f.depth, f.mu, f.used, f.leaf_of, X, f.is_cat)
    f.fit = f.predict(X)
    return f
