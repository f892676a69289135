"""Soft decision trees with logistic gating.

A tree is stored as flat pre-order arrays: ``var[i] >= 0`` marks an internal
node splitting on exposure ``var[i]`` at ``cut[i]``; ``var[i] == -1`` marks a
leaf carrying ``value[i]``.  The left child of internal node ``i`` is
``i + 1``.  Observation z reaches the right child of a node with probability
``logistic((z[var] - cut) / bandwidth)``, and a tree's prediction is the
weight-averaged leaf value.

Exposures are assumed to be scaled to [0, 1]; cutpoints live on that scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import gammaln

from .exceptions import NumericalError
from .randkit import as_generator, draw_discrete

__all__ = [
    "SoftTree",
    "SplitProbabilities",
    "LeafPrior",
    "TreePrior",
    "leaf_weights",
    "predict",
    "predict_ensemble",
    "integrated_log_likelihood",
    "draw_leaves",
    "propose_structure",
    "update_split_probabilities",
    "update_bandwidth",
    "log_tree_prior",
    "sample_tree_from_prior",
    "split_probability",
]

LEAF = -1


@numba.njit(cache=True, inline="always")
def _logistic(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _leaf_weight_matrix(Z, var, cut, right, n_leaves, bandwidth):
    n = Z.shape[0]
    m = var.shape[0]
    phi = np.empty((n, n_leaves))
    prob = np.empty(m)
    for i in range(n):
        prob[0] = 1.0
        leaf = 0
        for node in range(m):
            p = prob[node]
            v = var[node]
            if v < 0:
                phi[i, leaf] = p
                leaf += 1
            else:
                x = (Z[i, v] - cut[node]) / bandwidth
                prob[node + 1] = p * _logistic(-x)
                prob[right[node]] = p * _logistic(x)
    return phi


@numba.njit(cache=True)
def _predict_tree(Z, var, cut, right, value, bandwidth, out):
    n = Z.shape[0]
    m = var.shape[0]
    prob = np.empty(m)
    for i in range(n):
        prob[0] = 1.0
        acc = 0.0
        for node in range(m):
            p = prob[node]
            v = var[node]
            if v < 0:
                acc += p * value[node]
            else:
                x = (Z[i, v] - cut[node]) / bandwidth
                prob[node + 1] = p * _logistic(-x)
                prob[right[node]] = p * _logistic(x)
        out[i] += acc


def _structure(var):
    """Right-child, parent and depth arrays for a pre-order var array."""
    n = len(var)
    right = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    depth = np.zeros(n, dtype=np.int64)
    pending = []
    for i in range(n):
        if i > 0:
            if var[i - 1] >= 0:
                parent[i] = i - 1
            else:
                p = pending.pop()
                right[p] = i
                parent[i] = p
            depth[i] = depth[parent[i]] + 1
        if var[i] >= 0:
            pending.append(i)
    if pending:
        raise ValueError("malformed pre-order tree: internal node without right child")
    return right, parent, depth


@dataclass(eq=False)
class SoftTree:
    var: np.ndarray
    cut: np.ndarray
    value: np.ndarray
    bandwidth: float = 0.1
    _right: np.ndarray = field(default=None, repr=False)
    _parent: np.ndarray = field(default=None, repr=False)
    _depth: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.var = np.asarray(self.var, dtype=np.int64)
        self.cut = np.asarray(self.cut, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        if not (len(self.var) == len(self.cut) == len(self.value)):
            raise ValueError("var, cut and value must have equal length")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self._right, self._parent, self._depth = _structure(self.var)

    @classmethod
    def stump(cls, value: float = 0.0, bandwidth: float = 0.1) -> "SoftTree":
        return cls(np.array([LEAF]), np.array([0.0]), np.array([value]), bandwidth)

    def copy(self) -> "SoftTree":
        new = object.__new__(SoftTree)
        new.var, new.cut, new.value = self.var.copy(), self.cut.copy(), self.value.copy()
        new.bandwidth = self.bandwidth
        new._right, new._parent, new._depth = self._right, self._parent, self._depth
        return new

    @property
    def right(self):
        return self._right

    @property
    def depth(self):
        return self._depth

    @property
    def n_nodes(self) -> int:
        return len(self.var)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.var < 0)

    @property
    def internal(self) -> np.ndarray:
        return np.flatnonzero(self.var >= 0)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.var < 0))

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self.var < 0]

    @leaf_values.setter
    def leaf_values(self, mu):
        self.value[self.var < 0] = mu

    def nog_nodes(self) -> np.ndarray:
        """Internal nodes whose two children are both leaves."""
        idx = self.internal
        if idx.size == 0:
            return idx
        return idx[(self.var[idx + 1] < 0) & (self.var[self._right[idx]] < 0)]

    def grow(self, node: int, split_var: int, cutpoint: float) -> "SoftTree":
        if self.var[node] >= 0:
            raise ValueError("can only grow at a leaf")
        var = np.concatenate([self.var[:node], [split_var, LEAF, LEAF], self.var[node + 1:]])
        cut = np.concatenate([self.cut[:node], [cutpoint, 0.0, 0.0], self.cut[node + 1:]])
        val = np.concatenate([self.value[:node], [0.0, self.value[node], self.value[node]],
                              self.value[node + 1:]])
        return SoftTree(var, cut, val, self.bandwidth)

    def prune(self, node: int) -> "SoftTree":
        if not (self.var[node] >= 0 and self.var[node + 1] < 0 and self.var[node + 2] < 0):
            raise ValueError("can only prune a node whose children are leaves")
        mu = 0.5 * (self.value[node + 1] + self.value[node + 2])
        var = np.concatenate([self.var[:node], [LEAF], self.var[node + 3:]])
        cut = np.concatenate([self.cut[:node], [0.0], self.cut[node + 3:]])
        val = np.concatenate([self.value[:node], [mu], self.value[node + 3:]])
        return SoftTree(var, cut, val, self.bandwidth)

    def change(self, node: int, split_var: int, cutpoint: float) -> "SoftTree":
        if self.var[node] < 0:
            raise ValueError("can only change an internal node")
        new = self.copy()
        new.var[node] = split_var
        new.cut[node] = cutpoint
        return new

    def shape_key(self) -> tuple:
        """Hashable shape signature (split/leaf pattern only)."""
        return tuple(int(v >= 0) for v in self.var)

    def to_records(self) -> list:
        """Pre-order ``[node_type, split_var, cutpoint, leaf_value]`` rows; node_type 1 = internal."""
        out = []
        for v, c, mu in zip(self.var, self.cut, self.value):
            if v >= 0:
                out.append([1, int(v), float(c), 0.0])
            else:
                out.append([0, -1, 0.0, float(mu)])
        return out

    @classmethod
    def from_records(cls, records, bandwidth: float) -> "SoftTree":
        var = [int(r[1]) if int(r[0]) == 1 else LEAF for r in records]
        cut = [float(r[2]) for r in records]
        val = [float(r[3]) for r in records]
        return cls(np.array(var), np.array(cut), np.array(val), float(bandwidth))


@dataclass
class SplitProbabilities:
    """Splitting weights over exposures with a Dirichlet(a/q, ..., a/q) prior."""

    weights: np.ndarray
    concentration: float = 1.0
    sparse: bool = True

    @classmethod
    def uniform(cls, n_features: int, concentration: float = 1.0, sparse: bool = True):
        return cls(np.full(n_features, 1.0 / n_features), concentration, sparse)

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def log_weight(self, k: int) -> float:
        return math.log(max(self.weights[k], 1e-300))


@dataclass
class LeafPrior:
    sigma_mu: float

    def __post_init__(self):
        if not self.sigma_mu > 0:
            raise ValueError("sigma_mu must be positive")

    @classmethod
    def default(cls, n_trees: int, k: float = 2.0):
        return cls(1.5 / (k * math.sqrt(n_trees)))


@dataclass
class TreePrior:
    """Branching-process and move settings shared by every tree.

    ``split_base`` and ``split_power`` give the probability
    ``split_base * (1 + depth) ** -split_power`` that a node at ``depth`` splits.
    """

    split_base: float = 0.95
    split_power: float = 2.0
    p_grow: float = 0.3
    p_prune: float = 0.3
    p_change: float = 0.4
    bandwidth_rate: float = 10.0
    bandwidth_step: float = 0.5

    def __post_init__(self):
        total = self.p_grow + self.p_prune + self.p_change
        if not math.isclose(total, 1.0, abs_tol=1e-12):
            raise ValueError("move probabilities must sum to 1")
        if not (0 <= self.split_base <= 1) or self.split_power < 0:
            raise ValueError("invalid branching-process parameters")


def split_probability(depth, prior: TreePrior):
    return prior.split_base * (1.0 + np.asarray(depth)) ** (-prior.split_power)


def _log(x):
    return math.log(x) if x > 0 else -math.inf


def _log1m(x):
    return math.log1p(-x) if x < 1 else -math.inf


def leaf_weights(tree: SoftTree, Z) -> np.ndarray:
    """Leaf-membership weight matrix (n x n_leaves); each row sums to one."""
    Z = np.ascontiguousarray(np.atleast_2d(np.asarray(Z, dtype=float)))
    return _leaf_weight_matrix(Z, tree.var, tree.cut, tree.right, tree.n_leaves, tree.bandwidth)


def predict(tree: SoftTree, Z) -> np.ndarray:
    Z = np.ascontiguousarray(np.atleast_2d(np.asarray(Z, dtype=float)))
    out = np.zeros(Z.shape[0])
    _predict_tree(Z, tree.var, tree.cut, tree.right, tree.value, tree.bandwidth, out)
    return out


def predict_ensemble(trees, Z) -> np.ndarray:
    Z = np.ascontiguousarray(np.atleast_2d(np.asarray(Z, dtype=float)))
    out = np.zeros(Z.shape[0])
    for tree in trees:
        _predict_tree(Z, tree.var, tree.cut, tree.right, tree.value, tree.bandwidth, out)
    return out


# ---------------------------------------------------------------------------
# Leaf marginal likelihood and conditional
# ---------------------------------------------------------------------------


def _leaf_stats(phi, omega, weighted_resid):
    pw = phi * omega[:, None]
    return pw.T @ phi, phi.T @ weighted_resid


def _collapsed(gram, rhs, sigma2):
    """Structure-dependent part of the log marginal, plus the Cholesky factor."""
    n_leaves = gram.shape[0]
    prec = gram + np.eye(n_leaves) / sigma2
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"leaf posterior precision is not positive definite: {exc}") from exc
    half = np.linalg.solve(chol, rhs)
    ll = -np.sum(np.log(np.diag(chol))) - 0.5 * n_leaves * math.log(sigma2) + 0.5 * half @ half
    return ll, chol, half


def integrated_log_likelihood(phi, y_star, omega, leaf_prior: LeafPrior, weighted_response=None,
                              include_constants: bool = True) -> float:
    """Log marginal density of y* ~ N(phi mu, Omega^-1) with mu ~ N(0, sigma_mu^2 I).

    ``weighted_response`` (omega * y*) can be passed instead of relying on
    the product, which is better conditioned when omega is tiny.  Dropping the
    constants leaves only terms that differ between tree structures.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    omega = np.asarray(omega, dtype=float)
    if weighted_response is None:
        weighted_response = omega * np.asarray(y_star, dtype=float)
    gram, rhs = _leaf_stats(phi, omega, weighted_response)
    ll, _, _ = _collapsed(gram, rhs, leaf_prior.sigma_mu ** 2)
    if include_constants:
        y_star = np.asarray(y_star, dtype=float)
        n = omega.shape[0]
        ll += -0.5 * n * math.log(2 * math.pi) + 0.5 * np.sum(np.log(omega)) - 0.5 * np.sum(omega * y_star ** 2)
    return float(ll)


def _draw_from_chol(chol, half, rng):
    gen = as_generator(rng)
    z = gen.standard_normal(chol.shape[0])
    return np.linalg.solve(chol.T, half + z)


def draw_leaves(phi, y_star, omega, leaf_prior: LeafPrior, rng, weighted_response=None):
    """Leaf values from N(A^-1 phi' Omega y*, A^-1), A = phi' Omega phi + I / sigma_mu^2."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    omega = np.asarray(omega, dtype=float)
    if weighted_response is None:
        weighted_response = omega * np.asarray(y_star, dtype=float)
    gram, rhs = _leaf_stats(phi, omega, weighted_response)
    _, chol, half = _collapsed(gram, rhs, leaf_prior.sigma_mu ** 2)
    return _draw_from_chol(chol, half, rng)


# ---------------------------------------------------------------------------
# Tree prior and structure moves
# ---------------------------------------------------------------------------


def log_tree_prior(tree: SoftTree, prior: TreePrior, split_probs: SplitProbabilities | None = None,
                   cut_ranges=None) -> float:
    """Log prior density of a tree: branching-process shape times split rules.

    With ``split_probs=None`` only the shape probability is returned.
    """
    depth = tree.depth
    total = 0.0
    for i in range(tree.n_nodes):
        ps = float(split_probability(depth[i], prior))
        if tree.var[i] >= 0:
            total += _log(ps)
            if split_probs is not None:
                width = 1.0 if cut_ranges is None else cut_ranges[tree.var[i], 1] - cut_ranges[tree.var[i], 0]
                total += split_probs.log_weight(tree.var[i]) - math.log(width)
        else:
            total += _log1m(ps)
    return total


def _move_probs(tree: SoftTree, prior: TreePrior):
    if tree.n_nodes == 1:
        return 1.0, 0.0, 0.0
    return prior.p_grow, prior.p_prune, prior.p_change


def _draw_rule(split_probs, cut_ranges, gen):
    v = draw_discrete(np.log(np.maximum(split_probs.weights, 1e-300)), gen)
    lo, hi = (0.0, 1.0) if cut_ranges is None else cut_ranges[v]
    return v, lo + (hi - lo) * gen.random(), math.log(hi - lo)


def propose_structure(tree: SoftTree, split_probs: SplitProbabilities, prior: TreePrior, rng,
                      cut_ranges=None):
    """Propose a GROW, PRUNE or CHANGE move.

    Returns ``(candidate, log_proposal_ratio, log_prior_ratio, move)`` where
    the ratios are reverse-over-forward proposal density and
    candidate-over-current prior density.  PRUNE and CHANGE on a stump fall
    back to GROW.
    """
    gen = as_generator(rng)
    pg, pp, pc = _move_probs(tree, prior)
    u = gen.random()
    if u < pg:
        move = "grow"
    elif u < pg + pp:
        move = "prune"
    else:
        move = "change"

    if move == "grow":
        leaves = tree.leaves
        node = int(leaves[int(gen.random() * len(leaves))])
        v, c, log_width = _draw_rule(split_probs, cut_ranges, gen)
        cand = tree.grow(node, v, c)
        d = tree.depth[node]
        ps_d = float(split_probability(d, prior))
        ps_child = float(split_probability(d + 1, prior))
        log_rule = split_probs.log_weight(v) - log_width
        log_prior = _log(ps_d) + 2.0 * _log1m(ps_child) - _log1m(ps_d) + log_rule
        _, pp_new, _ = _move_probs(cand, prior)
        log_prop = (math.log(pp_new) - math.log(len(cand.nog_nodes()))
                    - (math.log(pg) - math.log(len(leaves)) + log_rule))
        return cand, log_prop, log_prior, move

    if move == "prune":
        nogs = tree.nog_nodes()
        node = int(nogs[int(gen.random() * len(nogs))])
        cand = tree.prune(node)
        d = tree.depth[node]
        v = int(tree.var[node])
        log_width = 0.0 if cut_ranges is None else math.log(cut_ranges[v, 1] - cut_ranges[v, 0])
        ps_d = float(split_probability(d, prior))
        ps_child = float(split_probability(d + 1, prior))
        log_rule = split_probs.log_weight(v) - log_width
        log_prior = -(_log(ps_d) + 2.0 * _log1m(ps_child) - _log1m(ps_d) + log_rule)
        pg_new, _, _ = _move_probs(cand, prior)
        log_prop = (math.log(pg_new) - math.log(cand.n_leaves) + log_rule
                    - (math.log(pp) - math.log(len(nogs))))
        return cand, log_prop, log_prior, move

    internal = tree.internal
    node = int(internal[int(gen.random() * len(internal))])
    v_old = int(tree.var[node])
    v, c, log_width = _draw_rule(split_probs, cut_ranges, gen)
    cand = tree.change(node, v, c)
    old_width = 0.0 if cut_ranges is None else math.log(cut_ranges[v_old, 1] - cut_ranges[v_old, 0])
    log_prior = (split_probs.log_weight(v) - log_width) - (split_probs.log_weight(v_old) - old_width)
    return cand, -log_prior, log_prior, move


def sample_tree_from_prior(prior: TreePrior, split_probs: SplitProbabilities, rng,
                           leaf_prior: LeafPrior | None = None, bandwidth: float = 0.1,
                           max_depth: int = 50) -> SoftTree:
    """Forward draw from the branching-process prior (pre-order recursion)."""
    gen = as_generator(rng)
    var, cut, val = [], [], []

    def visit(d):
        if d < max_depth and gen.random() < float(split_probability(d, prior)):
            v, c, _ = _draw_rule(split_probs, None, gen)
            var.append(v)
            cut.append(c)
            val.append(0.0)
            visit(d + 1)
            visit(d + 1)
        else:
            var.append(LEAF)
            cut.append(0.0)
            val.append(0.0 if leaf_prior is None else leaf_prior.sigma_mu * gen.standard_normal())

    visit(0)
    return SoftTree(np.array(var), np.array(cut), np.array(val), bandwidth)


# ---------------------------------------------------------------------------
# Splitting weights and bandwidth
# ---------------------------------------------------------------------------


def split_counts(trees, n_features: int) -> np.ndarray:
    counts = np.zeros(n_features, dtype=np.int64)
    for tree in trees:
        v = tree.var[tree.var >= 0]
        counts += np.bincount(v, minlength=n_features)
    return counts


def _log_dirichlet(alpha, gen):
    # log-space gamma draws: shapes a/q are often far below 1
    log_g = np.log(gen.gamma(alpha + 1.0)) + np.log(gen.random(alpha.shape[0])) / alpha
    return log_g - np.logaddexp.reduce(log_g)


_CONC_GRID = (np.arange(1, 1001) - 0.5) / 1000.0


def _update_concentration(log_s, q, gen):
    # a / (a + q) ~ Beta(0.5, 1) on a fine grid
    a = q * _CONC_GRID / (1.0 - _CONC_GRID)
    lw = (gammaln(a) - q * gammaln(a / q) + (a / q) * np.sum(log_s)
          - 0.5 * np.log(_CONC_GRID))
    return float(a[draw_discrete(lw, gen)])


def update_split_probabilities(trees, split_probs: SplitProbabilities, rng,
                               update_concentration: bool = False) -> SplitProbabilities:
    """Conjugate Dirichlet update of splitting weights from per-node split counts.

    Returns ``split_probs`` unchanged when sparsity is disabled.
    """
    if not split_probs.sparse:
        return split_probs
    gen = as_generator(rng)
    q = split_probs.n_features
    counts = split_counts(trees, q)
    log_s = _log_dirichlet(split_probs.concentration / q + counts, gen)
    conc = split_probs.concentration
    if update_concentration:
        conc = _update_concentration(log_s, q, gen)
    return SplitProbabilities(np.exp(log_s), conc, True)


def update_bandwidth(tree: SoftTree, Z, omega, weighted_resid, leaf_prior: LeafPrior, prior: TreePrior,
                     rng, current_ll=None):
    """Random-walk MH on log(bandwidth) with the leaves integrated out.

    The bandwidth prior is exponential with rate ``prior.bandwidth_rate``.
    Returns ``(tree, phi, log_lik, accepted)``; ``tree`` is a new object only
    when the move is accepted.
    """
    gen = as_generator(rng)
    sigma2 = leaf_prior.sigma_mu ** 2
    if current_ll is None:
        phi = leaf_weights(tree, Z)
        current_ll = _collapsed(*_leaf_stats(phi, omega, weighted_resid), sigma2)[0]
    step = prior.bandwidth_step * (2.0 * gen.random() - 1.0)
    new_bw = tree.bandwidth * math.exp(step)
    cand = tree.copy()
    cand.bandwidth = new_bw
    phi_new = leaf_weights(cand, Z)
    ll_new = _collapsed(*_leaf_stats(phi_new, omega, weighted_resid), sigma2)[0]
    log_alpha = ll_new - current_ll - prior.bandwidth_rate * (new_bw - tree.bandwidth) + step
    if math.log(gen.random()) < log_alpha:
        return cand, phi_new, ll_new, True
    return tree, None, current_ll, False
