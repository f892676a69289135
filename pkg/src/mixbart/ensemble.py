"""Bayesian backfitting of a soft tree ensemble against a weighted Gaussian working response."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .randkit import as_generator
from .softtree import (
    LeafPrior,
    SoftTree,
    SplitProbabilities,
    TreePrior,
    _collapsed,
    _draw_from_chol,
    _leaf_stats,
    leaf_weights,
    propose_structure,
    update_bandwidth,
    update_split_probabilities,
)

__all__ = ["BartConfig", "Ensemble", "HARD_BANDWIDTH"]

HARD_BANDWIDTH = 1e-6


@dataclass
class BartConfig:
    """Ensemble settings.

    ``soft=False`` reproduces hard decision rules by pinning every bandwidth
    to ``HARD_BANDWIDTH``; the same evaluator is used either way.
    ``leaf_scale=None`` means ``1.5 / (leaf_k * sqrt(n_trees))``.
    """

    n_trees: int = 25
    soft: bool = True
    sparse: bool = True
    split_base: float = 0.95
    split_power: float = 2.0
    leaf_k: float = 2.0
    leaf_scale: float | None = None
    p_grow: float = 0.3
    p_prune: float = 0.3
    p_change: float = 0.4
    bandwidth_init: float = 0.1
    bandwidth_rate: float = 10.0
    bandwidth_step: float = 0.5
    update_bandwidth: bool = True
    concentration: float = 1.0
    update_concentration: bool = False

    def __post_init__(self):
        if int(self.n_trees) < 1:
            raise ValueError("n_trees must be at least 1")
        self.n_trees = int(self.n_trees)

    @property
    def sigma_mu(self) -> float:
        if self.leaf_scale is not None:
            return float(self.leaf_scale)
        return 1.5 / (self.leaf_k * math.sqrt(self.n_trees))

    def tree_prior(self) -> TreePrior:
        return TreePrior(self.split_base, self.split_power, self.p_grow, self.p_prune,
                         self.p_change, self.bandwidth_rate, self.bandwidth_step)

    def leaf_prior(self) -> LeafPrior:
        return LeafPrior(self.sigma_mu)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Counters:
    proposed: dict = field(default_factory=lambda: {"grow": 0, "prune": 0, "change": 0})
    accepted: dict = field(default_factory=lambda: {"grow": 0, "prune": 0, "change": 0})
    bandwidth_proposed: int = 0
    bandwidth_accepted: int = 0

    def rates(self) -> dict:
        out = {m: self.accepted[m] / self.proposed[m] if self.proposed[m] else float("nan")
               for m in self.proposed}
        out["bandwidth"] = (self.bandwidth_accepted / self.bandwidth_proposed
                            if self.bandwidth_proposed else float("nan"))
        return out


class Ensemble:
    """Sum-of-trees surface over a fixed design ``Z`` (scaled to [0, 1]).

    Keeps per-tree fitted values and leaf-weight matrices so each sweep only
    recomputes what a move touches.
    """

    def __init__(self, Z, config: BartConfig, rng=None, trees=None, split_probs=None):
        self.Z = np.ascontiguousarray(np.asarray(Z, dtype=float))
        self.config = config
        self.tree_prior = config.tree_prior()
        self.leaf_prior = config.leaf_prior()
        n, q = self.Z.shape
        bw = config.bandwidth_init if config.soft else HARD_BANDWIDTH
        self.trees = trees if trees is not None else [SoftTree.stump(0.0, bw) for _ in range(config.n_trees)]
        self.split_probs = split_probs or SplitProbabilities.uniform(q, config.concentration, config.sparse)
        self.counters = _Counters()
        self.refresh()

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def refresh(self):
        """Rebuild leaf weights and fitted values from the trees."""
        self.phi = [leaf_weights(t, self.Z) for t in self.trees]
        self.fits = np.stack([p @ t.leaf_values for p, t in zip(self.phi, self.trees)])
        self.total = self.fits.sum(axis=0)

    def sweep(self, omega, weighted_base, rng, order=None):
        """One backfitting pass over the trees.

        Parameters
        ----------
        omega : (n,) ndarray
            Polya-gamma weights.
        weighted_base : (n,) ndarray
            omega * (y* - everything except the tree surface), i.e.
            kappa - omega * (offset + linear part + random effects).
        order : sequence of int, optional
            Tree visiting order; 1..T by default.
        """
        gen = as_generator(rng)
        sigma2 = self.leaf_prior.sigma_mu ** 2
        soft = self.config.soft and self.config.update_bandwidth
        for t in (range(self.n_trees) if order is None else order):
            tree = self.trees[t]
            wr = weighted_base - omega * (self.total - self.fits[t])
            phi = self.phi[t]
            ll, chol, half = _collapsed(*_leaf_stats(phi, omega, wr), sigma2)

            cand, log_prop, log_prior, move = propose_structure(tree, self.split_probs, self.tree_prior, gen)
            self.counters.proposed[move] += 1
            if math.isfinite(log_prior):
                phi_c = leaf_weights(cand, self.Z)
                ll_c, chol_c, half_c = _collapsed(*_leaf_stats(phi_c, omega, wr), sigma2)
                if math.log(gen.random()) < ll_c - ll + log_prior + log_prop:
                    tree, phi, ll, chol, half = cand, phi_c, ll_c, chol_c, half_c
                    self.counters.accepted[move] += 1

            if soft:
                self.counters.bandwidth_proposed += 1
                new_tree, phi_b, ll_b, ok = update_bandwidth(
                    tree, self.Z, omega, wr, self.leaf_prior, self.tree_prior, gen, current_ll=ll)
                if ok:
                    self.counters.bandwidth_accepted += 1
                    tree, phi = new_tree, phi_b
                    _, chol, half = _collapsed(*_leaf_stats(phi, omega, wr), sigma2)

            mu = _draw_from_chol(chol, half, gen)
            tree.leaf_values = mu
            fit = phi @ mu
            self.total += fit - self.fits[t]
            self.fits[t] = fit
            self.trees[t] = tree
            self.phi[t] = phi

        self.total = self.fits.sum(axis=0)
        self.split_probs = update_split_probabilities(
            self.trees, self.split_probs, gen, self.config.update_concentration)
        return self

    def shift(self, delta: float):
        """Move the surface by ``delta`` by adding ``delta / T`` to every leaf of every tree."""
        step = delta / self.n_trees
        for tree in self.trees:
            tree.leaf_values = tree.leaf_values + step
        self.fits += step
        self.total = self.fits.sum(axis=0)

    def predict(self, Z) -> np.ndarray:
        from .softtree import predict_ensemble

        return predict_ensemble(self.trees, Z)
