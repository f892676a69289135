"""scikit-learn style front end for the count model."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .ensemble import BartConfig
from .nbgibbs import PanelDataset, PriorConfig, log_likelihood_matrix, run_chain
from .randkit import nb_log_density
from .spatial import CarStructure
from .validation import check_counts, check_design, check_regions

__all__ = ["NegBinSoftBART"]


class NegBinSoftBART(RegressorMixin, BaseEstimator):
    """Negative-binomial regression with a soft-BART exposure surface and CAR intercepts.

    ``fit(Z, y, X=..., population=..., regions=..., car=...)`` runs one chain.
    ``Z`` holds the exposures modelled by the trees, ``X`` the linear
    confounders, ``regions`` integer indices into ``car``.

    After fitting, ``posterior_`` is the :class:`PosteriorStore`, and
    ``predict`` returns posterior-mean expected counts ``xi * exp(eta)``.
    """

    def __init__(self, n_trees=25, soft=True, sparse=True, n_burn=2000, n_save=500, thin=2, seed=0,
                 beta_cov=100.0, tau_shape=1.0, tau_rate=1.0, xi_shape=1.0, xi_rate=0.1,
                 surface_offset="auto", pg_terms=200, fix_rho=None):
        self.n_trees = n_trees
        self.soft = soft
        self.sparse = sparse
        self.n_burn = n_burn
        self.n_save = n_save
        self.thin = thin
        self.seed = seed
        self.beta_cov = beta_cov
        self.tau_shape = tau_shape
        self.tau_rate = tau_rate
        self.xi_shape = xi_shape
        self.xi_rate = xi_rate
        self.surface_offset = surface_offset
        self.pg_terms = pg_terms
        self.fix_rho = fix_rho

    def prior_config(self) -> PriorConfig:
        return PriorConfig(
            beta_cov=self.beta_cov, tau_shape=self.tau_shape, tau_rate=self.tau_rate,
            xi_shape=self.xi_shape, xi_rate=self.xi_rate,
            bart=BartConfig(n_trees=self.n_trees, soft=self.soft, sparse=self.sparse),
            n_burn=self.n_burn, n_save=self.n_save, thin=self.thin, seed=self.seed,
            pg_terms=self.pg_terms, surface_offset=self.surface_offset, fix_rho=self.fix_rho)

    def _dataset(self, Z, y, X, population, regions, region_ids, z_min=None, z_max=None):
        Z = check_design(Z, "Z")
        n = Z.shape[0]
        X = np.zeros((n, 0)) if X is None else check_design(X, "X", n_rows=n)
        y = np.zeros(n, dtype=np.int64) if y is None else check_counts(y, n)
        pop = np.ones(n) if population is None else np.asarray(population, dtype=float)
        regions = check_regions(regions, n, len(region_ids))
        return PanelDataset(y, pop, X, Z, regions, region_ids, z_min=z_min, z_max=z_max)

    def fit(self, Z, y, *, X=None, population=None, regions=None, car: CarStructure | None = None):
        if car is None:
            raise ValueError("a CarStructure is required (car=...)")
        data = self._dataset(Z, y, X, population, regions, car.region_ids)
        self.car_ = car
        self.posterior_ = run_chain(data, car, self.prior_config())
        self.n_features_in_ = data.Z.shape[1]
        self.data_ = data
        return self

    def predict_surface(self, Z, draws: bool = False):
        """Posterior mean of f(Z) (or all draws when ``draws=True``)."""
        check_is_fitted(self, "posterior_")
        Z = check_design(Z, "Z", n_cols=self.n_features_in_)
        f = self.posterior_.surface_draws(Z)
        return f if draws else f.mean(axis=0)

    def surface_draws(self, Z):
        return self.predict_surface(Z, draws=True)

    def predict(self, Z, *, X=None, population=None, regions=None):
        """Posterior mean expected count for new rows."""
        check_is_fitted(self, "posterior_")
        post = self.posterior_
        data = self._dataset(Z, None, X, population, regions, self.car_.region_ids,
                             self.data_.z_min, self.data_.z_max)
        if data.X.shape[1] != post["beta"].shape[1]:
            raise ValueError(f"X has {data.X.shape[1]} columns, model was fitted with {post['beta'].shape[1]}")
        eta = post.eta(data, recompute=True)
        return np.mean(post["xi"][:, None] * np.exp(eta), axis=0)

    def log_likelihood(self):
        check_is_fitted(self, "posterior_")
        return log_likelihood_matrix(self.posterior_, self.data_)

    def score(self, Z, y, sample_weight=None, **kw):
        """Mean posterior log predictive density of ``y`` (higher is better)."""
        check_is_fitted(self, "posterior_")
        data = self._dataset(Z, y, kw.get("X"), kw.get("population"), kw.get("regions"),
                             self.car_.region_ids, self.data_.z_min, self.data_.z_max)
        ll = nb_log_density(data.y[None, :], self.posterior_["xi"][:, None], self.posterior_.eta(data, True))
        lpd = logsumexp(ll, axis=0) - np.log(ll.shape[0])
        return float(np.average(lpd, weights=sample_weight))
