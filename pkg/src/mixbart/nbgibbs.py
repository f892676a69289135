"""Negative-binomial soft-BART model with CAR random intercepts: the Gibbs driver.

Per iteration the blocks run in this order, with the linear predictor
recomputed after each one:

    Polya-gamma weights -> beta -> nu -> tau2 -> rho -> trees -> CRT / xi

All conjugate updates are written in terms of ``omega`` and
``omega * residual = kappa - omega * (rest of eta)`` with
``kappa = (y - xi) / 2``; the latent response ``y* = kappa / omega`` itself is
only formed for reporting.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .ensemble import BartConfig, Ensemble
from .exceptions import ConfigError, DataError, NumericalError
from .randkit import (
    PG_SERIES_TERMS,
    RngStream,
    as_generator,
    draw_crt,
    draw_mvn_canonical,
    draw_polya_gamma,
    nb_log_density,
    softplus,
)
from .softtree import SoftTree, _logistic
from .spatial import CarStructure, SpatialState, update_nu, update_rho, update_tau2

logger = logging.getLogger(__name__)

__all__ = [
    "PanelDataset",
    "PriorConfig",
    "ChainState",
    "PosteriorStore",
    "pg_augment",
    "update_beta",
    "update_xi",
    "update_level",
    "run_chain",
    "log_likelihood_matrix",
    "read_panel_csv",
    "OMEGA_FLOOR",
    "BLOCK_ORDER",
]

OMEGA_FLOOR = 1e-300
BLOCK_ORDER = ("pg", "beta", "nu", "tau2", "rho", "trees", "xi")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PanelDataset:
    """Region-by-day counts with offsets, confounders and exposures.

    ``region`` holds integer region indices into ``region_ids``, which must
    follow the order of the :class:`CarStructure` the data is fitted with.
    Exposure min/max are recorded at construction and define the [0, 1]
    scaling used by the trees.
    """

    y: np.ndarray
    population: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    region: np.ndarray
    region_ids: tuple
    date: np.ndarray | None = None
    confounder_names: tuple = ()
    exposure_names: tuple = ()
    z_min: np.ndarray | None = None
    z_max: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.ndim != 1:
            raise DataError("counts must be one-dimensional")
        n = self.y.shape[0]
        if np.any(~np.isfinite(self.y.astype(float))) or np.any(self.y < 0) or np.any(self.y != np.round(self.y)):
            raise DataError("counts must be nonnegative integers")
        self.y = self.y.astype(np.int64)
        self.population = np.asarray(self.population, dtype=float).reshape(n)
        if np.any(~(self.population > 0)):
            raise DataError("population must be positive")
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1) if np.size(self.X) else np.zeros((n, 0))
        self.Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        if self.Z.shape[1] == 0:
            raise DataError("at least one exposure is required")
        for name, arr in (("confounders", self.X), ("exposures", self.Z)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contain missing or non-finite values")
        self.region = np.asarray(self.region, dtype=np.int64).reshape(n)
        self.region_ids = tuple(self.region_ids)
        if self.region.min(initial=0) < 0 or self.region.max(initial=0) >= len(self.region_ids):
            raise DataError("region index out of range")
        if not self.confounder_names:
            self.confounder_names = tuple(f"x_{k + 1}" for k in range(self.X.shape[1]))
        if not self.exposure_names:
            self.exposure_names = tuple(f"z_{k + 1}" for k in range(self.Z.shape[1]))
        if self.z_min is None:
            self.z_min = self.Z.min(axis=0)
        if self.z_max is None:
            self.z_max = self.Z.max(axis=0)
        self.z_min = np.asarray(self.z_min, dtype=float)
        self.z_max = np.asarray(self.z_max, dtype=float)

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def log_offset(self) -> np.ndarray:
        return np.log(self.population)

    def scale_exposures(self, Z=None) -> np.ndarray:
        Z = self.Z if Z is None else np.atleast_2d(np.asarray(Z, dtype=float))
        return scale_exposures(Z, self.z_min, self.z_max)

    def with_exposures(self, columns) -> "PanelDataset":
        """Copy restricted to a subset of exposure columns (by index or name)."""
        idx = [self.exposure_names.index(c) if isinstance(c, str) else int(c) for c in columns]
        return PanelDataset(self.y, self.population, self.X, self.Z[:, idx], self.region, self.region_ids,
                            self.date, self.confounder_names, tuple(self.exposure_names[i] for i in idx),
                            self.z_min[idx], self.z_max[idx])


def scale_exposures(Z, z_min, z_max):
    span = np.where(z_max > z_min, z_max - z_min, 1.0)
    return np.ascontiguousarray((np.asarray(Z, dtype=float) - z_min) / span)


def read_panel_csv(path, confounders, exposures, region_ids=None, *, region_col="region_id",
                   date_col="date_index", count_col="count", population_col="population") -> PanelDataset:
    """Load a panel CSV.  Column roles are declared by the caller.

    ``region_ids`` fixes the region order (normally the adjacency order);
    rows naming a region outside it raise :class:`DataError`.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [region_col, date_col, count_col, population_col, *confounders, *exposures]
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}; header has {header}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    labels = [r[region_col] for r in rows]
    if region_ids is None:
        region_ids = tuple(dict.fromkeys(labels))
    index = {r: i for i, r in enumerate(region_ids)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise DataError(f"{path}: region ids not in adjacency: {unknown[:10]}")

    def column(name, lineno_offset=2):
        out = np.empty(len(rows))
        for i, r in enumerate(rows):
            cell = r[name]
            try:
                out[i] = float(cell)
            except (TypeError, ValueError):
                raise DataError(f"{path}:{i + lineno_offset}: column {name!r} has non-numeric value {cell!r}") from None
        return out

    y = column(count_col)
    X = np.column_stack([column(c) for c in confounders]) if confounders else np.zeros((len(rows), 0))
    Z = np.column_stack([column(c) for c in exposures])
    return PanelDataset(y=y, population=column(population_col), X=X, Z=Z,
                        region=np.array([index[l] for l in labels]), region_ids=tuple(region_ids),
                        date=column(date_col), confounder_names=tuple(confounders),
                        exposure_names=tuple(exposures))


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------


@dataclass
class PriorConfig:
    """Hyperparameters, schedule and seed for one chain.

    ``beta_cov`` may be a scalar (times identity) or a full matrix.
    ``surface_offset`` is the prior mean of the tree surface: ``"auto"`` uses
    log(total count / total population), a number pins it.
    ``fix_rho`` pins rho (1.0 gives the intrinsic CAR).
    ``level_move`` adds a joint shift of the random intercepts and the tree
    surface after the tree block (see :func:`update_level`).
    """

    beta_mean: object = 0.0
    beta_cov: object = 100.0
    tau_shape: float = 1.0
    tau_rate: float = 1.0
    xi_shape: float = 1.0
    xi_rate: float = 0.1
    bart: BartConfig = field(default_factory=BartConfig)
    n_burn: int = 5000
    n_save: int = 1000
    thin: int = 10
    seed: int = 0
    stream_id: int = 0
    pg_terms: int = PG_SERIES_TERMS
    surface_offset: object = "auto"
    fix_rho: float | None = None
    xi_init: float = 1.0
    tau2_init: float = 1.0
    rho_init: float = 0.5
    level_move: bool = False

    def __post_init__(self):
        if isinstance(self.bart, dict):
            self.bart = BartConfig(**self.bart)
        for name in ("tau_shape", "tau_rate", "xi_shape", "xi_rate", "xi_init", "tau2_init"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_burn < 0 or self.n_save < 0 or self.thin < 1:
            raise ConfigError("schedule needs n_burn >= 0, n_save >= 0, thin >= 1")
        if not (isinstance(self.surface_offset, (int, float)) or self.surface_offset == "auto"):
            raise ConfigError("surface_offset must be a number or 'auto'")

    @property
    def n_iter(self) -> int:
        return self.n_burn + self.n_save * self.thin

    def beta_prior(self, p: int):
        mean = np.broadcast_to(np.asarray(self.beta_mean, dtype=float), (p,)).copy()
        cov = np.asarray(self.beta_cov, dtype=float)
        cov = np.eye(p) * cov if cov.ndim == 0 else cov
        if cov.shape != (p, p):
            raise ConfigError(f"beta_cov must be {p}x{p}")
        if not np.allclose(cov, cov.T):
            raise ConfigError("beta_cov must be symmetric")
        try:
            np.linalg.cholesky(cov) if p else None
        except np.linalg.LinAlgError:
            raise ConfigError("beta_cov must be positive definite") from None
        return mean, np.linalg.inv(cov) if p else np.zeros((0, 0))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("beta_mean", "beta_cov"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class ChainState:
    """One MCMC state.  ``eta`` is recomputed from the components on demand."""

    def __init__(self, data: PanelDataset, beta, spatial: SpatialState, ensemble: Ensemble, xi: float,
                 surface_offset: float):
        self.data = data
        self.beta = np.asarray(beta, dtype=float)
        self.spatial = spatial
        self.ensemble = ensemble
        self.xi = float(xi)
        self.surface_offset = float(surface_offset)

    @property
    def surface(self) -> np.ndarray:
        return self.surface_offset + self.ensemble.total

    def linear_part(self) -> np.ndarray:
        return self.data.X @ self.beta

    def eta(self) -> np.ndarray:
        return self.data.log_offset + self.linear_part() + self.surface + self.spatial.nu[self.data.region]

    def p(self) -> np.ndarray:
        e = self.eta()
        return np.exp(-softplus(-e))


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def pg_augment(y, xi: float, eta, rng, n_terms: int = PG_SERIES_TERMS):
    """Draw omega ~ PG(y + xi, eta) and form y* = (y - xi) / (2 omega).

    Returns ``(omega, y_star, kappa)``.  omega is floored at 1e-300.
    """
    y = np.asarray(y, dtype=float)
    omega = draw_polya_gamma(y + xi, np.asarray(eta, dtype=float), rng, n_terms=n_terms)
    omega = np.maximum(np.atleast_1d(omega), OMEGA_FLOOR)
    kappa = 0.5 * (y - xi)
    return omega, kappa / omega, kappa


def beta_posterior(X, omega, weighted_resid, prior_mean, prior_prec):
    """Canonical parameters (h, P) of the beta full conditional."""
    prec = prior_prec + (X * omega[:, None]).T @ X
    lin = prior_prec @ prior_mean + X.T @ weighted_resid
    return lin, prec


def update_beta(X, omega, weighted_resid, prior_mean, prior_prec, rng):
    """Draw beta ~ N(mu*, Sigma*) with Sigma* = (Sigma_b^-1 + X'Omega X)^-1.

    ``weighted_resid`` is omega * r^beta.  Returns ``(beta, mu*)``.
    """
    if X.shape[1] == 0:
        return np.zeros(0), np.zeros(0)
    lin, prec = beta_posterior(X, omega, weighted_resid, prior_mean, prior_prec)
    return draw_mvn_canonical(lin, prec, rng, name="beta posterior precision")


def xi_posterior(y, eta, xi_old, shape, rate, rng):
    """Shape and rate of the xi full conditional after a fresh CRT draw."""
    tables = draw_crt(xi_old, np.asarray(y), rng)
    return shape + float(np.sum(tables)), rate + float(np.sum(softplus(eta)))


def update_xi(y, eta, xi_old, shape, rate, rng) -> float:
    """xi ~ Gamma(a + sum L, b - sum log(1 - p)) with L ~ CRT(xi_old, y)."""
    a, b = xi_posterior(y, eta, xi_old, shape, rate, rng)
    return float(as_generator(rng).gamma(a, 1.0 / b))


def update_level(state: ChainState, car: CarStructure, rng) -> float:
    """Exact conditional draw along the direction (nu + d * 1, f - d).

    eta is unchanged by the shift, so only the CAR prior and the leaf priors
    involve d, and the conditional of d is Gaussian.  The data pin down
    f + mean(nu) tightly while each is loose on its own, which makes the
    one-block-at-a-time updates crawl along that ridge; this move crosses it
    in one step.  Returns the shift applied.
    """
    ens = state.ensemble
    T = ens.n_trees
    sigma2 = ens.leaf_prior.sigma_mu ** 2
    Q = car.precision(state.spatial.rho) / state.spatial.tau2
    one = np.ones(car.n_regions)
    n_leaves = sum(t.n_leaves for t in ens.trees)
    leaf_sum = sum(float(t.leaf_values.sum()) for t in ens.trees)
    prec = float(one @ Q @ one) + n_leaves / (T * T * sigma2)
    lin = -float(one @ Q @ state.spatial.nu) + leaf_sum / (T * sigma2)
    d = lin / prec + as_generator(rng).standard_normal() / math.sqrt(prec)
    state.spatial.nu = state.spatial.nu + d
    ens.shift(-d)
    return d


def initial_surface_offset(data: PanelDataset, xi: float) -> float:
    return float(math.log((data.y.sum() + 0.5) / (xi * data.population.sum())))


def _check_eta(eta, iteration, block):
    bad = np.flatnonzero(~np.isfinite(eta))
    if bad.size:
        raise NumericalError(
            f"non-finite linear predictor at iteration {iteration} after block {block!r}; "
            f"rows {bad[:10].tolist()}")


def initial_state(data: PanelDataset, car: CarStructure, prior: PriorConfig, rng=None) -> ChainState:
    offset = (initial_surface_offset(data, prior.xi_init) if prior.surface_offset == "auto"
              else float(prior.surface_offset))
    rho = prior.fix_rho if prior.fix_rho is not None else float(car.rho_grid[car.grid_index(prior.rho_init)])
    spatial = SpatialState(np.zeros(car.n_regions), prior.tau2_init, rho)
    ens = Ensemble(data.scale_exposures(), prior.bart)
    return ChainState(data, np.zeros(data.X.shape[1]), spatial, ens, prior.xi_init, offset)


def gibbs_iteration(state: ChainState, car: CarStructure, prior: PriorConfig, beta_prior, gen,
                    iteration: int = 0, trace: list | None = None):
    """Advance ``state`` by one full sweep of every block."""
    data = state.data
    y = data.y
    region = data.region
    n_reg = car.n_regions
    mean_b, prec_b = beta_prior

    eta = state.eta()
    omega, _, kappa = pg_augment(y, state.xi, eta, gen, prior.pg_terms)
    if trace is not None:
        trace.append("pg")

    lin = state.linear_part()
    nu_rows = state.spatial.nu[region]
    surf = state.surface
    base = data.log_offset
    state.beta, _ = update_beta(data.X, omega, kappa - omega * (base + surf + nu_rows), mean_b, prec_b, gen)
    lin = state.linear_part()
    _check_eta(base + lin + surf + nu_rows, iteration, "beta")
    if trace is not None:
        trace.append("beta")

    wr = kappa - omega * (base + lin + surf)
    nu, _ = update_nu(state.spatial, car, np.bincount(region, omega, n_reg), np.bincount(region, wr, n_reg), gen)
    state.spatial.nu = nu
    nu_rows = nu[region]
    _check_eta(base + lin + surf + nu_rows, iteration, "nu")
    if trace is not None:
        trace.append("nu")

    state.spatial.tau2 = update_tau2(nu, car, state.spatial.rho, prior.tau_shape, prior.tau_rate, gen)
    if trace is not None:
        trace.append("tau2")
    if prior.fix_rho is None:
        state.spatial.rho = update_rho(nu, car, state.spatial.tau2, gen)
    if trace is not None:
        trace.append("rho")

    state.ensemble.sweep(omega, kappa - omega * (base + lin + nu_rows + state.surface_offset), gen)
    eta = state.eta()
    _check_eta(eta, iteration, "trees")
    if trace is not None:
        trace.append("trees")

    if prior.level_move:
        update_level(state, car, gen)
        if trace is not None:
            trace.append("level")

    state.xi = update_xi(y, eta, state.xi, prior.xi_shape, prior.xi_rate, gen)
    if not (state.xi > 0 and math.isfinite(state.xi)):
        raise NumericalError(f"xi left its support at iteration {iteration}: {state.xi}")
    if trace is not None:
        trace.append("xi")
    return state


def run_chain(data: PanelDataset, car: CarStructure, prior: PriorConfig, rng=None, state: ChainState | None = None,
              progress_every: int = 0, trace: list | None = None) -> "PosteriorStore":
    """Run burn-in plus ``n_save * thin`` iterations and archive every ``thin``-th state."""
    if data.n_regions != car.n_regions:
        raise DataError(f"dataset has {data.n_regions} regions, adjacency has {car.n_regions}")
    rng = rng if rng is not None else RngStream(prior.seed, prior.stream_id)
    gen = as_generator(rng)
    beta_prior = prior.beta_prior(data.X.shape[1])
    state = state or initial_state(data, car, prior)
    store = PosteriorStore.empty(data, prior, state.surface_offset)
    for it in range(prior.n_iter):
        gibbs_iteration(state, car, prior, beta_prior, gen, it, trace)
        if it >= prior.n_burn and (it - prior.n_burn + 1) % prior.thin == 0:
            store.append(state)
        if progress_every and (it + 1) % progress_every == 0:
            logger.info("iteration %d/%d xi=%.4f tau2=%.4f rho=%.3f accept=%s", it + 1, prior.n_iter,
                        state.xi, state.spatial.tau2, state.spatial.rho, state.ensemble.counters.rates())
    store.finalize(state)
    return store


# ---------------------------------------------------------------------------
# Posterior storage
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _predict_forest(Z, var, cut, right, value, tree_start, tree_bw, draw_start, draws, out):
    n = Z.shape[0]
    prob = np.empty(var.shape[0])
    for di in range(draws.shape[0]):
        d = draws[di]
        for t in range(draw_start[d], draw_start[d + 1]):
            s = tree_start[t]
            e = tree_start[t + 1]
            bw = tree_bw[t]
            for i in range(n):
                prob[s] = 1.0
                acc = 0.0
                for node in range(s, e):
                    p = prob[node]
                    v = var[node]
                    if v < 0:
                        acc += p * value[node]
                    else:
                        x = (Z[i, v] - cut[node]) / bw
                        prob[node + 1] = p * _logistic(-x)
                        prob[right[node]] = p * _logistic(x)
                out[di, i] += acc


class ForestArchive:
    """All stored ensembles flattened into arrays for fast batched prediction."""

    def __init__(self, forests):
        var, cut, right, value, tree_start, bw, draw_start = [], [], [], [], [0], [], [0]
        for trees in forests:
            for tree in trees:
                off = tree_start[-1]
                var.append(tree.var)
                cut.append(tree.cut)
                right.append(np.where(tree.right >= 0, tree.right + off, -1))
                value.append(tree.value)
                bw.append(tree.bandwidth)
                tree_start.append(off + tree.n_nodes)
            draw_start.append(draw_start[-1] + len(trees))
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
        self.var = cat(var, np.int64)
        self.cut = cat(cut, float)
        self.right = cat(right, np.int64)
        self.value = cat(value, float)
        self.tree_start = np.asarray(tree_start, dtype=np.int64)
        self.tree_bw = np.asarray(bw, dtype=float)
        self.draw_start = np.asarray(draw_start, dtype=np.int64)
        self.n_draws = len(forests)
        self.evaluations = 0

    def predict(self, Z_scaled, draws=None) -> np.ndarray:
        Z = np.ascontiguousarray(np.atleast_2d(np.asarray(Z_scaled, dtype=float)))
        draws = np.arange(self.n_draws) if draws is None else np.asarray(draws, dtype=np.int64)
        out = np.zeros((draws.shape[0], Z.shape[0]))
        if Z.shape[0] and draws.shape[0]:
            _predict_forest(Z, self.var, self.cut, self.right, self.value, self.tree_start, self.tree_bw,
                            self.draw_start, draws, out)
        self.evaluations += draws.shape[0] * Z.shape[0]
        return out


_ARRAYS = ("beta", "nu", "tau2", "rho", "xi", "split_probs", "surface")


class PosteriorStore:
    """Thinned posterior draws plus run metadata.

    On disk: ``meta.json``, one little-endian float64 ``<name>.bin`` per
    parameter (draw-major, row-major) and ``trees.jsonl`` with one line per
    draw holding every tree's pre-order node list and bandwidth.
    """

    def __init__(self, arrays: dict, forests: list, meta: dict):
        self.arrays = arrays
        self.forests = forests
        self.meta = meta
        self._archive = None

    @classmethod
    def empty(cls, data: PanelDataset, prior: PriorConfig, surface_offset: float) -> "PosteriorStore":
        meta = {
            "format": "mixbart-posterior/1",
            "seed": prior.seed,
            "stream_id": prior.stream_id,
            "config": prior.to_dict(),
            "config_hash": prior.config_hash(),
            "n_burn": prior.n_burn,
            "n_save": prior.n_save,
            "thin": prior.thin,
            "n_iter": prior.n_iter,
            "confounder_names": list(data.confounder_names),
            "exposure_names": list(data.exposure_names),
            "region_ids": [str(r) for r in data.region_ids],
            "z_min": data.z_min.tolist(),
            "z_max": data.z_max.tolist(),
            "surface_offset": surface_offset,
            "n_rows": data.n_rows,
        }
        store = cls({k: [] for k in _ARRAYS}, [], meta)
        return store

    def append(self, state: ChainState):
        a = self.arrays
        a["beta"].append(state.beta.copy())
        a["nu"].append(state.spatial.nu.copy())
        a["tau2"].append(state.spatial.tau2)
        a["rho"].append(state.spatial.rho)
        a["xi"].append(state.xi)
        a["split_probs"].append(state.ensemble.split_probs.weights.copy())
        a["surface"].append(state.surface.copy())
        self.forests.append([t.copy() for t in state.ensemble.trees])

    def finalize(self, state: ChainState | None = None):
        p = len(self.meta["confounder_names"])
        widths = {"beta": p, "nu": len(self.meta["region_ids"]), "split_probs": len(self.meta["exposure_names"]),
                  "surface": self.meta["n_rows"]}
        for k in _ARRAYS:
            vals = self.arrays[k]
            if k in widths:
                self.arrays[k] = np.asarray(vals, dtype=float).reshape(len(vals), widths[k])
            else:
                self.arrays[k] = np.asarray(vals, dtype=float).reshape(len(vals))
        self.meta["n_draws"] = len(self.forests)
        if state is not None:
            self.meta["acceptance"] = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                                       for k, v in state.ensemble.counters.rates().items()}
        return self

    @property
    def n_draws(self) -> int:
        return len(self.forests)

    def __getitem__(self, key):
        return self.arrays[key]

    @property
    def archive(self) -> ForestArchive:
        if self._archive is None:
            self._archive = ForestArchive(self.forests)
        return self._archive

    def scale(self, Z) -> np.ndarray:
        return scale_exposures(np.atleast_2d(np.asarray(Z, dtype=float)),
                               np.asarray(self.meta["z_min"]), np.asarray(self.meta["z_max"]))

    def surface_draws(self, Z, draws=None, scaled: bool = False) -> np.ndarray:
        """Tree surface f(Z) per draw, shape (n_draws, n_rows), offset included."""
        Zs = Z if scaled else self.scale(Z)
        return self.archive.predict(Zs, draws) + self.meta["surface_offset"]

    def eta(self, data: PanelDataset, recompute: bool = False) -> np.ndarray:
        surf = self.surface_draws(data.Z) if recompute else self.arrays["surface"]
        return (data.log_offset[None, :] + self.arrays["beta"] @ data.X.T + surf
                + self.arrays["nu"][:, data.region])

    # -- persistence --------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        meta["arrays"] = {k: {"file": f"{k}.bin", "shape": list(np.shape(self.arrays[k]))} for k in _ARRAYS}
        for k in _ARRAYS:
            np.ascontiguousarray(self.arrays[k], dtype="<f8").tofile(directory / f"{k}.bin")
        with open(directory / "trees.jsonl", "w") as fh:
            for trees in self.forests:
                fh.write(json.dumps([{"bandwidth": t.bandwidth, "nodes": t.to_records()} for t in trees]))
                fh.write("\n")
        tmp = directory / "meta.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
        os.replace(tmp, directory / "meta.json")
        return directory

    @classmethod
    def load(cls, directory) -> "PosteriorStore":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "meta.json").read_text())
        except FileNotFoundError:
            raise DataError(f"{directory} is not a posterior store (no meta.json)") from None
        arrays = {}
        for k, spec in meta.pop("arrays").items():
            arrays[k] = np.fromfile(directory / spec["file"], dtype="<f8").reshape(spec["shape"])
        forests = []
        with open(directory / "trees.jsonl") as fh:
            for line in fh:
                forests.append([SoftTree.from_records(t["nodes"], t["bandwidth"]) for t in json.loads(line)])
        return cls(arrays, forests, meta)


def log_likelihood_matrix(store: PosteriorStore, data: PanelDataset, recompute: bool = False) -> np.ndarray:
    """Pointwise NB log density, shape (n_draws, n_rows)."""
    if store.n_draws == 0:
        raise ValueError("posterior store is empty")
    eta = store.eta(data, recompute=recompute)
    return nb_log_density(data.y[None, :], store.arrays["xi"][:, None], eta)
