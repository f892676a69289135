"""Simulation study: Friedman-surface count data on a lattice, replicate fits, and scoring."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ensemble import BartConfig
from .exceptions import ConfigError
from .nbgibbs import PanelDataset, PriorConfig, run_chain
from .randkit import RngStream, as_generator
from .spatial import CarStructure, lattice_adjacency, sample_car_prior

__all__ = [
    "SimConfig",
    "SimTruth",
    "ReplicateFit",
    "friedman_surface",
    "default_exposure_correlation",
    "generate_replicate",
    "fit_replicate",
    "score_replicates",
    "score_parameters",
    "run_study",
    "write_metric_csv",
    "read_metric_csv",
    "TABLE_COLUMNS",
    "PARAMETER_COLUMNS",
]

TABLE_COLUMNS = ("T", "soft", "sparse", "bias", "bias_mcse", "coverage", "coverage_mcse", "rmse", "rmse_mcse")
PARAMETER_COLUMNS = ("T", "soft", "sparse", "parameter", "truth", "bias", "bias_mcse", "coverage",
                     "coverage_mcse", "rmse", "rmse_mcse")


def friedman_surface(Z) -> np.ndarray:
    """f(z) = -10 + f0(z) / 5 with the five-term Friedman benchmark f0."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    f0 = (10 * np.sin(Z[:, 0] * Z[:, 1]) + 20 * (Z[:, 2] - 0.5) ** 2 + 10 * Z[:, 3] + 5 * Z[:, 4])
    return -10.0 + f0 / 5.0


def default_exposure_correlation(q: int = 10) -> np.ndarray:
    """0.4 among z1..z4, -0.2 between z5 and z1..z4, independent z6 onward.

    A stand-in for an observed pollutant/temperature correlation matrix; it
    is not taken from any real data set.
    """
    if q < 5:
        raise ConfigError("the Friedman surface needs at least 5 exposures")
    s = np.eye(q)
    s[:4, :4] = 0.4
    s[4, :4] = s[:4, 4] = -0.2
    np.fill_diagonal(s, 1.0)
    return s


@dataclass
class SimConfig:
    """Data-generating process, replicate count, settings grid and MCMC schedule.

    ``surface`` maps the scaled (n, q) exposure matrix to the true log-rate
    surface; the default is :func:`friedman_surface`.
    """

    lattice: tuple = (5, 4)
    n_days: int = 100
    beta: tuple = (-2.0, -1.0, 1.0, 2.0)
    rho: float = 0.9
    tau2: float = 0.3
    xi: float = 1.0
    n_exposures: int = 10
    correlation: object = None
    population_range: tuple = (1e3, 1e5)
    n_replicates: int = 20
    settings: list = field(default_factory=lambda: [BartConfig(n_trees=25, soft=True, sparse=True)])
    n_burn: int = 2000
    n_save: int = 500
    thin: int = 2
    seed: int = 0
    pg_terms: int = 200
    adjacency: object = None
    populations: object = None
    surface: object = None

    def __post_init__(self):
        self.settings = [s if isinstance(s, BartConfig) else BartConfig(**s) for s in self.settings]
        if not self.settings:
            raise ConfigError("at least one ensemble setting is required")
        if len(self.beta) != 4:
            raise ConfigError("beta must have 4 components (one per confounder)")
        if self.correlation is None:
            self.correlation = default_exposure_correlation(self.n_exposures)
        self.correlation = np.asarray(self.correlation, dtype=float)
        if self.correlation.shape != (self.n_exposures, self.n_exposures):
            raise ConfigError("correlation must be n_exposures x n_exposures")
        if not np.allclose(self.correlation, self.correlation.T):
            raise ConfigError("correlation must be symmetric")
        if np.linalg.eigvalsh(self.correlation).min() <= 0:
            raise ConfigError("correlation must be positive definite")
        if self.n_days < 1 or self.n_replicates < 1:
            raise ConfigError("n_days and n_replicates must be positive")
        if not (0 <= self.rho < 1 and self.tau2 > 0 and self.xi > 0):
            raise ConfigError("need 0 <= rho < 1, tau2 > 0, xi > 0")

    def car(self) -> CarStructure:
        if self.adjacency is not None:
            return self.adjacency if isinstance(self.adjacency, CarStructure) else CarStructure.from_adjacency(
                self.adjacency)
        return CarStructure.from_adjacency(lattice_adjacency(*self.lattice))

    def prior(self, setting: BartConfig) -> PriorConfig:
        return PriorConfig(bart=setting, n_burn=self.n_burn, n_save=self.n_save, thin=self.thin,
                           seed=self.seed, pg_terms=self.pg_terms)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["correlation"] = self.correlation.tolist()
        d["settings"] = [s.to_dict() for s in self.settings]
        d.pop("adjacency")
        d.pop("populations")
        d["surface"] = "friedman" if self.surface is None else getattr(self.surface, "__name__", repr(self.surface))
        return d


@dataclass
class SimTruth:
    f: np.ndarray
    eta: np.ndarray
    nu: np.ndarray
    beta: np.ndarray
    rho: float
    tau2: float
    xi: float

    def parameters(self) -> dict:
        return {"beta": self.beta, "rho": np.array([self.rho]), "tau2": np.array([self.tau2]),
                "xi": np.array([self.xi]), "nu": self.nu}


def generate_replicate(config: SimConfig, rng, car: CarStructure | None = None):
    """Draw one data set.  Returns ``(PanelDataset, SimTruth)``."""
    gen = as_generator(rng)
    car = car or config.car()
    I, J, q = car.n_regions, config.n_days, config.n_exposures
    if config.populations is not None:
        pop_region = np.asarray(config.populations, dtype=float)
    else:
        lo, hi = np.log(config.population_range)
        pop_region = np.exp(gen.uniform(lo, hi, I))
    region = np.repeat(np.arange(I), J)
    n = I * J
    X = gen.uniform(size=(n, 4))
    Z = gen.multivariate_normal(np.zeros(q), config.correlation, size=n, method="cholesky")
    Z = (Z - Z.min(axis=0)) / (Z.max(axis=0) - Z.min(axis=0))
    nu = sample_car_prior(car, config.tau2, config.rho, gen)
    beta = np.asarray(config.beta, dtype=float)
    f = (config.surface or friedman_surface)(Z)
    eta = np.log(pop_region[region]) + X @ beta + f + nu[region]
    lam = gen.gamma(config.xi, np.exp(eta))
    y = gen.poisson(lam)
    data = PanelDataset(y=y, population=pop_region[region], X=X, Z=Z, region=region,
                        region_ids=car.region_ids, date=np.tile(np.arange(J), I),
                        confounder_names=tuple(f"x_{k + 1}" for k in range(4)),
                        exposure_names=tuple(f"z_{k + 1}" for k in range(q)))
    return data, SimTruth(f, eta, nu, beta, config.rho, config.tau2, config.xi)


@dataclass
class ReplicateFit:
    """Posterior summaries of one fit: means and 95% interval ends.

    ``summaries[name]`` is a (3, d) array of (mean, lo95, hi95).
    """

    setting: dict
    replicate: int
    summaries: dict
    acceptance: dict = field(default_factory=dict)

    @classmethod
    def from_store(cls, store, setting: BartConfig, replicate: int) -> "ReplicateFit":
        def summ(a):
            a = np.asarray(a).reshape(a.shape[0], -1)
            lo, hi = np.quantile(a, [0.025, 0.975], axis=0)
            return np.stack([a.mean(axis=0), lo, hi])

        s = {k: summ(store[k]) for k in ("beta", "rho", "tau2", "xi", "nu", "surface", "split_probs")}
        s["f"] = s.pop("surface")
        return cls(setting.to_dict(), replicate, s, store.meta.get("acceptance", {}))

    def save(self, path):
        np.savez(path, **{k: v for k, v in self.summaries.items()},
                 _setting=np.array(repr(sorted(self.setting.items()))), _replicate=self.replicate)

    @classmethod
    def load(cls, path, setting: BartConfig, replicate: int) -> "ReplicateFit":
        with np.load(path) as z:
            return cls(setting.to_dict(), replicate, {k: z[k] for k in z.files if not k.startswith("_")})


def fit_replicate(config: SimConfig, setting: BartConfig, replicate: int, setting_index: int = 0,
                  return_store: bool = False):
    """Generate replicate ``replicate`` and fit one ensemble setting to it."""
    car = config.car()
    data, truth = generate_replicate(config, RngStream(config.seed, replicate, (0,)), car)
    prior = replace(config.prior(setting), stream_id=replicate)
    store = run_chain(data, car, prior, RngStream(config.seed, replicate, (1, setting_index)))
    fit = ReplicateFit.from_store(store, setting, replicate)
    return (fit, truth, store, data) if return_store else (fit, truth)


def _interval_metrics(summary, truth):
    """Per-replicate bias, coverage and RMSE for a (3, d) summary against truth (d,)."""
    mean, lo, hi = summary
    err = mean - truth
    return np.array([err.mean(), np.mean((lo <= truth) & (truth <= hi)), math.sqrt(np.mean(err ** 2))])


def _aggregate(per_rep):
    per_rep = np.asarray(per_rep, dtype=float)
    R = per_rep.shape[0]
    mean = per_rep.mean(axis=0)
    mcse = per_rep.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.full(per_rep.shape[1], math.nan)
    return mean, mcse


def score_replicates(fits, truths) -> dict:
    """Surface metrics for f: replicate-averaged bias, coverage and RMSE with MCSEs.

    Also returns the per-replicate values under ``"per_replicate"``.
    """
    fits, truths = list(fits), list(truths)
    if len(fits) != len(truths) or not fits:
        raise ValueError("need one truth per fit")
    per = []
    for fit, truth in zip(fits, truths):
        summ = fit.summaries["f"]
        if summ.shape[1] != truth.f.shape[0]:
            raise ValueError(f"fit has {summ.shape[1]} rows, truth has {truth.f.shape[0]}")
        per.append(_interval_metrics(summ, truth.f))
    mean, mcse = _aggregate(per)
    s = fits[0].setting
    return {"T": s["n_trees"], "soft": bool(s["soft"]), "sparse": bool(s["sparse"]),
            "bias": mean[0], "bias_mcse": mcse[0], "coverage": mean[1], "coverage_mcse": mcse[1],
            "rmse": mean[2], "rmse_mcse": mcse[2], "per_replicate": np.asarray(per)}


def score_parameters(fits, truths) -> list:
    """Bias, coverage and RMSE for each beta component, rho, tau2, xi and (pooled) nu."""
    fits, truths = list(fits), list(truths)
    s = fits[0].setting
    rows = []
    names = [(f"beta_{k + 1}", "beta", k) for k in range(truths[0].beta.shape[0])]
    names += [("rho", "rho", 0), ("tau2", "tau2", 0), ("xi", "xi", 0), ("nu", "nu", None)]
    for label, key, k in names:
        per = []
        for fit, truth in zip(fits, truths):
            summ, tv = fit.summaries[key], truth.parameters()[key]
            if k is not None:
                summ, tv = summ[:, [k]], tv[[k]]
            per.append(_interval_metrics(summ, tv))
        mean, mcse = _aggregate(per)
        truth_val = float(truths[0].parameters()[key][k]) if k is not None else math.nan
        rows.append({"T": s["n_trees"], "soft": bool(s["soft"]), "sparse": bool(s["sparse"]),
                     "parameter": label, "truth": truth_val, "bias": mean[0], "bias_mcse": mcse[0],
                     "coverage": mean[1], "coverage_mcse": mcse[1], "rmse": mean[2], "rmse_mcse": mcse[2]})
    return rows


def run_study(config: SimConfig, threads: int = 1, cache_dir=None, progress=None):
    """Fit every (setting, replicate) pair and score each setting.

    Returns ``(table_rows, parameter_rows, fits)`` where ``fits[i]`` lists the
    :class:`ReplicateFit` objects of setting ``i``.  With ``cache_dir`` set,
    finished fits are stored as ``.npz`` files and reused on the next call.
    """
    from pathlib import Path

    from joblib import Parallel, delayed

    jobs = [(si, r) for si in range(len(config.settings)) for r in range(config.n_replicates)]

    def key(si, r):
        s = config.settings[si]
        return f"T{s.n_trees}_soft{int(s.soft)}_sparse{int(s.sparse)}_rep{r:03d}.npz"

    def work(si, r):
        if cache_dir is not None:
            path = Path(cache_dir) / key(si, r)
            if path.exists():
                return ReplicateFit.load(path, config.settings[si], r)
        fit, _ = fit_replicate(config, config.settings[si], r, si)
        if cache_dir is not None:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            tmp = Path(cache_dir) / ("tmp_" + key(si, r))
            fit.save(tmp)
            tmp.replace(path)
        if progress:
            progress(si, r)
        return fit

    results = Parallel(n_jobs=max(1, int(threads)))(delayed(work)(si, r) for si, r in jobs)
    car = config.car()
    truths = [generate_replicate(config, RngStream(config.seed, r, (0,)), car)[1]
              for r in range(config.n_replicates)]
    fits = [[f for (si, _), f in zip(jobs, results) if si == i] for i in range(len(config.settings))]
    table = [score_replicates(f, truths) for f in fits]
    params = [row for f in fits for row in score_parameters(f, truths)]
    return table, params, fits


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metric_csv(rows, path, columns=TABLE_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c] if not isinstance(r[c], np.generic) else r[c].item()) for c in columns])


def read_metric_csv(path) -> list:
    """Parse a metric CSV written by :func:`write_metric_csv` back into typed rows."""
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if k == "T":
                    row[k] = int(v)
                elif k in ("soft", "sparse"):
                    row[k] = v == "true"
                elif k == "parameter":
                    row[k] = v
                else:
                    row[k] = float(v)
            out.append(row)
    return out
