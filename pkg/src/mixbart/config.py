"""TOML run configuration for the command line.

A fit config looks like::

    [data]
    path = "panel.csv"            # relative paths resolve against the config file
    adjacency = "adjacency.txt"
    confounders = ["x_1", "x_2"]
    exposures = ["z_1", "z_2", "z_3"]

    [prior]
    beta_cov = 100.0
    tau_shape = 1.0

    [bart]
    n_trees = 25
    soft = true

    [schedule]
    n_burn = 5000
    n_save = 1000
    thin = 10
    seed = 0

Keys may also be given flat at the top level; section names only group them.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ensemble import BartConfig
from .exceptions import ConfigError
from .nbgibbs import PriorConfig
from .simlab import SimConfig

__all__ = ["load_toml", "FitSettings", "fit_settings", "sim_config"]

_DATA_KEYS = {"path", "adjacency", "confounders", "exposures", "region_column", "date_column", "count_column",
              "population_column"}
_BART_KEYS = {f.name for f in dataclasses.fields(BartConfig)}
_PRIOR_KEYS = {f.name for f in dataclasses.fields(PriorConfig)} - {"bart"}


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def _flatten(doc: dict) -> dict:
    flat = {}
    for k, v in doc.items():
        items = v.items() if isinstance(v, dict) else [(k, v)]
        for kk, vv in items:
            if kk in flat:
                raise ConfigError(f"key {kk!r} given twice")
            flat[kk] = vv
    return flat


@dataclasses.dataclass
class FitSettings:
    data_path: Path | None
    adjacency_path: Path | None
    confounders: list
    exposures: list
    columns: dict
    prior: PriorConfig


def fit_settings(doc: dict, base_dir=".", overrides: dict | None = None) -> FitSettings:
    """Split a parsed config into data roles and a :class:`PriorConfig`.

    ``overrides`` (from command-line flags) win over file values; ``None``
    entries are ignored.
    """
    flat = _flatten(doc)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(flat) - _DATA_KEYS - _BART_KEYS - _PRIOR_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = Path(base_dir)

    def path(key):
        v = flat.get(key)
        return None if v is None else (base / v if not Path(v).is_absolute() else Path(v))

    bart = {k: flat[k] for k in _BART_KEYS if k in flat}
    prior = {k: flat[k] for k in _PRIOR_KEYS if k in flat}
    try:
        prior_cfg = PriorConfig(bart=BartConfig(**bart), **prior)
        prior_cfg.beta_prior(len(flat.get("confounders", [])))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if "exposures" not in flat or not flat["exposures"]:
        raise ConfigError("config must list at least one exposure column under 'exposures'")
    columns = {"region_col": flat.get("region_column", "region_id"),
               "date_col": flat.get("date_column", "date_index"),
               "count_col": flat.get("count_column", "count"),
               "population_col": flat.get("population_column", "population")}
    return FitSettings(path("path"), path("adjacency"), list(flat.get("confounders", [])),
                       list(flat["exposures"]), columns, prior_cfg)


def sim_config(doc: dict, overrides: dict | None = None) -> SimConfig:
    """Build a :class:`SimConfig`; ``trees``, ``soft`` and ``sparse`` lists span the settings grid."""
    flat = _flatten(doc)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    trees = flat.pop("trees", [25])
    softs = flat.pop("soft", [True])
    sparses = flat.pop("sparse", [True])
    trees = trees if isinstance(trees, list) else [trees]
    softs = softs if isinstance(softs, list) else [softs]
    sparses = sparses if isinstance(sparses, list) else [sparses]
    bart_extra = {k: flat.pop(k) for k in list(flat) if k in _BART_KEYS}
    if "replicates" in flat:
        flat["n_replicates"] = flat.pop("replicates")
    if "days" in flat:
        flat["n_days"] = flat.pop("days")
    for k in ("lattice", "beta", "population_range"):
        if k in flat:
            flat[k] = tuple(flat[k])
    valid = {f.name for f in dataclasses.fields(SimConfig)} - {"settings", "adjacency", "populations"}
    unknown = set(flat) - valid
    if unknown:
        raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
    try:
        settings = [BartConfig(n_trees=t, soft=s, sparse=p, **bart_extra)
                    for t in trees for s in softs for p in sparses]
        return SimConfig(settings=settings, **flat)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
