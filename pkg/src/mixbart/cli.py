"""Command line: ``mixbart fit | ale | waic | simulate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .exceptions import ConfigError, DataError, MixbartError
from .interpret import (
    ale_first_order,
    ale_second_order,
    decile_mixture_effect,
    fixed_profile,
    partial_dependence,
    waic,
    write_effects_csv,
)
from .nbgibbs import PosteriorStore, log_likelihood_matrix, read_panel_csv, run_chain
from .simlab import PARAMETER_COLUMNS, TABLE_COLUMNS, run_study, write_metric_csv
from .spatial import CarStructure, read_edge_list

logger = logging.getLogger("mixbart")

MANIFEST = "manifest.json"


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get("MIXBART_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MIXBART_THREADS must be an integer, got {env!r}") from None
    return 1


def _apply_threads(n: int):
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _check_out(out: Path, digests: dict, force: bool):
    """Refuse to reuse an output directory whose recorded inputs differ."""
    manifest = out / MANIFEST
    if manifest.exists() and not force:
        old = json.loads(manifest.read_text()).get("inputs", {})
        changed = sorted(k for k in set(old) | set(digests) if old.get(k) != digests.get(k))
        if changed:
            raise ConfigError(f"{out} holds results for different inputs ({', '.join(changed)}); "
                              "use a new --out directory or pass --force")
    out.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, payload: dict):
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    os.replace(tmp, out / MANIFEST)


def _load_car(path, region_ids=None) -> CarStructure:
    edges = read_edge_list(path)
    if region_ids is None:
        region_ids = tuple(dict.fromkeys(r for e in edges for r in e))
    return CarStructure.from_edges(edges, region_ids)


def _region_order(data_path, region_col) -> tuple:
    with open(data_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if region_col not in (reader.fieldnames or []):
            raise DataError(f"{data_path}: missing column {region_col!r}")
        return tuple(dict.fromkeys(r[region_col] for r in reader))


def _load_fit_inputs(data_path, adj_path, confounders, exposures, columns):
    regions = _region_order(data_path, columns["region_col"])
    edges = read_edge_list(adj_path)
    in_edges = tuple(dict.fromkeys(r for e in edges for r in e))
    missing = sorted(set(regions) - set(in_edges))
    if missing:
        raise DataError(f"region ids in {data_path} missing from adjacency: {missing[:10]}")
    extra = [r for r in in_edges if r not in set(regions)]
    car = CarStructure.from_edges(edges, regions + tuple(extra))
    data = read_panel_csv(data_path, confounders, exposures, car.region_ids, **columns)
    return data, car


def _summary_rows(store: PosteriorStore):
    rows = []

    def add(name, draws):
        lo, hi = np.quantile(draws, [0.025, 0.975])
        rows.append((name, float(np.mean(draws)), float(lo), float(hi)))

    for j, name in enumerate(store.meta["confounder_names"]):
        add(f"beta[{name}]", store["beta"][:, j])
    for name in ("tau2", "rho", "xi"):
        add(name, store[name])
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    doc = cfgmod.load_toml(args.config) if args.config else {}
    base = Path(args.config).parent if args.config else Path(".")
    overrides = {"n_trees": args.trees, "soft": args.soft, "sparse": args.sparse, "seed": args.seed,
                 "n_burn": args.burn, "n_save": args.save, "thin": args.thin}
    settings = cfgmod.fit_settings(doc, base, overrides)
    data_path = Path(args.data) if args.data else settings.data_path
    adj_path = Path(args.adjacency) if args.adjacency else settings.adjacency_path
    if data_path is None or adj_path is None:
        raise ConfigError("both a data file and an adjacency file are required")
    for p in (data_path, adj_path):
        if not Path(p).exists():
            raise DataError(f"input file not found: {p}")
    _apply_threads(_threads(args))
    out = Path(args.out)
    digests = {"data": _digest(data_path), "adjacency": _digest(adj_path)}
    if args.config:
        digests["config"] = _digest(args.config)
    _check_out(out, digests, args.force)

    data, car = _load_fit_inputs(data_path, adj_path, settings.confounders, settings.exposures, settings.columns)
    t0 = time.perf_counter()
    store = run_chain(data, car, settings.prior, progress_every=args.progress)
    elapsed = time.perf_counter() - t0
    store.save(out)

    rows = _summary_rows(store)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "mean", "lo95", "hi95"])
        w.writerows([(n, repr(m), repr(lo), repr(hi)) for n, m, lo, hi in rows])
    print(f"{'parameter':<24}{'mean':>12}{'lo95':>12}{'hi95':>12}")
    for n, m, lo, hi in rows:
        print(f"{n:<24}{m:>12.4f}{lo:>12.4f}{hi:>12.4f}")
    _write_manifest(out, {"subcommand": "fit", "config": settings.prior.to_dict(), "inputs": digests,
                          "input_paths": {"data": str(data_path), "adjacency": str(adj_path)},
                          "output": str(out), "seconds": elapsed, "draws": store.n_draws,
                          "acceptance": store.meta.get("acceptance", {})})
    return 0


def _load_store_and_data(args):
    store = PosteriorStore.load(args.store)
    meta = store.meta
    columns = dict(region_col=args.region_column, date_col="date_index", count_col="count",
                   population_col="population")
    with open(args.data, newline="") as fh:
        header = next(csv.reader(fh), [])
    missing = [c for c in meta["confounder_names"] + meta["exposure_names"] if c not in header]
    if missing:
        raise DataError(f"{args.data} lacks columns recorded in the store: {missing}")
    data = read_panel_csv(args.data, meta["confounder_names"], meta["exposure_names"],
                          tuple(meta["region_ids"]), **columns)
    if data.n_rows != meta["n_rows"]:
        raise DataError(f"{args.data} has {data.n_rows} rows, the store was fitted on {meta['n_rows']}")
    return store, data


def _exposure_index(names, name):
    if name is None:
        raise ConfigError(f"an exposure is required; valid names: {', '.join(names)}")
    if name not in names:
        raise ConfigError(f"unknown exposure {name!r}; valid names: {', '.join(names)}")
    return names.index(name)


def cmd_ale(args) -> int:
    store, data = _load_store_and_data(args)
    names = list(store.meta["exposure_names"])
    Z = data.Z
    mode = args.mode
    if mode in ("ale1", "ale2", "pd", "fixed"):
        k = _exposure_index(names, args.exposure)
    if mode == "ale1":
        res = ale_first_order(store, Z, k, args.bins, names)
        rows = res.to_rows(trim=args.trim if args.trim is not None else 0.95, data_z=Z)
        stem = f"ale1_{names[k]}"
    elif mode == "ale2":
        l = _exposure_index(names, args.exposure2)
        if l == k:
            raise ConfigError("--exposure2 must differ from --exposure")
        res = ale_second_order(store, Z, k, l, args.bins, names, add_main_effects=args.add_main)
        rows = res.to_rows(trim=args.trim, data_z=Z)
        stem = f"ale2_{names[k]}_{names[l]}"
    elif mode in ("pd", "fixed"):
        grid = np.unique(np.quantile(Z[:, k], np.linspace(0, 1, args.bins + 1)))
        if mode == "pd":
            res = partial_dependence(store, Z, k, grid, names)
        else:
            res = fixed_profile(store, k, grid, _reference(args.reference, names, Z), names)
        rows = res.to_rows()
        stem = f"{mode}_{names[k]}"
    else:
        res = decile_mixture_effect(store, Z, names)
        rows = res.to_rows()
        stem = "decile"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}.csv"
    write_effects_csv(rows, path)
    print(path)
    return 0


def _reference(spec, names, Z):
    if spec in (None, "median"):
        return np.median(Z, axis=0)
    with open(spec, newline="") as fh:
        row = next(csv.DictReader(fh), None)
    if row is None:
        raise DataError(f"{spec}: reference file has no data row")
    missing = [n for n in names if n not in row]
    if missing:
        raise DataError(f"{spec}: reference lacks exposures {missing}")
    return np.array([float(row[n]) for n in names])


def cmd_waic(args) -> int:
    store, data = _load_store_and_data(args)
    res = waic(log_likelihood_matrix(store, data))
    print(f"waic   {res.waic:.6f}\nlppd   {res.lppd:.6f}\np_waic {res.p_waic:.6f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "waic.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["waic", "lppd", "p_waic"])
        w.writerow([repr(res.waic), repr(res.lppd), repr(res.p_waic)])
    with open(out / "waic_pointwise.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "lppd", "p_waic", "waic"])
        for i, (a, b, c) in enumerate(zip(res.lppd_i, res.p_waic_i, res.waic_i)):
            w.writerow([i, repr(float(a)), repr(float(b)), repr(float(c))])
    return 0


def cmd_simulate(args) -> int:
    doc = cfgmod.load_toml(args.config) if args.config else {}
    overrides = {"seed": args.seed, "n_replicates": args.replicates, "n_burn": args.burn,
                 "n_save": args.save, "thin": args.thin}
    sim = cfgmod.sim_config(doc, overrides)
    threads = _threads(args)
    out = Path(args.out)
    digests = {"config": _digest(args.config)} if args.config else {}
    _check_out(out, digests, args.force)
    t0 = time.perf_counter()
    table, params, fits = run_study(sim, threads=threads, cache_dir=out / "fits" if args.keep_fits else None)
    write_metric_csv(table, out / "surface_metrics.csv", TABLE_COLUMNS)
    write_metric_csv(params, out / "parameters.csv", PARAMETER_COLUMNS)
    for row in table:
        print(f"T={row['T']:<4} soft={row['soft']!s:<6} sparse={row['sparse']!s:<6} bias={row['bias']:.4f} "
              f"coverage={row['coverage']:.3f} rmse={row['rmse']:.4f}")
    _write_manifest(out, {"subcommand": "simulate", "config": sim.to_dict(), "inputs": digests,
                          "output": str(out), "seconds": time.perf_counter() - t0, "threads": threads})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixbart", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads (overrides MIXBART_THREADS)")
        sp.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="run one MCMC chain and write a posterior store")
    f.add_argument("--data")
    f.add_argument("--adjacency")
    f.add_argument("--config")
    f.add_argument("--trees", type=int)
    f.add_argument("--soft", action="store_true", default=None)
    f.add_argument("--hard", dest="soft", action="store_false")
    f.add_argument("--sparse", action="store_true", default=None)
    f.add_argument("--dense", dest="sparse", action="store_false")
    f.add_argument("--burn", type=int)
    f.add_argument("--save", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--progress", type=int, default=0, help="log every N iterations")
    f.add_argument("--force", action="store_true", help="overwrite an output directory built from other inputs")
    common(f)
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("ale", help="effect curves from a posterior store")
    a.add_argument("--store", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--mode", choices=["ale1", "ale2", "pd", "fixed", "decile"], default="ale1")
    a.add_argument("--exposure")
    a.add_argument("--exposure2")
    a.add_argument("--bins", type=int, default=40)
    a.add_argument("--trim", type=float, default=None, help="display fraction (ale1 default 0.95)")
    a.add_argument("--reference", default="median", help="'median' or a CSV with one row of exposures")
    a.add_argument("--add-main", action="store_true", help="ale2: add both first-order curves")
    a.add_argument("--region-column", default="region_id")
    common(a)
    a.set_defaults(func=cmd_ale)

    w = sub.add_parser("waic", help="WAIC of a posterior store")
    w.add_argument("--store", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--region-column", default="region_id")
    common(w)
    w.set_defaults(func=cmd_waic)

    s = sub.add_parser("simulate", help="run the simulation study grid")
    s.add_argument("--config")
    s.add_argument("--replicates", type=int)
    s.add_argument("--burn", type=int)
    s.add_argument("--save", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--keep-fits", action="store_true", help="cache per-replicate summaries under OUT/fits")
    s.add_argument("--force", action="store_true")
    common(s)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MixbartError as e:
        print(f"mixbart {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"mixbart {args.command}: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
