"""Effect summaries for a fitted exposure surface.

Every estimator here works draw by draw on a *surface source*: either a
:class:`~mixbart.nbgibbs.PosteriorStore` (the tree surface f, with its
constant offset but without confounders, random effects or population
offset) or any callable mapping an (n, q) exposure matrix to an (M, n) or
(n,) array.  Callables make the estimators testable against closed forms.

Exposure values are always on the data's original scale.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "SurfaceSource",
    "AleGrid",
    "AleResult",
    "CurveResult",
    "WaicResult",
    "EffectRow",
    "ale_grid",
    "ale_first_order",
    "ale_second_order",
    "partial_dependence",
    "fixed_profile",
    "decile_mixture_effect",
    "waic",
    "write_effects_csv",
    "read_effects_csv",
    "EFFECT_COLUMNS",
]

EFFECT_COLUMNS = ("mode", "exposure_1", "exposure_2", "grid_1", "grid_2", "mean", "lo95", "hi95", "n_bin", "flag")


class SurfaceSource:
    """Uniform (M, n) view of a surface, counting every row evaluation."""

    def __init__(self, source, draws=None):
        self.source = source
        self.draws = draws
        self.evaluations = 0

    def __call__(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if hasattr(self.source, "surface_draws"):
            out = self.source.surface_draws(Z, draws=self.draws)
        else:
            out = np.asarray(self.source(Z), dtype=float)
            if out.ndim == 1:
                out = out[None, :]
        self.evaluations += out.shape[0] * Z.shape[0]
        return out


def _source(surface, draws=None) -> SurfaceSource:
    return surface if isinstance(surface, SurfaceSource) else SurfaceSource(surface, draws)


def _summaries(draws: np.ndarray):
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    return draws.mean(axis=0), lo, hi


# ---------------------------------------------------------------------------
# ALE
# ---------------------------------------------------------------------------


@dataclass
class AleGrid:
    """Quantile bins for one exposure.

    Bin b (0-based) is ``(boundaries[b], boundaries[b + 1]]``, except that
    the first bin also contains ``boundaries[0]``.
    """

    exposure: int
    boundaries: np.ndarray
    bin_index: np.ndarray
    counts: np.ndarray
    requested_bins: int

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.boundaries)


def _assign(boundaries, z):
    return np.clip(np.searchsorted(boundaries, z, side="left") - 1, 0, len(boundaries) - 2)


def ale_grid(z, n_bins: int, exposure: int = 0) -> AleGrid:
    """Type-7 quantile boundaries with duplicates removed and empty bins merged."""
    if n_bins < 2:
        raise ValueError("ALE needs at least 2 bins")
    z = np.asarray(z, dtype=float)
    bounds = np.unique(np.quantile(z, np.linspace(0.0, 1.0, n_bins + 1), method="linear"))
    if len(bounds) < 2:
        raise ValueError(f"exposure {exposure} is constant; no ALE can be formed")
    while True:
        idx = _assign(bounds, z)
        counts = np.bincount(idx, minlength=len(bounds) - 1)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        b = empty[0]
        # merge with the next bin by dropping the shared boundary (or the previous one at the top)
        bounds = np.delete(bounds, b + 1 if b + 1 < len(bounds) - 1 else b)
    if len(bounds) - 1 < n_bins:
        warnings.warn(f"exposure {exposure}: {n_bins} bins requested, {len(bounds) - 1} distinct bins formed",
                      stacklevel=2)
    return AleGrid(exposure, bounds, idx, counts, n_bins)


@dataclass
class AleResult:
    """Per-draw ALE values with pointwise summaries.

    First order: ``draws`` has shape (M, K+1), values at the bin boundaries.
    Second order: ``draws`` has shape (M, K1+1, K2+1) on the boundary grid and
    ``cell_draws`` (M, K1, K2) holds 4-corner averages per cell.
    """

    mode: str
    exposures: tuple
    names: tuple
    grids: tuple
    draws: np.ndarray
    centering: np.ndarray
    cell_draws: np.ndarray | None = None
    cell_counts: np.ndarray | None = None
    imputed: np.ndarray | None = None
    audit: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def mean(self):
        return self.draws.mean(axis=0)

    @property
    def lo95(self):
        return np.quantile(self.draws, 0.025, axis=0)

    @property
    def hi95(self):
        return np.quantile(self.draws, 0.975, axis=0)

    def slice(self, axis: int, value: float) -> np.ndarray:
        """Uncentered per-draw slice of a second-order surface at the boundary nearest ``value``."""
        if self.mode != "ale2":
            raise ValueError("slices are defined for second-order results")
        other = self.grids[1 - axis].boundaries
        j = int(np.argmin(np.abs(other - value)))
        surf = self.draws + self.centering[:, None, None]
        return surf[:, :, j] if axis == 0 else surf[:, j, :]

    def to_rows(self, trim: float | None = None, data_z=None) -> list:
        """Tidy rows.  ``trim`` keeps grid points inside the central ``trim`` mass of ``data_z``."""
        keep = []
        for g, k in zip(self.grids, range(len(self.grids))):
            b = g.boundaries
            if trim is not None and data_z is not None:
                lo, hi = np.quantile(data_z[:, g.exposure], [(1 - trim) / 2, 1 - (1 - trim) / 2])
                keep.append((b >= lo) & (b <= hi))
            else:
                keep.append(np.ones(len(b), dtype=bool))
        rows = []
        if self.mode == "ale1":
            g = self.grids[0]
            mean, lo, hi = _summaries(self.draws)
            n_left = np.concatenate([[0], g.counts])
            for i, z in enumerate(g.boundaries):
                if keep[0][i]:
                    rows.append(EffectRow("ale1", self.names[0], None, float(z), None, float(mean[i]),
                                          float(lo[i]), float(hi[i]), int(n_left[i]), None))
            return rows
        g1, g2 = self.grids
        mean, lo, hi = _summaries(self.cell_draws)
        mid1 = 0.5 * (g1.boundaries[:-1] + g1.boundaries[1:])
        mid2 = 0.5 * (g2.boundaries[:-1] + g2.boundaries[1:])
        k1 = keep[0][:-1] & keep[0][1:]
        k2 = keep[1][:-1] & keep[1][1:]
        for a in range(g1.n_bins):
            for b in range(g2.n_bins):
                if k1[a] and k2[b]:
                    rows.append(EffectRow("ale2", self.names[0], self.names[1], float(mid1[a]), float(mid2[b]),
                                          float(mean[a, b]), float(lo[a, b]), float(hi[a, b]),
                                          int(self.cell_counts[a, b]), "imputed" if self.imputed[a, b] else None))
        return rows


def _names(names, q):
    return tuple(names) if names is not None else tuple(f"z_{k + 1}" for k in range(q))


def ale_first_order(surface, Z, k: int, n_bins: int = 40, names=None, draws=None) -> AleResult:
    """First-order ALE of exposure ``k`` (accumulated from the exposure minimum, then centered)."""
    Z = np.asarray(Z, dtype=float)
    src = _source(surface, draws)
    grid = ale_grid(Z[:, k], n_bins, k)
    lower = grid.boundaries[grid.bin_index]
    upper = grid.boundaries[grid.bin_index + 1]
    Z_lo, Z_hi = Z.copy(), Z.copy()
    Z_lo[:, k] = lower
    Z_hi[:, k] = upper
    diff = src(Z_hi) - src(Z_lo)
    n = Z.shape[0]
    # per-bin mean difference, vectorized over draws
    sums = np.zeros((diff.shape[0], grid.n_bins))
    np.add.at(sums.T, grid.bin_index, diff.T)
    local = sums / grid.counts
    acc = np.concatenate([np.zeros((diff.shape[0], 1)), np.cumsum(local, axis=1)], axis=1)
    centering = ((acc[:, :-1] + acc[:, 1:]) / 2) @ grid.counts / n
    width = grid.widths[grid.bin_index]
    out_of_bin = int(np.sum(np.abs(Z[:, k] - lower) > width) + np.sum(np.abs(upper - Z[:, k]) > width))
    return AleResult(
        "ale1", (k,), (_names(names, Z.shape[1])[k],), (grid,), acc - centering[:, None], centering,
        audit={"evaluations": 2 * n * diff.shape[0], "out_of_bin": out_of_bin},
        meta={"surface": "tree surface only; confounders, random effects and offsets excluded"})


def _nearest_fill(values, counts):
    """Fill empty cells from the nearest nonempty cell in (row, col) index space."""
    empty = counts == 0
    if not empty.any():
        return values, empty
    full = np.argwhere(~empty)
    for a, b in np.argwhere(empty):
        d = (full[:, 0] - a) ** 2 + (full[:, 1] - b) ** 2
        src = full[np.argmin(d)]
        values[:, a, b] = values[:, src[0], src[1]]
    return values, empty


def ale_second_order(surface, Z, k: int, l: int, n_bins: int = 40, names=None, draws=None,
                     add_main_effects: bool = False) -> AleResult:
    """Pure second-order (interaction) ALE for exposures ``k`` and ``l``.

    Main effects are removed and the surface is centered to zero
    count-weighted mean.  With ``add_main_effects=True`` the first-order
    curves of both exposures are added back.
    """
    if k == l:
        raise ValueError("second-order ALE needs two distinct exposures")
    Z = np.asarray(Z, dtype=float)
    src = _source(surface, draws)
    g1 = ale_grid(Z[:, k], n_bins, k)
    g2 = ale_grid(Z[:, l], n_bins, l)
    K1, K2 = g1.n_bins, g2.n_bins
    i1, i2 = g1.bin_index, g2.bin_index
    corner = {}
    for da in (0, 1):
        for db in (0, 1):
            Zc = Z.copy()
            Zc[:, k] = g1.boundaries[i1 + da]
            Zc[:, l] = g2.boundaries[i2 + db]
            corner[da, db] = src(Zc)
    delta = corner[1, 1] - corner[0, 1] - corner[1, 0] + corner[0, 0]
    M = delta.shape[0]
    cell = i1 * K2 + i2
    counts = np.bincount(cell, minlength=K1 * K2).reshape(K1, K2)
    sums = np.zeros((M, K1 * K2))
    np.add.at(sums.T, cell, delta.T)
    with np.errstate(invalid="ignore", divide="ignore"):
        local = (sums / counts.reshape(-1)).reshape(M, K1, K2)
    local, imputed = _nearest_fill(local, counts)

    F = np.zeros((M, K1 + 1, K2 + 1))
    F[:, 1:, 1:] = np.cumsum(np.cumsum(local, axis=1), axis=2)
    # remove the accumulated first-order effect of each exposure
    dk = F[:, 1:, :] - F[:, :-1, :]  # (M, K1, K2+1)
    row_n = counts.sum(axis=1)
    h1 = np.einsum("mab,ab->ma", (dk[:, :, :-1] + dk[:, :, 1:]) / 2, counts) / np.where(row_n, row_n, 1)
    dl = F[:, :, 1:] - F[:, :, :-1]  # (M, K1+1, K2)
    col_n = counts.sum(axis=0)
    h2 = np.einsum("mab,ab->mb", (dl[:, :-1, :] + dl[:, 1:, :]) / 2, counts) / np.where(col_n, col_n, 1)
    F -= np.concatenate([np.zeros((M, 1)), np.cumsum(h1, axis=1)], axis=1)[:, :, None]
    F -= np.concatenate([np.zeros((M, 1)), np.cumsum(h2, axis=1)], axis=1)[:, None, :]
    cells = (F[:, :-1, :-1] + F[:, 1:, :-1] + F[:, :-1, 1:] + F[:, 1:, 1:]) / 4
    centering = np.einsum("mab,ab->m", cells, counts) / Z.shape[0]
    F -= centering[:, None, None]
    cells = cells - centering[:, None, None]
    composition = "interaction only"
    if add_main_effects:
        a1 = ale_first_order(src, Z, k, n_bins).draws
        a2 = ale_first_order(src, Z, l, n_bins).draws
        F = F + a1[:, :, None] + a2[:, None, :]
        cells = cells + ((a1[:, :-1] + a1[:, 1:]) / 2)[:, :, None] + ((a2[:, :-1] + a2[:, 1:]) / 2)[:, None, :]
        composition = "interaction plus both first-order ALE curves"
    nm = _names(names, Z.shape[1])
    out_of_bin = 0
    for g, col in ((g1, k), (g2, l)):
        w = g.widths[g.bin_index]
        out_of_bin += int(np.sum(Z[:, col] - g.boundaries[g.bin_index] > w)
                          + np.sum(g.boundaries[g.bin_index + 1] - Z[:, col] > w))
    return AleResult(
        "ale2", (k, l), (nm[k], nm[l]), (g1, g2), F, centering, cell_draws=cells, cell_counts=counts,
        imputed=imputed, audit={"evaluations": 4 * Z.shape[0] * M, "out_of_bin": out_of_bin},
        meta={"composition": composition, "slices": "uncentered",
              "surface": "tree surface only; confounders, random effects and offsets excluded"})


# ---------------------------------------------------------------------------
# PD, fixed profiles, decile curve
# ---------------------------------------------------------------------------


@dataclass
class CurveResult:
    mode: str
    names: tuple
    grid: np.ndarray
    draws: np.ndarray
    evaluations: int = 0
    meta: dict = field(default_factory=dict)

    def to_rows(self) -> list:
        mean, lo, hi = _summaries(self.draws)
        e2 = self.names[1] if len(self.names) > 1 else None
        return [EffectRow(self.mode, self.names[0], e2, float(g), None, float(m), float(a), float(b), None, None)
                for g, m, a, b in zip(self.grid, mean, lo, hi)]


def partial_dependence(surface, Z, k: int, grid, names=None, draws=None) -> CurveResult:
    """Mean over all rows of f(z, Z_row,-k) for every grid value z, per draw."""
    Z = np.asarray(Z, dtype=float)
    src = _source(surface, draws)
    grid = np.asarray(grid, dtype=float)
    before = src.evaluations
    cols = []
    for g in grid:
        Zg = Z.copy()
        Zg[:, k] = g
        cols.append(src(Zg).mean(axis=1))
    return CurveResult("pd", (_names(names, Z.shape[1])[k],), grid, np.stack(cols, axis=1),
                       src.evaluations - before)


def fixed_profile(surface, k: int, grid, reference, names=None, draws=None) -> CurveResult:
    """f(z, reference_-k) per draw along ``grid``."""
    reference = np.asarray(reference, dtype=float)
    if not np.all(np.isfinite(reference)):
        raise ValueError("reference profile must be complete")
    src = _source(surface, draws)
    grid = np.asarray(grid, dtype=float)
    Zg = np.tile(reference, (len(grid), 1))
    Zg[:, k] = grid
    before = src.evaluations
    out = src(Zg)
    return CurveResult("fixed", (_names(names, len(reference))[k],), grid, out, src.evaluations - before,
                       meta={"reference": reference.tolist()})


def decile_mixture_effect(surface, Z, names=None, draws=None) -> CurveResult:
    """Relative risk of setting every exposure to decile d versus all at their medians.

    ``draws`` of the result hold RR per draw for d = 0.1, ..., 0.9.
    """
    Z = np.asarray(Z, dtype=float)
    src = _source(surface, draws)
    levels = np.round(np.arange(1, 10) / 10, 10)
    profiles = np.quantile(Z, levels, axis=0)
    profiles[4] = np.median(Z, axis=0)
    before = src.evaluations
    f = src(profiles)
    rr = np.exp(f - f[:, [4]])
    return CurveResult("decile", ("all",), levels, rr, src.evaluations - before,
                       meta={"scale": "relative risk versus all-median profile"})


# ---------------------------------------------------------------------------
# WAIC
# ---------------------------------------------------------------------------


@dataclass
class WaicResult:
    waic: float
    lppd: float
    p_waic: float
    lppd_i: np.ndarray
    p_waic_i: np.ndarray

    @property
    def waic_i(self) -> np.ndarray:
        return -2.0 * (self.lppd_i - self.p_waic_i)


def waic(log_lik) -> WaicResult:
    """WAIC from an (M draws, n rows) pointwise log-likelihood matrix."""
    ll = np.asarray(log_lik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("log-likelihood matrix must be (draws, rows)")
    M = ll.shape[0]
    if M < 2:
        raise ValueError("WAIC needs at least two posterior draws")
    lppd_i = logsumexp(ll, axis=0) - math.log(M)
    p_i = ll.var(axis=0, ddof=1)
    lppd, p = float(lppd_i.sum()), float(p_i.sum())
    return WaicResult(-2.0 * (lppd - p), lppd, p, lppd_i, p_i)


# ---------------------------------------------------------------------------
# Tidy CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectRow:
    mode: str
    exposure_1: str | None
    exposure_2: str | None
    grid_1: float | None
    grid_2: float | None
    mean: float
    lo95: float
    hi95: float
    n_bin: int | None
    flag: str | None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_effects_csv(rows, path_or_file):
    """Write tidy effect rows.  Floats use ``repr`` so reading them back is exact."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EFFECT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in EFFECT_COLUMNS])
    finally:
        if own:
            fh.close()


def read_effects_csv(path_or_file) -> list:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, newline="") if own else path_or_file
    try:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EFFECT_COLUMNS:
            raise ValueError(f"unexpected effect CSV header {reader.fieldnames}")
        out = []
        for r in reader:
            opt = lambda s, f: None if s == "" else f(s)
            out.append(EffectRow(r["mode"], opt(r["exposure_1"], str), opt(r["exposure_2"], str),
                                 opt(r["grid_1"], float), opt(r["grid_2"], float), float(r["mean"]),
                                 float(r["lo95"]), float(r["hi95"]), opt(r["n_bin"], int), opt(r["flag"], str)))
        return out
    finally:
        if own:
            fh.close()
