"""Proper CAR random intercepts: structure, and Gibbs updates for nu, tau2, rho."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import StructureError
from .randkit import draw_discrete, draw_inverse_gamma, draw_mvn_canonical

__all__ = [
    "CarStructure",
    "SpatialState",
    "read_edge_list",
    "lattice_adjacency",
    "update_nu",
    "update_tau2",
    "update_rho",
    "rho_log_weights",
    "sample_car_prior",
]

RHO_GRID_SIZE = 1000


@dataclass(frozen=True, eq=False)
class CarStructure:
    """Immutable region graph with the eigen-tables needed by the rho update.

    Attributes
    ----------
    adjacency : (I, I) ndarray
        Symmetric 0/1 matrix with zero diagonal.
    degree : (I,) ndarray
        Row sums of ``adjacency`` (the diagonal of D).
    eigenvalues : (I,) ndarray
        Eigenvalues of D^-1 W, ascending.
    rho_grid : (1000,) ndarray
        Candidate rho values 0/999, ..., 999/999.
    log_det_terms : (1000,) ndarray
        sum_i log(1 - rho * lambda_i) per grid value, -inf where undefined.
    region_ids : tuple
        Region labels in matrix order.
    """

    adjacency: np.ndarray
    degree: np.ndarray
    eigenvalues: np.ndarray
    rho_grid: np.ndarray
    log_det_terms: np.ndarray
    region_ids: tuple = field(default=())

    @classmethod
    def from_adjacency(cls, adjacency, region_ids=None) -> "CarStructure":
        w = np.asarray(adjacency, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise StructureError("adjacency must be a square matrix")
        n = w.shape[0]
        if region_ids is None:
            region_ids = tuple(range(n))
        if len(region_ids) != n:
            raise StructureError("region_ids length does not match adjacency")
        if np.any(np.diag(w) != 0):
            raise StructureError("adjacency has self loops")
        if not np.array_equal(w, w.T):
            raise StructureError("adjacency is not symmetric")
        if not np.all((w == 0) | (w == 1)):
            raise StructureError("adjacency entries must be 0 or 1")
        degree = w.sum(axis=1)
        isolated = [region_ids[i] for i in np.flatnonzero(degree == 0)]
        if isolated:
            raise StructureError(f"regions without neighbors: {isolated}")
        n_comp, labels = connected_components(csr_matrix(w), directed=False)
        if n_comp > 1:
            groups = [[region_ids[i] for i in np.flatnonzero(labels == k)] for k in range(n_comp)]
            raise StructureError(f"region graph is disconnected into {n_comp} components: {groups}")
        # D^-1 W is similar to the symmetric D^-1/2 W D^-1/2
        inv_sqrt = 1.0 / np.sqrt(degree)
        eig = np.linalg.eigvalsh(w * inv_sqrt[:, None] * inv_sqrt[None, :])
        grid = np.arange(RHO_GRID_SIZE) / (RHO_GRID_SIZE - 1)
        one_minus = 1.0 - np.outer(grid, eig)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(
                np.all(one_minus > 1e-12, axis=1),
                np.sum(np.log(np.clip(one_minus, 1e-300, None)), axis=1),
                -np.inf,
            )
        for arr in (w, degree, eig, grid, terms):
            arr.setflags(write=False)
        return cls(w, degree, eig, grid, terms, tuple(region_ids))

    @classmethod
    def from_edges(cls, edges, region_ids) -> "CarStructure":
        """Build from (a, b) label pairs; each edge is symmetrized."""
        index = {r: i for i, r in enumerate(region_ids)}
        w = np.zeros((len(region_ids), len(region_ids)))
        for a, b in edges:
            if a not in index or b not in index:
                missing = a if a not in index else b
                raise StructureError(f"edge references unknown region {missing!r}")
            if a == b:
                raise StructureError(f"self loop on region {a!r}")
            w[index[a], index[b]] = w[index[b], index[a]] = 1.0
        return cls.from_adjacency(w, tuple(region_ids))

    @property
    def n_regions(self) -> int:
        return self.adjacency.shape[0]

    def precision(self, rho: float) -> np.ndarray:
        """D - rho W (the prior precision up to the 1 / tau2 factor)."""
        return np.diag(self.degree) - rho * self.adjacency

    def quad_form(self, nu, rho: float) -> float:
        nu = np.asarray(nu, dtype=float)
        return float(nu @ (self.degree * nu) - rho * nu @ self.adjacency @ nu)

    def grid_index(self, rho: float) -> int:
        return int(np.argmin(np.abs(self.rho_grid - rho)))


@dataclass
class SpatialState:
    nu: np.ndarray
    tau2: float
    rho: float

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        if not self.tau2 > 0:
            raise ValueError("tau2 must be positive")


def read_edge_list(path):
    """Parse a ``region_a,region_b`` edge file.  Blank lines and '#' comments are skipped."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise StructureError(f"{path}:{lineno}: expected 'region_a,region_b'")
            edges.append((parts[0], parts[1]))
    return edges


def lattice_adjacency(n_rows: int, n_cols: int) -> np.ndarray:
    """Rook adjacency for an n_rows x n_cols grid, regions numbered row-major."""
    n = n_rows * n_cols
    w = np.zeros((n, n))
    for r in range(n_rows):
        for c in range(n_cols):
            i = r * n_cols + c
            if c + 1 < n_cols:
                w[i, i + 1] = w[i + 1, i] = 1
            if r + 1 < n_rows:
                w[i, i + n_cols] = w[i + n_cols, i] = 1
    return w


def update_nu(state: SpatialState, car: CarStructure, omega_sum, weighted_resid_sum, rng):
    """Gibbs draw of the random intercepts.

    ``omega_sum[i]`` is the sum of PG weights over region i's rows and
    ``weighted_resid_sum[i]`` the sum of omega * r^nu over the same rows, so
    the data term of the posterior precision is diagonal.

    Returns the new nu and its conditional mean.
    """
    prec = car.precision(state.rho) / state.tau2 + np.diag(np.asarray(omega_sum, dtype=float))
    nu, mean = draw_mvn_canonical(weighted_resid_sum, prec, rng, name="nu posterior precision")
    return nu, mean


def update_tau2(nu, car: CarStructure, rho: float, shape: float, rate: float, rng) -> float:
    """Inverse-gamma draw with shape a + I/2 and rate b + nu'(D - rho W)nu / 2."""
    post_shape = shape + 0.5 * car.n_regions
    post_rate = rate + 0.5 * car.quad_form(nu, rho)
    return float(draw_inverse_gamma(post_shape, post_rate, rng))


def rho_log_weights(nu, car: CarStructure, tau2: float) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    nwn = float(nu @ car.adjacency @ nu)
    return 0.5 * car.log_det_terms + car.rho_grid * nwn / (2.0 * tau2)


def update_rho(nu, car: CarStructure, tau2: float, rng) -> float:
    """Draw rho from its discrete posterior over the 1000-point grid."""
    return float(car.rho_grid[draw_discrete(rho_log_weights(nu, car, tau2), rng)])


def sample_car_prior(car: CarStructure, tau2: float, rho: float, rng) -> np.ndarray:
    """nu ~ MVN(0, tau2 (D - rho W)^-1)."""
    nu, _ = draw_mvn_canonical(np.zeros(car.n_regions), car.precision(rho) / tau2, rng,
                               name="CAR prior precision")
    return nu
