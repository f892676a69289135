"""Random variate generators used by the Gibbs sampler.

Everything draws from an :class:`RngStream`, a thin wrapper around a
counter-based Philox generator keyed by ``(seed, stream_id)``.  The hot
generators (Polya-gamma, CRT) are numba kernels that take the underlying
``numpy.random.Generator`` directly, so a chain's whole draw sequence lives
in one reproducible stream.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .exceptions import DomainError, NumericalError

__all__ = [
    "RngStream",
    "as_generator",
    "draw_polya_gamma",
    "polya_gamma_mean",
    "polya_gamma_var",
    "draw_crt",
    "crt_mean",
    "draw_mvn_precision",
    "draw_mvn_canonical",
    "draw_gamma",
    "draw_inverse_gamma",
    "draw_discrete",
    "nb_log_density",
    "softplus",
    "PG_SERIES_TERMS",
]

PG_SERIES_TERMS = 200

_TRUNC = 0.64
_TRUNC_RECIP = 1.0 / 0.64
_PI2 = math.pi * math.pi


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Streams are not thread safe.  Use :meth:`substream` to hand each worker
    its own deterministic child stream.
    """

    def __init__(self, seed: int = 0, stream_id: int = 0, path: tuple = ()):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be nonnegative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, (*self.path, int(index)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, an int seed or None."""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return RngStream(0 if rng is None else int(rng)).generator


# ---------------------------------------------------------------------------
# Polya-gamma
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _pg1_mean(c):
    c = abs(c)
    if c < 1e-4:
        return 0.25 - c * c / 48.0
    return math.tanh(0.5 * c) / (2.0 * c)


@numba.njit(cache=True)
def _pg1_var(c):
    c = abs(c)
    if c < 1e-3:
        c2 = c * c
        return 1.0 / 24.0 - c2 / 120.0 + 17.0 * c2 * c2 / 13440.0
    e1 = math.exp(-c)
    denom = (1.0 + e1) * (1.0 + e1)
    # (sinh c - c) sech^2(c/2), rewritten to avoid overflow at large c
    num = 2.0 * (1.0 - e1 * e1) / denom - 4.0 * c * e1 / denom
    return num / (4.0 * c * c * c)


@numba.njit(cache=True)
def _log_norm_cdf(x):
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@numba.njit(cache=True)
def _texpon_mass(z):
    # probability of the truncated-exponential branch in Devroye's mixture
    t = _TRUNC
    fz = 0.125 * _PI2 + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _log_norm_cdf(b)
    xa = x0 + z + _log_norm_cdf(a)
    qdivp = 4.0 / math.pi * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@numba.njit(cache=True)
def _series_coef(n, x):
    k = (n + 0.5) * math.pi
    if x > _TRUNC:
        return k * math.exp(-0.5 * k * k * x)
    if x > 0.0:
        expnt = -1.5 * (math.log(0.5 * math.pi) + math.log(x)) + math.log(k) - 2.0 * (n + 0.5) * (n + 0.5) / x
        return math.exp(expnt)
    return 0.0


@numba.njit(cache=True)
def _truncated_inverse_gauss(rng, z):
    t = _TRUNC
    x = t + 1.0
    if _TRUNC_RECIP > z:
        alpha = 0.0
        while rng.random() > alpha:
            e1 = rng.standard_exponential()
            e2 = rng.standard_exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
            x = 1.0 + e1 * t
            x = t / (x * x)
            alpha = math.exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > t:
            y = rng.standard_normal()
            y *= y
            half_mu = 0.5 * mu
            mu_y = mu * y
            x = mu + half_mu * mu_y - half_mu * math.sqrt(4.0 * mu_y + mu_y * mu_y)
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
    return x


@numba.njit(cache=True)
def _pg1_devroye(rng, c):
    """Exact PG(1, c) draw by Devroye-style alternating-series rejection."""
    z = 0.5 * abs(c)
    fz = 0.125 * _PI2 + 0.5 * z * z
    p_exp = _texpon_mass(z)
    while True:
        if rng.random() < p_exp:
            x = _TRUNC + rng.standard_exponential() / fz
        else:
            x = _truncated_inverse_gauss(rng, z)
        s = _series_coef(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _series_coef(n, x)
                if y > s:
                    break


@numba.njit(cache=True)
def _pg_series(rng, b, c, n_terms):
    """Truncated gamma-series draw with a moment-matched gamma tail.

    The first ``n_terms`` series terms are drawn exactly; the remainder is
    replaced by one gamma variate whose mean and variance equal those of the
    discarded tail.
    """
    a2 = c * c / (4.0 * _PI2)
    scale = 1.0 / (2.0 * _PI2)
    total = 0.0
    head1 = 0.0
    head2 = 0.0
    for k in range(1, n_terms + 1):
        h = k - 0.5
        inv_d = 1.0 / (h * h + a2)
        total += rng.standard_gamma(b) * inv_d
        head1 += inv_d
        head2 += inv_d * inv_d
    total *= scale
    tail_mean = b * (_pg1_mean(c) - scale * head1)
    tail_var = b * (_pg1_var(c) - scale * scale * head2)
    if tail_mean > 0.0:
        if tail_var > 0.0:
            shape = tail_mean * tail_mean / tail_var
            total += rng.standard_gamma(shape) * (tail_var / tail_mean)
        else:
            total += tail_mean
    return total


@numba.njit(cache=True)
def _pg_draw(rng, b, c, n_terms):
    if b <= 4.0 and b == math.floor(b):
        out = 0.0
        for _ in range(int(b)):
            out += _pg1_devroye(rng, c)
        return out
    return _pg_series(rng, b, c, n_terms)


@numba.njit(cache=True)
def _pg_draw_many(rng, b, c, n_terms, out):
    for i in range(out.shape[0]):
        out[i] = _pg_draw(rng, b[i], c[i], n_terms)


def draw_polya_gamma(b, c, rng, size=None, n_terms: int = PG_SERIES_TERMS):
    """Draw from the Polya-gamma distribution PG(b, c).

    Integral ``b <= 4`` uses a sum of ``b`` exact PG(1, c) draws; any other
    shape uses the truncated gamma series with ``n_terms`` explicit terms.

    Parameters
    ----------
    b : float or array_like
        Shape, strictly positive.
    c : float or array_like
        Tilt; broadcast against ``b``.
    rng : RngStream or numpy.random.Generator
    size : int or tuple, optional
        Output shape when ``b`` and ``c`` are scalars.
    n_terms : int
        Number of explicit series terms.

    Returns
    -------
    float or ndarray
    """
    gen = as_generator(rng)
    b_arr = np.asarray(b, dtype=float)
    c_arr = np.asarray(c, dtype=float)
    if np.any(~(b_arr > 0)):
        raise DomainError("Polya-gamma shape b must be positive")
    shape = np.broadcast_shapes(b_arr.shape, c_arr.shape)
    if size is not None:
        shape = np.broadcast_shapes(shape, (size,) if np.isscalar(size) else tuple(size))
    bb = np.ascontiguousarray(np.broadcast_to(b_arr, shape)).ravel()
    cc = np.ascontiguousarray(np.broadcast_to(c_arr, shape)).ravel()
    out = np.empty(bb.shape[0])
    _pg_draw_many(gen, bb, cc, int(n_terms), out)
    if shape == ():
        return float(out[0])
    return out.reshape(shape)


def polya_gamma_mean(b, c):
    """Analytic mean of PG(b, c): (b / 2c) tanh(c / 2), b / 4 at c = 0."""
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-4
    safe = np.where(small, 1.0, c)
    m1 = np.where(small, 0.25 - c * c / 48.0, np.tanh(0.5 * safe) / (2.0 * safe))
    return np.asarray(b, dtype=float) * m1


def polya_gamma_var(b, c):
    """Analytic variance of PG(b, c)."""
    c_arr = np.abs(np.asarray(c, dtype=float))
    v1 = np.vectorize(_pg1_var, otypes=[float])(c_arr)
    out = np.asarray(b, dtype=float) * v1
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Chinese restaurant table
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _crt_many(rng, xi, y, out):
    for i in range(y.shape[0]):
        count = 0
        for m in range(y[i]):
            if rng.random() < xi / (xi + m):
                count += 1
        out[i] = count


def draw_crt(xi: float, y, rng):
    """Chinese restaurant table counts, CRT(xi, y), one per entry of ``y``.

    The count is a sum of independent Bernoulli(xi / (xi + m - 1)) draws for
    m = 1..y, so it is 0 for y = 0 and 1 for y = 1.
    """
    if not xi > 0:
        raise DomainError("CRT concentration must be positive")
    gen = as_generator(rng)
    y_arr = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if np.any(y_arr < 0):
        raise DomainError("CRT counts must be nonnegative")
    out = np.empty(y_arr.shape[0], dtype=np.int64)
    _crt_many(gen, float(xi), np.ascontiguousarray(y_arr.ravel()), out)
    if np.ndim(y) == 0:
        return int(out[0])
    return out.reshape(np.shape(y))


def crt_mean(xi: float, y: int) -> float:
    m = np.arange(int(y))
    return float(np.sum(xi / (xi + m)))


# ---------------------------------------------------------------------------
# Gaussian, gamma and discrete draws
# ---------------------------------------------------------------------------


def _cholesky(precision, name):
    try:
        return linalg.cholesky(precision, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"{name} is not symmetric positive definite: {exc}") from exc


def draw_mvn_precision(mean, precision, rng, name: str = "precision matrix"):
    """Draw N(mean, precision^-1) through a Cholesky factor of the precision."""
    gen = as_generator(rng)
    mean = np.asarray(mean, dtype=float)
    chol = _cholesky(np.asarray(precision, dtype=float), name)
    z = gen.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(chol.T, z, lower=False)


def draw_mvn_canonical(linear, precision, rng, name: str = "precision matrix"):
    """Draw N(P^-1 h, P^-1) given the canonical pair (h, P).

    Returns ``(draw, mean)``; the mean is reused by callers that also want
    the conditional expectation.
    """
    gen = as_generator(rng)
    chol = _cholesky(np.asarray(precision, dtype=float), name)
    mean = linalg.cho_solve((chol, True), np.asarray(linear, dtype=float))
    z = gen.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(chol.T, z, lower=False), mean


def draw_gamma(shape, rate, rng, size=None):
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
        raise DomainError("gamma shape and rate must be positive")
    return as_generator(rng).gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def draw_inverse_gamma(shape, rate, rng, size=None):
    """Inverse-gamma with density proportional to x^(-shape-1) exp(-rate/x)."""
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
        raise DomainError("inverse-gamma shape and rate must be positive")
    return np.asarray(rate, dtype=float) / as_generator(rng).gamma(shape, 1.0, size=size)


def draw_discrete(log_weights, rng) -> int:
    """Index draw with probabilities proportional to ``exp(log_weights)``."""
    lw = np.asarray(log_weights, dtype=float)
    top = np.max(lw)
    if not np.isfinite(top):
        raise DomainError("discrete draw needs at least one finite log-weight")
    probs = np.exp(lw - top)
    cdf = np.cumsum(probs)
    u = as_generator(rng).random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), lw.shape[0] - 1))


# ---------------------------------------------------------------------------
# Negative binomial density
# ---------------------------------------------------------------------------


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    return np.logaddexp(0.0, x)


def nb_log_density(y, xi, eta):
    """Log NB(y | xi, p) with p = logistic(eta).

    ``log p = -softplus(-eta)`` and ``log(1 - p) = -softplus(eta)`` keep the
    evaluation accurate for large |eta|.
    """
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return (
        gammaln(y + xi)
        - gammaln(y + 1.0)
        - gammaln(xi)
        - xi * softplus(eta)
        - y * softplus(-eta)
    )
