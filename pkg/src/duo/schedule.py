"""Noise schedules and the diffusion transformation operator.

Two coupled noise processes are parameterized here. The Gaussian process
carries a signal level ``alpha_tilde`` in [0, 1] with noise scale
``sigma_tilde = sqrt(1 - alpha_tilde**2)``. The discrete process carries a
mixing level ``alpha`` in [0, 1]. The two are linked by the transformation
operator

    T_K(alpha_tilde) = K/(K-1) * ( E - 1/K ),
    E = integral phi(z - alpha_tilde/sigma_tilde) * Phi(z)**(K-1) dz,

which is the probability that the signal coordinate of a noisy K-vector
wins the argmax, rescaled so that T_K(0) = 0 and T_K(1) = 1. ``E`` is
evaluated by adaptive composite Simpson quadrature in the log domain
(``exp(log phi + (K-1) log Phi)``); in linear space ``Phi**(K-1)``
underflows catastrophically for vocabulary sizes in the tens of thousands.

All arithmetic is float64. Tables are immutable after construction and safe
to share across threads.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

# Quadrature window half-width around the integrand center; phi is below
# 1e-31 outside it, so truncation error is negligible at rel_tol >= 1e-12.
_WINDOW = 12.0
_N0 = 256          # intervals at the coarsest Simpson level
_N_MAX = 65536     # intervals at the finest level before giving up
# Above this signal level the winner probability is 1 to within less than
# 1e-50000 (the noise maximum would need a > 500 sigma excursion).
_SATURATION = 1.0 - 1e-6

TABLE_MAGIC = b"DUOTBL1"


class QuadratureError(RuntimeError):
    """Raised when the Simpson refinement fails to reach the tolerance.

    ``achieved`` holds the worst relative change between the last two
    refinement levels; ``where`` holds the offending abscissas.
    """

    def __init__(self, message, achieved, where=None):
        super().__init__(message)
        self.achieved = achieved
        self.where = where


def transform_many(alpha_tilde, K, rel_tol=1e-8):
    """Evaluate T_K at an array of alpha_tilde values.

    Adaptive composite Simpson on z in [c - 12, c + 12] with
    c = max(alpha_tilde/sigma_tilde, Phi^{-1}(1 - 1/K)), refined by interval
    doubling until two consecutive levels agree to ``rel_tol``. Nodes sit on
    an absolute grid (integer multiples of the finest step), so results do
    not depend on how the input is chunked.
    """
    if K < 2:
        raise ValueError(f"vocab size must be >= 2, got {K}")
    if rel_tol <= 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    at = np.asarray(alpha_tilde, dtype=np.float64)
    if np.any((at < 0.0) | (at > 1.0)):
        raise ValueError("alpha_tilde must lie in [0, 1]")
    scalar = at.ndim == 0
    at = np.atleast_1d(at)
    out = np.empty(at.shape, dtype=np.float64)
    saturated = at >= _SATURATION
    out[saturated] = 1.0
    a = at[~saturated]
    if a.size:
        integral = _winner_integral(a, K, rel_tol)
        tval = K / (K - 1.0) * (integral - 1.0 / K)
        out[~saturated] = np.clip(tval, 0.0, 1.0)
    if scalar:
        return float(out[0])
    return out


def transform(alpha_tilde, K, rel_tol=1e-8):
    """Scalar T_K(alpha_tilde); see transform_many."""
    return float(transform_many(np.float64(alpha_tilde), K, rel_tol))


def _winner_integral(a, K, rel_tol):
    """E[signal coordinate wins the argmax] for each level in ``a``."""
    sigma = np.sqrt((1.0 - a) * (1.0 + a))
    m = a / sigma
    c = np.maximum(m, ndtri(1.0 - 1.0 / K))

    h_fine = 2.0 * _WINDOW / _N_MAX
    lo_idx = np.round((c - _WINDOW) / h_fine).astype(np.int64)
    gmin = int(lo_idx.min())
    gmax = int(lo_idx.max()) + _N_MAX
    zg = np.arange(gmin, gmax + 1, dtype=np.int64) * h_fine
    log_phi_pow = (K - 1) * log_ndtr(zg)

    result = np.empty(a.size, dtype=np.float64)
    active = np.arange(a.size)
    s_prev = None
    last_rel = None
    n = _N0
    while n <= _N_MAX:
        stride = _N_MAX // n
        node_idx = lo_idx[active, None] + stride * np.arange(n + 1)[None, :]
        z = node_idx * h_fine
        g = log_phi_pow[node_idx - gmin] - 0.5 * (z - m[active, None]) ** 2 - LOG_SQRT_2PI
        v = np.exp(g)
        h = 2.0 * _WINDOW / n
        s = h / 3.0 * (
            v[:, 0] + v[:, -1] + 4.0 * v[:, 1::2].sum(axis=1) + 2.0 * v[:, 2:-1:2].sum(axis=1)
        )
        if s_prev is not None:
            rel = np.abs(s - s_prev) / (np.abs(s) + 1e-300)
            ok = rel <= rel_tol
            result[active[ok]] = s[ok]
            active = active[~ok]
            s_prev = s[~ok]
            last_rel = rel[~ok]
            if active.size == 0:
                return result
        else:
            s_prev = s
        n *= 2
    raise QuadratureError(
        f"Simpson refinement did not converge to rel_tol={rel_tol} "
        f"for {active.size} point(s)",
        achieved=float(last_rel.max()) if last_rel is not None else np.inf,
        where=a[active],
    )


def transform_derivative(alpha_tilde, K, rel_tol=1e-8, step=1e-5):
    """dT_K/d(alpha_tilde) by central finite difference.

    The interior-only restriction mirrors the singular endpoint behavior:
    within 1e-6 of 0 or 1 the caller must handle the boundary itself.
    """
    at = float(alpha_tilde)
    eps = 1e-6
    if at <= eps or at >= 1.0 - eps:
        raise ValueError(f"alpha_tilde={at} is within {eps} of an endpoint")
    h = min(step, 0.5 * at, 0.5 * (1.0 - at))
    hi, lo = transform_many(np.array([at + h, at - h]), K, rel_tol)
    return float((hi - lo) / (2.0 * h))


# --------------------------------------------------------------------------
# Cached transform tables


@dataclass(frozen=True)
class TransformTable:
    """Cached monotone (alpha_tilde, T_K(alpha_tilde)) pairs.

    ``grid`` is strictly increasing in [0, 1]; ``values`` are nondecreasing
    and clamped to [0, 1] exactly. Lookup interpolates linearly; invert runs
    a binary search on the values followed by local linear inversion.
    """

    vocab_size: int
    grid: np.ndarray
    values: np.ndarray
    quad_tolerance: float

    def __post_init__(self):
        self.grid.setflags(write=False)
        self.values.setflags(write=False)

    def validate(self):
        g, v = self.grid, self.values
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ValueError("table must hold two aligned 1-d arrays of size >= 2")
        if not np.all(np.diff(g) > 0):
            raise ValueError("table grid must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise ValueError("table values must be nondecreasing")
        if np.any((v < 0) | (v > 1)):
            raise ValueError("table values must lie in [0, 1]")
        if abs(v[0]) > 1e-6 or abs(v[-1] - 1.0) > 1e-6:
            raise ValueError("table endpoints must be 0 and 1 within 1e-6")
        return self


def _build_chunk(args):
    lo, hi, K, N, rel_tol = args
    grid = np.linspace(0.0, 1.0, N)[lo:hi]
    return lo, transform_many(grid, K, rel_tol)


def build_table(K, N, rel_tol=1e-8, jobs=1):
    """Tabulate T_K on a uniform alpha_tilde grid of N points.

    With jobs > 1 the grid is partitioned across worker processes and merged
    back by index; node placement is anchored absolutely, so results are
    identical for any partition.
    """
    if N < 2:
        raise ValueError(f"grid size must be >= 2, got {N}")
    values = np.empty(N, dtype=np.float64)
    chunk = 20_000
    spans = [(lo, min(lo + chunk, N)) for lo in range(0, N, chunk)]
    if jobs > 1 and len(spans) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for lo, vals in pool.map(
                _build_chunk, [(lo, hi, K, N, rel_tol) for lo, hi in spans]
            ):
                values[lo : lo + vals.size] = vals
    else:
        for lo, hi in spans:
            values[lo:hi] = transform_many(np.linspace(0.0, 1.0, N)[lo:hi], K, rel_tol)
    values = np.maximum.accumulate(np.clip(values, 0.0, 1.0))
    values[-1] = 1.0
    grid = np.linspace(0.0, 1.0, N)
    return TransformTable(int(K), grid, values, float(rel_tol)).validate()


def lookup(table, alpha_tilde):
    """Piecewise-linear interpolation of T_K; exact at the nodes."""
    at = np.asarray(alpha_tilde, dtype=np.float64)
    if np.any((at < 0) | (at > 1)):
        raise ValueError("alpha_tilde must lie in [0, 1]")
    out = np.interp(at, table.grid, table.values)
    return float(out) if out.ndim == 0 else out


def invert(table, target):
    """Inverse of lookup: the alpha_tilde whose interpolated T hits target.

    Binary search on the nondecreasing values, then linear inversion inside
    the bracketing segment. Flat segments return their left edge.
    """
    tv = np.asarray(target, dtype=np.float64)
    if np.any((tv < 0) | (tv > 1)):
        raise ValueError("target must lie in [0, 1]")
    g, v = table.grid, table.values
    i = np.clip(np.searchsorted(v, tv, side="left"), 1, v.size - 1)
    v0, v1 = v[i - 1], v[i]
    denom = np.where(v1 > v0, v1 - v0, 1.0)
    frac = np.clip((tv - v0) / denom, 0.0, 1.0)
    out = g[i - 1] + frac * (g[i] - g[i - 1])
    out = np.where(tv <= v[0], g[0], np.where(tv >= v[-1], g[-1], out))
    return float(out) if out.ndim == 0 else out


def lookup_derivative(table, alpha_tilde, step=1e-5):
    """Central difference of the interpolant, clipped inside [0, 1]."""
    at = np.asarray(alpha_tilde, dtype=np.float64)
    h = np.minimum(step, np.minimum(at, 1.0 - at))
    h = np.maximum(h, 0.0)
    one_sided = h <= 0
    h = np.where(one_sided, step, h)
    hi = lookup(table, np.clip(at + h, 0.0, 1.0))
    lo = lookup(table, np.clip(at - h, 0.0, 1.0))
    span = np.clip(at + h, 0.0, 1.0) - np.clip(at - h, 0.0, 1.0)
    out = (np.asarray(hi) - np.asarray(lo)) / span
    return float(out) if out.ndim == 0 else out


def save_table(path, table):
    """Write the binary cache: magic, K, N, rel_tol, grid, values (LE f64)."""
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<QQd", table.vocab_size, table.grid.size, table.quad_tolerance))
        fh.write(table.grid.astype("<f8").tobytes())
        fh.write(table.values.astype("<f8").tobytes())


def load_table(path):
    """Read a binary cache and re-validate every table invariant."""
    with open(path, "rb") as fh:
        magic = fh.read(len(TABLE_MAGIC))
        if magic != TABLE_MAGIC:
            raise ValueError(f"not a transform table file (magic {magic!r})")
        K, N, rel_tol = struct.unpack("<QQd", fh.read(24))
        raw = fh.read(2 * 8 * N)
        if len(raw) != 2 * 8 * N:
            raise ValueError("truncated transform table file")
        buf = np.frombuffer(raw, dtype="<f8")
    grid = buf[:N].astype(np.float64)
    values = buf[N:].astype(np.float64)
    return TransformTable(int(K), grid, values, float(rel_tol)).validate()


# --------------------------------------------------------------------------
# Schedules

LINEAR_DISCRETE = "linear-discrete"
LINEAR_GAUSSIAN = "linear-gaussian"
VIA_TRANSFORM = "via-transform"
_KINDS = (LINEAR_DISCRETE, LINEAR_GAUSSIAN, VIA_TRANSFORM)


@dataclass(frozen=True)
class Schedule:
    """A noise level alpha(t) on t in [0, 1] with its time derivative.

    linear-discrete and linear-gaussian both use alpha(t) = 1 - t (the
    latter is interpreted as the Gaussian signal level alpha_tilde);
    via-transform composes the cached operator with alpha_tilde(t) = 1 - t.
    """

    kind: str
    table: TransformTable | None = None
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == VIA_TRANSFORM and self.table is None:
            raise ValueError("via-transform schedule requires a table")

    @classmethod
    def linear_discrete(cls):
        return cls(LINEAR_DISCRETE)

    @classmethod
    def linear_gaussian(cls):
        return cls(LINEAR_GAUSSIAN)

    @classmethod
    def via_transform(cls, table):
        return cls(VIA_TRANSFORM, table=table)

    def alpha(self, t):
        return eval_alpha(self, t)[0]


def eval_alpha(schedule, t):
    """alpha(t) and alpha'(t) for scalar or array t.

    For via-transform, alpha'(t) = T'(alpha_tilde) * alpha_tilde'(t) by the
    chain rule, with T' taken as the central difference of the table
    interpolant (one numeric-derivative code path everywhere).
    """
    lo, hi = schedule.domain
    tt = np.asarray(t, dtype=np.float64)
    if np.any((tt < lo) | (tt > hi)):
        raise ValueError(f"t outside schedule domain [{lo}, {hi}]")
    if schedule.kind in (LINEAR_DISCRETE, LINEAR_GAUSSIAN):
        alpha = 1.0 - tt
        aprime = np.full_like(alpha, -1.0)
    else:
        at = 1.0 - tt
        alpha = np.asarray(lookup(schedule.table, at))
        aprime = -np.asarray(lookup_derivative(schedule.table, at))
    if alpha.ndim == 0:
        return float(alpha), float(aprime)
    return alpha, aprime


def sigma_tilde(alpha_tilde):
    """Noise scale sqrt(1 - alpha_tilde**2) of the Gaussian process."""
    at = np.asarray(alpha_tilde, dtype=np.float64)
    out = np.sqrt((1.0 - at) * (1.0 + at))
    return float(out) if out.ndim == 0 else out


def snr(alpha_tilde):
    """Signal-to-noise ratio alpha_tilde**2 / (1 - alpha_tilde**2)."""
    at = np.asarray(alpha_tilde, dtype=np.float64)
    out = at**2 / ((1.0 - at) * (1.0 + at))
    return float(out) if out.ndim == 0 else out


def snr_prime_linear(t):
    """d snr / dt for the linear Gaussian schedule alpha_tilde = 1 - t.

    d snr / d alpha_tilde = 2 alpha_tilde / (1 - alpha_tilde**2)**2 and
    d alpha_tilde / dt = -1, so the derivative is negative on (0, 1).
    """
    tt = np.asarray(t, dtype=np.float64)
    at = 1.0 - tt
    out = -2.0 * at / ((1.0 - at) * (1.0 + at)) ** 2
    return float(out) if out.ndim == 0 else out


def closed_form_transform_k2(alpha_tilde):
    """Exact T_2: the two-coordinate winner probability in closed form.

    With one coordinate at alpha_tilde and one at zero, both with noise
    sigma_tilde, the signal wins with probability Phi(alpha_tilde /
    (sigma_tilde * sqrt(2))), giving T_2 = 2 Phi(.) - 1.
    """
    at = np.asarray(alpha_tilde, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(at >= 1.0, np.inf, at / (sigma_tilde(at) * np.sqrt(2.0)))
    out = 2.0 * ndtr(u) - 1.0
    return float(out) if out.ndim == 0 else out
