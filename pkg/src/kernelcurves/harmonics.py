"""Spherical-harmonic combinatorics and Gauss-Gegenbauer quadrature on S^{d-1}.

Gegenbauer polynomials here are normalized so that ``Q_k(1) = 1``; with this
convention ``Q_k(x.x') = N(d,k)^{-1} sum_m Y_km(x) Y_km(x')``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal
from scipy.special import betaln

# Largest degeneracy we hand out; beyond this float64 conversion at the
# consumer loses integer meaning entirely.
_MAX_DEGENERACY = 2**1023


class DegeneracyOverflow(OverflowError):
    """Raised when N(d, k) exceeds the representable range."""


def check_dim(d: int) -> int:
    if int(d) != d or d < 3:
        raise ValueError(f"sphere dimension must be an integer >= 3, got {d!r}")
    return int(d)


def degeneracy(d: int, k: int) -> int:
    """Number of degree-``k`` spherical harmonics on S^{d-1}.

    Computed exactly as ``(2k+d-2)/k * binom(k+d-3, k-1)`` in integer
    arithmetic.
    """
    d = check_dim(d)
    if int(k) != k or k < 0:
        raise ValueError(f"degree must be a nonnegative integer, got {k!r}")
    k = int(k)
    if k == 0:
        return 1
    num = (2 * k + d - 2) * math.comb(k + d - 3, k - 1)
    n, rem = divmod(num, k)
    assert rem == 0
    if n > _MAX_DEGENERACY:
        raise DegeneracyOverflow(f"N({d},{k}) does not fit in float64 range")
    return n


def degeneracies(d: int, kmax: int) -> np.ndarray:
    """Float array ``[N(d,0), ..., N(d,kmax)]``."""
    return np.array([float(degeneracy(d, k)) for k in range(kmax + 1)])


def measure_ratio(d: int) -> float:
    """Return ``omega_{d-2} / omega_{d-1}``, i.e. 1 / int (1-z^2)^((d-3)/2) dz."""
    d = check_dim(d)
    return math.exp(-betaln(0.5, (d - 1) / 2))


def _as_unit_interval(z, tol: float = 1e-12) -> np.ndarray:
    z = np.asarray(z)
    if z.dtype != np.longdouble:
        z = z.astype(float)
    if np.any(np.abs(z) > 1 + tol):
        raise ValueError("Gegenbauer argument outside [-1, 1]")
    return np.clip(z, -1.0, 1.0)


def gegenbauer_all(d: int, kmax: int, z) -> np.ndarray:
    """Evaluate ``Q_0..Q_kmax`` at ``z``; result has shape ``(kmax+1,) + z.shape``.

    Uses the three-term recurrence written directly for the ``Q_k(1) = 1``
    normalization, ``Q_{k+1} = (2(k+mu) z Q_k - k Q_{k-1}) / (k + 2 mu)`` with
    ``mu = (d-2)/2``; this avoids the overflow of the classical ``C_k^mu``.
    """
    d = check_dim(d)
    z = _as_unit_interval(z)
    mu = (d - 2) / 2
    out = np.empty((kmax + 1,) + z.shape, dtype=z.dtype)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = z
    for k in range(1, kmax):
        out[k + 1] = (2 * (k + mu) * z * out[k] - k * out[k - 1]) / (k + 2 * mu)
    return out


def gegenbauer(d: int, k: int, z):
    """Normalized Gegenbauer polynomial ``Q_k(z)`` on S^{d-1}."""
    if int(k) != k or k < 0:
        raise ValueError(f"degree must be a nonnegative integer, got {k!r}")
    vals = gegenbauer_all(d, int(k), z)[int(k)]
    return float(vals) if vals.ndim == 0 else vals


def gegenbauer_matrix_iter(d: int, kmax: int, Z):
    """Yield ``(k, Q_k(Z))`` entrywise on a matrix of dot products.

    Only two previous matrices are held at once, so memory stays O(size(Z))
    while the total work is O(kmax * size(Z)).
    """
    d = check_dim(d)
    Z = _as_unit_interval(Z)
    mu = (d - 2) / 2
    prev = np.ones_like(Z)
    yield 0, prev
    if kmax < 1:
        return
    cur = Z.copy()
    yield 1, cur
    for k in range(1, kmax):
        nxt = (2 * (k + mu) * Z * cur - k * prev) / (k + 2 * mu)
        prev, cur = cur, nxt
        yield k + 1, cur


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss rule for the weight ``(1 - z^2)^((d-3)/2)`` on ``[-1, 1]``.

    ``nodes`` are float64 so kernels can be evaluated on them directly;
    ``weights`` are extended precision (``np.longdouble``) Christoffel weights
    computed at exactly those float64 nodes.
    """

    d: int
    order: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    def integrate(self, values):
        """Weighted sum over the last axis of ``values`` sampled at the nodes."""
        return np.asarray(values) @ self.weights

    def expectation(self, values):
        """Average under the normalized measure of ``z = x.x'`` on the sphere."""
        return self.integrate(values) * np.longdouble(measure_ratio(self.d))


def _jacobi_offdiag(d: int, r: int, dtype=float) -> np.ndarray:
    # Monic Gegenbauer family, mu = (d-2)/2: beta_n = n(n+2mu-1) / (4(n+mu)(n+mu-1)).
    mu = (d - 2) / 2
    n = np.arange(1, r, dtype=dtype)
    return np.sqrt(n * (n + 2 * mu - 1) / (4 * (n + mu) * (n + mu - 1)))


def _orthonormal_sweep(z: np.ndarray, b: np.ndarray, r: int):
    """Run the orthonormal recurrence to degree ``r`` at ``z``.

    Returns ``(sum_{n<r} p_n^2, p_r, p_r')`` with ``p_0 = 1``.
    """
    p0 = np.ones_like(z)
    p1 = z / b[0]
    d0 = np.zeros_like(z)
    d1 = np.ones_like(z) / b[0]
    sq = p0 * p0
    for k in range(1, r):
        sq += p1 * p1
        p0, p1, d0, d1 = (
            p1,
            (z * p1 - b[k - 1] * p0) / b[k],
            d1,
            (p1 + z * d1 - b[k - 1] * d0) / b[k],
        )
    return sq, p1, d1


@functools.lru_cache(maxsize=32)
def quadrature(d: int, r: int = 1000) -> QuadratureRule:
    """Build an ``r``-point Gauss-Gegenbauer rule.

    Nodes come from the Golub-Welsch eigenproblem of the Jacobi matrix and
    receive one Newton correction in extended precision.  Weights are the
    Christoffel numbers ``mass / sum_{n<r} p_n(z_i)^2`` for the orthonormal
    polynomials, which keeps the tiny weights near ``z = +-1`` accurate.
    """
    d = check_dim(d)
    if int(r) != r or r < 2:
        raise ValueError(f"quadrature order must be an integer >= 2, got {r!r}")
    r = int(r)
    try:
        nodes = eigh_tridiagonal(np.zeros(r), _jacobi_offdiag(d, r), eigvals_only=True)
    except LinAlgError as exc:
        raise RuntimeError(f"Golub-Welsch eigensolve failed for d={d}, r={r}") from exc
    if not np.all(np.isfinite(nodes)):
        raise RuntimeError(f"Golub-Welsch eigensolve failed for d={d}, r={r}")

    b = _jacobi_offdiag(d, r + 1, dtype=np.longdouble)
    z = nodes.astype(np.longdouble)
    _, pr, dpr = _orthonormal_sweep(z, b, r)
    z = z - pr / dpr
    # The weight is even, so the exact rule is symmetric.
    nodes = np.sort(z.astype(float))
    nodes = 0.5 * (nodes - nodes[::-1])

    sq, _, _ = _orthonormal_sweep(nodes.astype(np.longdouble), b, r)
    mass = np.exp(-np.longdouble(np.log(measure_ratio(d))))
    weights = mass / sq
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(d=d, order=r, nodes=nodes, weights=weights)
