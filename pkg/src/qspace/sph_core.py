"""Special functions and quadrature kernels.

Fully normalized associated Legendre functions and complex spherical
harmonics, generalized Laguerre polynomials of order 1/2, the Gauss-Laguerre
radial functions of the spherical polar Fourier (SPF) basis, Gauss-Laguerre
quadrature rules and the Laplace-Beltrami penalty diagonal.

Coefficient vectors over even degrees use the flat ordering
``[c_0^0, c_2^-2, c_2^-1, c_2^0, c_2^1, c_2^2, ..., c_L^L]``; see
:func:`sh_flat_index`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

ALPHA = 0.5  # order of the generalized Laguerre polynomials


class QuadratureError(RuntimeError):
    """Raised when the Laguerre root finder does not converge."""


# ---------------------------------------------------------------------------
# Index bookkeeping
# ---------------------------------------------------------------------------


def n_sh_coeffs(L: int) -> int:
    """Number of even-degree SH coefficients up to band-limit ``L``."""
    return (L + 1) * (L + 2) // 2


def _check_even(L):
    if L < 0 or L % 2:
        raise ValueError(f"band-limit must be a non-negative even integer, got {L}")


def sh_flat_index(ell, m):
    """Flat position of ``(ell, m)`` in an even-degree coefficient vector."""
    ell = np.asarray(ell)
    m = np.asarray(m)
    if np.any(ell % 2) or np.any(np.abs(m) > ell):
        raise ValueError("flat index requires even ell and |m| <= ell")
    idx = ell * (ell + 1) // 2 + m
    return int(idx) if idx.ndim == 0 else idx


def sh_indices(L: int):
    """Degree and order arrays for the flat even-degree ordering up to ``L``."""
    _check_even(L)
    ell = np.concatenate([np.full(2 * l + 1, l) for l in range(0, L + 1, 2)])
    m = np.concatenate([np.arange(-l, l + 1) for l in range(0, L + 1, 2)])
    return ell, m


@dataclass(frozen=True)
class ShIndex:
    ell: int
    m: int

    def __post_init__(self):
        if self.ell < 0 or abs(self.m) > self.ell:
            raise ValueError(f"invalid SH index ({self.ell}, {self.m})")

    @property
    def flat(self) -> int:
        return sh_flat_index(self.ell, self.m)

    @classmethod
    def from_flat(cls, idx: int) -> "ShIndex":
        ell = 0
        while (ell + 2) * (ell + 3) // 2 - (ell + 2) <= idx:
            ell += 2
        return cls(ell, idx - ell * (ell + 1) // 2)


# ---------------------------------------------------------------------------
# Legendre functions and spherical harmonics
# ---------------------------------------------------------------------------


def legendre_table(lmax: int, theta):
    """Normalized associated Legendre values for ``0 <= m <= ell <= lmax``.

    Returns an array of shape ``(lmax + 1, lmax + 1) + theta.shape`` whose
    ``[ell, m]`` entry is ``Y_ell^m(theta, 0)`` (Condon-Shortley phase
    included). Entries with ``m > ell`` are zero.

    Uses the standard ascending-degree recurrence on the fully normalized
    functions, so no factorial ratios are ever formed.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.cos(theta)
    s = np.sin(theta)
    out = np.zeros((lmax + 1, lmax + 1) + theta.shape)
    pmm = np.full(theta.shape, 1.0 / math.sqrt(4.0 * math.pi))
    for m in range(lmax + 1):
        if m > 0:
            pmm = -math.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        out[m, m] = pmm
        if m + 1 > lmax:
            continue
        out[m + 1, m] = math.sqrt(2.0 * m + 3.0) * x * pmm
        for ell in range(m + 2, lmax + 1):
            a = math.sqrt((4.0 * ell * ell - 1.0) / (ell * ell - m * m))
            b = math.sqrt(
                (2.0 * ell + 1.0) * ((ell - 1.0) ** 2 - m * m)
                / ((2.0 * ell - 3.0) * (ell * ell - m * m))
            )
            out[ell, m] = a * x * out[ell - 1, m] - b * out[ell - 2, m]
    return out


def assoc_legendre_norm(ell: int, m: int, theta):
    """``Y_ell^m(theta, 0)``: the SH normalization applied to ``P_ell^m``."""
    if abs(m) > ell or ell < 0:
        raise ValueError(f"|m| must not exceed ell (got ell={ell}, m={m})")
    val = legendre_table(ell, theta)[ell, abs(m)]
    if m < 0 and m % 2:
        val = -val
    return val


def ylm(ell: int, m: int, theta, phi):
    """Complex orthonormal spherical harmonic ``Y_ell^m(theta, phi)``."""
    return assoc_legendre_norm(ell, m, theta) * np.exp(1j * m * np.asarray(phi))


def sh_matrix(L: int, theta, phi):
    """Matrix of even-degree SH sampled at ``(theta, phi)``.

    Shape ``(n_points, n_sh_coeffs(L))`` in flat coefficient order.
    """
    _check_even(L)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    table = legendre_table(L, theta)
    ell, m = sh_indices(L)
    plm = table[ell, np.abs(m)]
    sign = np.where((m < 0) & (m % 2 == 1), -1.0, 1.0)
    return (sign[:, None] * plm).T * np.exp(1j * np.outer(phi, m))


# ---------------------------------------------------------------------------
# Radial basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialBasisSpec:
    """Radial order ``N`` and scale ``zeta`` (b-value units, b = q**2)."""

    N: int
    zeta: float

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("radial order must be >= 0")
        if not (np.isfinite(self.zeta) and self.zeta > 0):
            raise ValueError("zeta must be finite and positive")


def laguerre_half(n: int, x, alpha: float = ALPHA):
    """Generalized Laguerre polynomial ``L_n^alpha(x)`` by three-term recurrence."""
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if n == 0:
        return prev
    cur = 1.0 + alpha - x
    for k in range(1, n):
        prev, cur = cur, ((2 * k + 1 + alpha - x) * cur - (k + alpha) * prev) / (k + 1)
    return cur


def _laguerre_pair(n, x, alpha=ALPHA):
    """``(L_n, L_{n-1})`` at ``x``; used for derivatives."""
    return laguerre_half(n, x, alpha), laguerre_half(n - 1, x, alpha)


def radial_norm(n: int, zeta: float) -> float:
    return math.exp(
        0.5 * (math.log(2.0) - 1.5 * math.log(zeta) + gammaln(n + 1) - gammaln(n + 1.5))
    )


def radial_Rn(n: int, q, spec: RadialBasisSpec):
    """Gauss-Laguerre radial function ``R_n(q)``, orthonormal under ``q**2 dq``."""
    q = np.asarray(q, dtype=float)
    x = q * q / spec.zeta
    return radial_norm(n, spec.zeta) * np.exp(-0.5 * x) * laguerre_half(n, x)


def radial_matrix(N: int, q, spec: RadialBasisSpec):
    """``R_n(q)`` for ``n = 0..N``; shape ``(len(q), N + 1)``."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    return np.stack([radial_Rn(n, q, spec) for n in range(N + 1)], axis=-1)


# ---------------------------------------------------------------------------
# Gauss-Laguerre quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes ``x_s`` (roots of ``L_{N+1}^{1/2}``) and radial weights ``w_s``."""

    nodes: np.ndarray
    weights: np.ndarray
    zeta: float

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    @property
    def q(self) -> np.ndarray:
        return np.sqrt(self.zeta * self.nodes)

    @property
    def b(self) -> np.ndarray:
        return self.zeta * self.nodes


def laguerre_roots(n: int, alpha: float = ALPHA, tol: float = 1e-14, maxiter: int = 100):
    """Roots of ``L_n^alpha`` in ascending order.

    The roots of successive degrees interlace, so the roots of degree ``k - 1``
    bracket those of degree ``k``; each root is polished by Newton steps that
    fall back to bisection whenever a step leaves its bracket.
    """
    if n < 1:
        return np.zeros(0)
    roots = np.array([1.0 + alpha])
    for k in range(2, n + 1):
        upper = 2.0 * k + alpha + 1.0 + math.sqrt((2.0 * k + alpha + 1.0) ** 2 + 0.25 - alpha**2)
        edges = np.concatenate([[0.0], roots, [upper]])
        new = np.empty(k)
        for i in range(k):
            new[i] = _bracketed_newton(k, alpha, edges[i], edges[i + 1], tol, maxiter)
        roots = new
    return roots


def _bracketed_newton(n, alpha, lo, hi, tol, maxiter):
    f_lo = laguerre_half(n, lo, alpha)
    f_hi = laguerre_half(n, hi, alpha)
    if f_lo * f_hi > 0:
        raise QuadratureError(f"no sign change for L_{n} on [{lo}, {hi}]")
    x = 0.5 * (lo + hi)
    for _ in range(maxiter):
        fx, fm1 = _laguerre_pair(n, x, alpha)
        fx = float(fx)
        if fx == 0.0:
            return x
        if fx * f_lo < 0:
            hi = x
        else:
            lo, f_lo = x, fx
        dfx = (n * fx - (n + alpha) * float(fm1)) / x
        step = fx / dfx if dfx != 0 else np.inf
        x_new = x - step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * abs(x_new):
            return x_new
        x = x_new
    raise QuadratureError(f"Newton iteration for a root of L_{n} did not converge")


def gauss_laguerre_rule(N: int, spec) -> QuadratureRule:
    """``N + 1`` node radial quadrature for the SPF basis.

    ``spec`` is a :class:`RadialBasisSpec` or a bare ``zeta``. Shells sit at
    ``q_s = sqrt(zeta * x_s)``; the weights fold in the ``q**2`` measure so
    that ``sum_s w_s R_n(q_s) R_k(q_s) = delta_nk`` for ``n, k <= N``.
    """
    if N < 0:
        raise ValueError("N must be >= 0")
    zeta = spec.zeta if isinstance(spec, RadialBasisSpec) else float(spec)
    x = laguerre_roots(N + 1)
    log_w = (
        math.log(0.5)
        + 1.5 * math.log(zeta)
        + gammaln(N + 2.5)
        + np.log(x)
        + x
        - gammaln(N + 2)
        - 2.0 * math.log(N + 2)
        - 2.0 * np.log(np.abs(laguerre_half(N + 2, x)))
    )
    return QuadratureRule(nodes=x, weights=np.exp(log_w), zeta=zeta)


def laplace_beltrami_diag(L: int) -> np.ndarray:
    """Penalty ``ell**2 (ell + 1)**2`` per flat coefficient index."""
    ell, _ = sh_indices(L)
    return (ell * (ell + 1.0)) ** 2
