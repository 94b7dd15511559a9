"""Forward and inverse spherical harmonic and SPF transforms.

Two families are provided:

* the order-recursive transforms on iso-latitude grids (:func:`nsht`,
  :func:`nspft`), which split the problem into one small square system per
  order ``m`` and remove higher-order aliasing ring by ring;
* the least-squares baselines (:func:`ls_sht`, :func:`ls_spft`) that work on
  any point set.

All forward transforms accept a trailing batch axis: a signal of shape
``(n_samples, n_batch)`` yields coefficients of shape ``(n_coeffs, n_batch)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .sampling import (
    MultiShellGrid,
    SingleShellGrid,
    _cond,
    order_degrees,
    order_rings,
    pm_matrix,
)
from .sph_core import (
    ShIndex,
    laplace_beltrami_diag,
    legendre_table,
    n_sh_coeffs,
    radial_matrix,
    sh_flat_index,
    sh_indices,
    sh_matrix,
)


class TransformError(np.linalg.LinAlgError):
    """A linear system in a transform is singular or the inputs mismatch."""


# ---------------------------------------------------------------------------
# Coefficient containers
# ---------------------------------------------------------------------------


@dataclass
class ShCoeffs:
    """Even-degree SH coefficients in flat order (optionally batched)."""

    L: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.shape[0] != n_sh_coeffs(self.L):
            raise ValueError(
                f"expected {n_sh_coeffs(self.L)} coefficients for L={self.L}, "
                f"got {self.data.shape[0]}"
            )

    def __getitem__(self, lm):
        return self.data[sh_flat_index(*lm)]

    def is_real_signal(self, atol: float = 1e-12) -> bool:
        """True if ``c_l^-m == (-1)^m conj(c_l^m)`` for every coefficient."""
        ell, m = sh_indices(self.L)
        mirror = sh_flat_index(ell, -m)
        sign = np.where(m % 2, -1.0, 1.0).reshape((-1,) + (1,) * (self.data.ndim - 1))
        return bool(np.allclose(self.data[mirror], sign * self.data.conj(), atol=atol))

    def truncate(self, L: int) -> "ShCoeffs":
        return ShCoeffs(L, self.data[: n_sh_coeffs(L)])


@dataclass
class SpfCoeffs:
    """SPF coefficients, radial-major: ``[e_000, e_02-2, ..., e_NLL]``."""

    N: int
    L: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.shape[0] != (self.N + 1) * n_sh_coeffs(self.L):
            raise ValueError("SPF coefficient vector length does not match (N, L)")

    @property
    def K(self) -> int:
        return n_sh_coeffs(self.L)

    def radial_block(self, n: int) -> np.ndarray:
        return self.data[n * self.K:(n + 1) * self.K]

    def __getitem__(self, nlm):
        n, ell, m = nlm
        return self.data[n * self.K + sh_flat_index(ell, m)]


# ---------------------------------------------------------------------------
# Per-order systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PmSystem:
    m: int
    ells: np.ndarray
    rings: np.ndarray
    matrix: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ells)

    @property
    def cond(self) -> float:
        return _cond(self.matrix)


def build_pm(grid: SingleShellGrid, m: int) -> PmSystem:
    """Per-order system ``g_m = P_m c_m`` for ``grid``."""
    if abs(m) > grid.L:
        raise ValueError(f"|m| must not exceed L={grid.L}")
    return PmSystem(
        m=m,
        ells=order_degrees(grid.L, m),
        rings=order_rings(grid.L, m),
        matrix=pm_matrix(grid.thetas, grid.L, m),
    )


def compute_gm(values, grid: SingleShellGrid, m: int) -> np.ndarray:
    """Ring integrals ``G_m(theta_j)`` for rings ``j >= ceil(|m|/2)``.

    ``values`` are the (residual) samples in canonical grid order. Each ring
    must already be free of orders ``|m'| > 2j``; the rectangle rule is then
    exact for ``|m| <= 2j``.
    """
    values = np.asarray(values)
    rows = []
    for j in order_rings(grid.L, m):
        ring = grid.rings[j]
        kernel = np.exp(-1j * m * ring.phis) * (2.0 * math.pi / ring.size)
        rows.append(kernel @ values[grid.ring_slice(j)])
    return np.array(rows)


class NshtPlan:
    """Precomputed per-order solve matrices for one grid and penalty.

    The penalty on coefficient ``c_l^m`` is ``lam * l**2 (l+1)**2 + shift``;
    ``shift`` carries the radial term of the multi-shell transform.
    Solves use the stacked system ``[P_m; sqrt(penalty)]`` in the
    least-squares sense, never the explicit normal equations.
    """

    def __init__(self, grid: SingleShellGrid, lam: float = 0.0, shift: float = 0.0):
        if lam < 0 or shift < 0:
            raise ValueError("regularization parameters must be >= 0")
        self.grid = grid
        self.lam = float(lam)
        self.shift = float(shift)
        self.systems = {}
        self.solvers = {}
        for m in range(-grid.L, grid.L + 1):
            sys_m = build_pm(grid, m)
            self.systems[m] = sys_m
            self.solvers[m] = self._solver(sys_m)

    def _solver(self, sys_m: PmSystem) -> np.ndarray:
        P = sys_m.matrix
        pen = self.lam * (sys_m.ells * (sys_m.ells + 1.0)) ** 2 + self.shift
        n = sys_m.size
        if not np.any(pen > 0):
            sv = np.linalg.svd(P, compute_uv=False)
            if sv[-1] <= sv[0] * n * np.finfo(float).eps:
                raise TransformError(f"P_m is singular for m={sys_m.m}")
            return np.linalg.solve(P, np.eye(n))
        aug = np.vstack([P, np.diag(np.sqrt(pen))])
        rhs = np.vstack([np.eye(n), np.zeros((n, n))])
        sol, _, rank, _ = np.linalg.lstsq(aug, rhs, rcond=None)
        if rank < n:
            raise TransformError(f"regularized system is singular for m={sys_m.m}")
        return sol


@lru_cache(maxsize=256)
def _plan_cached(grid, lam, shift):
    return NshtPlan(grid, lam, shift)


def nsht_plan(grid: SingleShellGrid, lam: float = 0.0, shift: float = 0.0) -> NshtPlan:
    return _plan_cached(grid, float(lam), float(shift))


def _synth_ring(coeffs, grid, j, orders, ylm_ring):
    """Contribution of ``orders`` to ring ``j`` from flat coefficients."""
    ring = grid.rings[j]
    out = 0.0
    for m in orders:
        ells = order_degrees(grid.L, m)
        if len(ells) == 0:
            continue
        idx = sh_flat_index(ells, np.full(len(ells), m))
        plm = ylm_ring[j][ells, abs(m)]
        if m < 0 and m % 2:
            plm = -plm
        radial = plm @ coeffs[idx]
        out = out + np.multiply.outer(np.exp(1j * m * ring.phis), radial)
    return out


def _nsht_array(d, grid: SingleShellGrid, plan: NshtPlan, real: bool, keep_gm: bool = False):
    L = grid.L
    d = np.asarray(d)
    if d.shape[0] != grid.n_samples:
        raise TransformError(
            f"signal has {d.shape[0]} samples, grid expects {grid.n_samples}"
        )
    batch = d.shape[1:]
    coeffs = np.zeros((n_sh_coeffs(L),) + batch, dtype=complex)
    resid = d.astype(complex)
    tables = [legendre_table(L, r.theta) for r in grid.rings]
    gms = {}
    for am in range(L, -1, -1):
        signs = (am,) if (am == 0 or real) else (am, -am)
        for m in signs:
            g = compute_gm(resid, grid, m)
            if keep_gm:
                gms[m] = g
            c_m = plan.solvers[m] @ g
            ells = plan.systems[m].ells
            coeffs[sh_flat_index(ells, np.full(len(ells), m))] = c_m
            if real and m > 0:
                sign = -1.0 if m % 2 else 1.0
                coeffs[sh_flat_index(ells, np.full(len(ells), -m))] = sign * c_m.conj()
        # After orders |m'| >= 2j + 1 are known, clear them from ring j.
        if am % 2 == 1:
            j = (am - 1) // 2
            orders = [mm for mm in range(-L, L + 1) if abs(mm) > 2 * j]
            sl = grid.ring_slice(j)
            resid[sl] = d[sl] - _synth_ring(coeffs, grid, j, orders, tables)
    if keep_gm:
        return coeffs, gms
    return coeffs


def nsht(signal, grid: SingleShellGrid, lam: float = 0.0, real: bool | None = None,
         return_gm: bool = False):
    """Order-recursive SH transform with Laplace-Beltrami regularization.

    Orders are processed from ``|m| = L`` down to 0. For each order the
    regularized system ``(P^H P + lam L_m) c_m = P^H g_m`` is solved; once all
    orders above ``2j`` are known their contribution is subtracted from ring
    ``j`` so that its DFT coefficients are alias-free for the remaining orders.
    With ``lam = 0`` the transform is exact for band-limited antipodal signals.

    Parameters
    ----------
    signal : array, shape (n_samples,) or (n_samples, n_batch)
        Samples in canonical ring-major order.
    grid : SingleShellGrid
    lam : float
        Laplace-Beltrami regularization weight.
    real : bool, optional
        Derive negative orders by conjugate symmetry. Defaults to whether the
        signal array is real-valued.
    return_gm : bool
        Also return the per-order ring integrals actually used.
    """
    signal = np.asarray(signal)
    if real is None:
        real = not np.iscomplexobj(signal)
    plan = nsht_plan(grid, lam)
    out = _nsht_array(signal, grid, plan, real, keep_gm=return_gm)
    if return_gm:
        return ShCoeffs(grid.L, out[0]), out[1]
    return ShCoeffs(grid.L, out)


def nsht_operator(grid: SingleShellGrid, lam: float = 0.0, shift: float = 0.0) -> np.ndarray:
    """Matrix ``T`` with ``nsht(d).data == T @ d`` for real ``d``."""
    plan = nsht_plan(grid, lam, shift)
    return _nsht_array(np.eye(grid.n_samples), grid, plan, real=True)


def inverse_sht(coeffs: ShCoeffs, theta, phi) -> np.ndarray:
    """Evaluate the truncated even-degree expansion at ``(theta, phi)``."""
    return sh_matrix(coeffs.L, theta, phi) @ coeffs.data


# ---------------------------------------------------------------------------
# Least-squares SH baseline
# ---------------------------------------------------------------------------


def _points_of(points):
    if isinstance(points, SingleShellGrid):
        return points.points()
    theta, phi = points
    return np.atleast_1d(theta), np.atleast_1d(phi)


def _regularized_lstsq(A, pen, rhs, strict=True):
    n = A.shape[1]
    if np.any(pen > 0):
        A = np.vstack([A, np.diag(np.sqrt(pen))])
        rhs = np.concatenate([rhs, np.zeros((n,) + rhs.shape[1:], dtype=rhs.dtype)])
    sol, _, rank, sv = np.linalg.lstsq(A, rhs, rcond=None)
    if strict and rank < n:
        cond = np.inf if sv[-1] == 0 else (sv[0] / sv[-1]) ** 2
        raise TransformError(
            f"least-squares normal matrix is numerically singular (condition ~{cond:.3g})"
        )
    return sol


def ls_sht(signal, points, L: int | None = None, lam: float = 0.0) -> ShCoeffs:
    """Regularized least-squares SHt ``(A^H A + lam L)^-1 A^H d``.

    ``points`` is a :class:`SingleShellGrid` or a ``(theta, phi)`` pair; for
    the latter ``L`` is required.
    """
    if L is None:
        if not isinstance(points, SingleShellGrid):
            raise ValueError("L is required for an explicit point set")
        L = points.L
    theta, phi = _points_of(points)
    A = sh_matrix(L, theta, phi)
    d = np.asarray(signal)
    if d.shape[0] != A.shape[0]:
        raise TransformError("signal length does not match the point count")
    pen = lam * laplace_beltrami_diag(L)
    return ShCoeffs(L, _regularized_lstsq(A, pen, d.astype(complex)))


def ls_sht_operator(points, L: int | None = None, lam: float = 0.0) -> np.ndarray:
    if L is None:
        L = points.L
    theta, phi = _points_of(points)
    A = sh_matrix(L, theta, phi)
    pen = lam * laplace_beltrami_diag(L)
    return _regularized_lstsq(A, pen, np.eye(A.shape[0], dtype=complex))


def ls_condition(A, pen=None) -> float:
    """2-norm condition number of ``A^H A + diag(pen)``."""
    M = A.conj().T @ A
    if pen is not None:
        M = M + np.diag(pen)
    sv = np.linalg.svd(M, compute_uv=False)
    return np.inf if sv[-1] == 0 else float(sv[0] / sv[-1])


# ---------------------------------------------------------------------------
# SPF transforms
# ---------------------------------------------------------------------------


def _split_shells(multi_signal, grid: MultiShellGrid):
    if isinstance(multi_signal, (list, tuple)):
        if len(multi_signal) != len(grid.shells):
            raise TransformError("need one signal per shell")
        parts = [np.asarray(x) for x in multi_signal]
    else:
        multi_signal = np.asarray(multi_signal)
        if multi_signal.shape[0] != grid.n_samples:
            raise TransformError(
                f"signal has {multi_signal.shape[0]} samples, grid expects {grid.n_samples}"
            )
        parts = [multi_signal[grid.shell_slice(s)] for s in range(len(grid.shells))]
    for part, shell in zip(parts, grid.shells):
        if part.shape[0] != shell.grid.n_samples:
            raise TransformError("shell signal length does not match its grid")
    return parts


def radial_penalty(n: int) -> float:
    return float(n * n * (n + 1) * (n + 1))


def nspft(multi_signal, grid: MultiShellGrid, lam_l: float = 0.0, lam_n: float = 0.0,
          real: bool | None = None) -> SpfCoeffs:
    """Separable SPF transform on a Gauss-Laguerre multi-shell grid.

    For every shell ``s`` and radial degree ``n`` the shell's SH coefficients
    are obtained with the order-recursive transform under the penalty
    ``lam_l * l**2 (l+1)**2 + lam_n * n**2 (n+1)**2``; the radial transform is
    then the quadrature sum ``e_nlm = sum_s w_s R_n(q_s) c_lm[n, s]``.
    Degrees above a shell's band-limit receive no contribution from it.
    """
    parts = _split_shells(multi_signal, grid)
    if real is None:
        real = not any(np.iscomplexobj(p) for p in parts)
    N, Lmax = grid.N, grid.L_max
    K = n_sh_coeffs(Lmax)
    batch = parts[0].shape[1:]
    e = np.zeros(((N + 1) * K,) + batch, dtype=complex)
    R = radial_matrix(N, grid.q, grid.radial)  # (n_shells, N + 1)
    for s, (part, shell) in enumerate(zip(parts, grid.shells)):
        Ks = n_sh_coeffs(shell.L)
        cache = {}
        for n in range(N + 1):
            shift = lam_n * radial_penalty(n)
            if shift not in cache:
                plan = nsht_plan(shell.grid, lam_l, shift)
                cache[shift] = _nsht_array(part, shell.grid, plan, real)
            e[n * K:n * K + Ks] += shell.weight * R[s, n] * cache[shift]
    return SpfCoeffs(N, Lmax, e)


def nspft_operator(grid: MultiShellGrid, lam_l: float = 0.0, lam_n: float = 0.0) -> np.ndarray:
    """Matrix ``T`` with ``nspft(d).data == T @ d`` for real ``d``."""
    return nspft(np.eye(grid.n_samples), grid, lam_l, lam_n, real=True).data


def spf_matrix(N: int, L: int, theta, phi, q, spec) -> np.ndarray:
    """SPF design matrix, shape ``(n_points, (N + 1) * n_sh_coeffs(L))``."""
    Y = sh_matrix(L, theta, phi)
    R = radial_matrix(N, q, spec)
    return (R[:, :, None] * Y[:, None, :]).reshape(len(Y), -1)


def spf_penalties(N: int, L: int, lam_l: float, lam_n: float) -> np.ndarray:
    lb = laplace_beltrami_diag(L)
    K = len(lb)
    n = np.repeat(np.arange(N + 1), K)
    return lam_l * np.tile(lb, N + 1) + lam_n * (n * (n + 1.0)) ** 2


def _multi_design(grid: MultiShellGrid):
    theta, phi, q = grid.points()
    return spf_matrix(grid.N, grid.L_max, theta, phi, q, grid.radial)


def ls_spft(multi_signal, grid: MultiShellGrid, lam_l: float = 0.0, lam_n: float = 0.0,
            L: int | None = None) -> SpfCoeffs:
    """Joint regularized least-squares SPF fit with one band-limit for all shells.

    The minimal-sample grid leaves this system rank deficient without
    regularization; the minimum-norm solution is returned in that case (see
    :func:`condition_report` for the conditioning).
    """
    parts = _split_shells(multi_signal, grid)
    d = np.concatenate(parts).astype(complex)
    L = grid.L_max if L is None else L
    theta, phi, q = grid.points()
    B = spf_matrix(grid.N, L, theta, phi, q, grid.radial)
    pen = spf_penalties(grid.N, L, lam_l, lam_n)
    return SpfCoeffs(grid.N, L, _regularized_lstsq(B, pen, d, strict=False))


def ls_spft_points(signal, theta, phi, q, spec, L: int, lam_l=0.0, lam_n=0.0) -> SpfCoeffs:
    """Least-squares SPF fit on an arbitrary q-space point set."""
    B = spf_matrix(spec.N, L, theta, phi, q, spec)
    pen = spf_penalties(spec.N, L, lam_l, lam_n)
    return SpfCoeffs(spec.N, L, _regularized_lstsq(B, pen, np.asarray(signal, dtype=complex),
                                                   strict=False))


def ls_spft_operator(grid: MultiShellGrid, lam_l: float = 0.0, lam_n: float = 0.0) -> np.ndarray:
    B = _multi_design(grid)
    pen = spf_penalties(grid.N, grid.L_max, lam_l, lam_n)
    return _regularized_lstsq(B, pen, np.eye(B.shape[0], dtype=complex), strict=False)


def inverse_spft(coeffs: SpfCoeffs, theta, phi, q, spec) -> np.ndarray:
    """Evaluate the SPF expansion at q-space points ``(theta, phi, q)``."""
    return spf_matrix(coeffs.N, coeffs.L, theta, phi, q, spec) @ coeffs.data


# ---------------------------------------------------------------------------
# Conditioning diagnostics
# ---------------------------------------------------------------------------


def condition_report(grid) -> dict:
    """Per-order ``P_m`` condition numbers and the least-squares condition.

    For a single shell the LS figure is ``cond(A^H A)``; for a multi-shell grid
    it is ``cond(B^H B)`` with the common band-limit ``max_s L_s``.
    """
    if isinstance(grid, SingleShellGrid):
        shells = [(grid.L, grid)]
        theta, phi = grid.points()
        ls = ls_condition(sh_matrix(grid.L, theta, phi))
    else:
        shells = [(s.L, s.grid) for s in grid.shells]
        ls = ls_condition(_multi_design(grid))
    per_shell = []
    for L, g in shells:
        conds = {m: build_pm(g, m).cond for m in range(0, L + 1)}
        per_shell.append({"L": L, "pm_condition": conds, "max": max(conds.values())})
    return {
        "shells": per_shell,
        "max_pm_condition": max(s["max"] for s in per_shell),
        "ls_condition": ls,
    }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"QSPC"
_HEADER = struct.Struct("<4sIiI8sQ")  # magic, version, L, N (0xFFFFFFFF: none), tag, count
_NO_N = 0xFFFFFFFF


def coeffs_to_json(coeffs) -> str:
    data = np.asarray(coeffs.data)
    if data.ndim != 1:
        raise ValueError("only unbatched coefficient vectors can be serialized")
    ell, m = sh_indices(coeffs.L)
    if isinstance(coeffs, SpfCoeffs):
        entries = [
            {"n": n, "l": int(l), "m": int(mm), "re": float(v.real), "im": float(v.imag)}
            for n in range(coeffs.N + 1)
            for l, mm, v in zip(ell, m, coeffs.radial_block(n))
        ]
        return json.dumps({"kind": "spf", "N": coeffs.N, "L": coeffs.L,
                           "ordering": "n,l_even,m", "coefficients": entries})
    entries = [{"l": int(l), "m": int(mm), "re": float(v.real), "im": float(v.imag)}
               for l, mm, v in zip(ell, m, data)]
    return json.dumps({"kind": "sh", "L": coeffs.L, "ordering": "l_even,m",
                       "coefficients": entries})


def coeffs_from_json(text: str):
    d = json.loads(text)
    L = int(d["L"])
    if d["kind"] == "spf":
        N = int(d["N"])
        K = n_sh_coeffs(L)
        data = np.zeros((N + 1) * K, dtype=complex)
        for c in d["coefficients"]:
            data[c["n"] * K + sh_flat_index(c["l"], c["m"])] = complex(c["re"], c["im"])
        return SpfCoeffs(N, L, data)
    data = np.zeros(n_sh_coeffs(L), dtype=complex)
    for c in d["coefficients"]:
        data[sh_flat_index(c["l"], c["m"])] = complex(c["re"], c["im"])
    return ShCoeffs(L, data)


def coeffs_to_bytes(coeffs) -> bytes:
    data = np.asarray(coeffs.data, dtype=np.complex128)
    if data.ndim != 1:
        raise ValueError("only unbatched coefficient vectors can be serialized")
    if isinstance(coeffs, SpfCoeffs):
        head = _HEADER.pack(_MAGIC, 1, coeffs.L, coeffs.N, b"SPF_NLM\0", data.size)
    else:
        head = _HEADER.pack(_MAGIC, 1, coeffs.L, _NO_N, b"SH_EVEN\0", data.size)
    body = np.empty(2 * data.size, dtype="<f8")
    body[0::2] = data.real
    body[1::2] = data.imag
    return head + body.tobytes()


def coeffs_from_bytes(buf: bytes):
    magic, version, L, N, tag, count = _HEADER.unpack_from(buf)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a coefficient file")
    body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size, count=2 * count)
    data = body[0::2] + 1j * body[1::2]
    if tag == b"SPF_NLM\0":
        return SpfCoeffs(N, L, data)
    if tag == b"SH_EVEN\0":
        return ShCoeffs(L, data)
    raise ValueError(f"unknown ordering tag {tag!r}")


__all__ = [
    "ShCoeffs", "SpfCoeffs", "ShIndex", "PmSystem", "TransformError", "NshtPlan",
    "build_pm", "compute_gm", "nsht", "nsht_plan", "nsht_operator", "inverse_sht",
    "ls_sht", "ls_sht_operator", "ls_condition", "nspft", "nspft_operator", "ls_spft",
    "ls_spft_points", "ls_spft_operator", "inverse_spft", "spf_matrix", "spf_penalties",
    "condition_report", "coeffs_to_json", "coeffs_from_json", "coeffs_to_bytes",
    "coeffs_from_bytes", "radial_penalty",
]
