"""Single- and multi-shell q-space sampling grids.

The single-shell grid has ``L/2 + 1`` iso-latitude rings; ring ``j`` carries
``4j + 1`` equispaced longitudes, giving ``(L + 1)(L + 2)/2`` samples, which
equals the number of even-degree SH coefficients. Colatitudes are chosen so
that every per-order system (see :func:`pm_matrix`) is well conditioned.

Multi-shell grids place ``N + 1`` shells at the Gauss-Laguerre nodes of the
radial basis and give each shell its own single-shell grid with a band-limit
taken from a b-value lookup table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .sph_core import (
    QuadratureRule,
    RadialBasisSpec,
    _check_even,
    gauss_laguerre_rule,
    legendre_table,
    n_sh_coeffs,
)

N_CANDIDATES = 1000
_REFINE_SWEEPS = 4


class GridError(ValueError):
    """Invalid grid parameters or malformed grid description."""


# ---------------------------------------------------------------------------
# Per-order systems (shared with the transforms)
# ---------------------------------------------------------------------------


def order_degrees(L: int, m: int) -> np.ndarray:
    """Even degrees ``ell`` carrying order ``m``: ``|m|``, ``|m|+2``, ... (or ``|m|+1``, ...)."""
    am = abs(m)
    start = am if am % 2 == 0 else am + 1
    return np.arange(start, L + 1, 2)


def order_rings(L: int, m: int) -> np.ndarray:
    """Rings ``j = ceil(|m|/2) .. L/2`` that resolve order ``m``."""
    return np.arange((abs(m) + 1) // 2, L // 2 + 1)


def pm_matrix(thetas, L: int, m: int) -> np.ndarray:
    """``2 pi * Ptilde_ell^m(theta_j)`` over the order's rings and degrees."""
    thetas = np.asarray(thetas, dtype=float)
    table = legendre_table(L, thetas)
    ells = order_degrees(L, m)
    rows = order_rings(L, m)
    am = abs(m)
    P = 2.0 * math.pi * table[np.ix_(ells, [am])][:, 0, :][:, rows].T
    if m < 0 and am % 2:
        P = -P
    return P


def _cond(P):
    if P.size == 0:
        return 1.0
    sv = np.linalg.svd(P, compute_uv=False)
    return np.inf if sv[-1] == 0 else sv[0] / sv[-1]


def max_pm_condition(thetas, L: int, orders=None) -> float:
    """Largest 2-norm condition number over the per-order systems."""
    if orders is None:
        orders = range(L + 1)
    return max(_cond(pm_matrix(thetas, L, m)) for m in orders)


# ---------------------------------------------------------------------------
# Colatitude design
# ---------------------------------------------------------------------------


def _batched_max_cond(tables, thetas_idx, L, orders):
    """Max condition number of the given orders for many candidate theta sets.

    ``tables`` holds precomputed Legendre values on the candidate set;
    ``thetas_idx`` is ``(n_sets, L/2 + 1)`` of candidate indices.
    """
    worst = np.ones(len(thetas_idx))
    for m in orders:
        ells = order_degrees(L, m)
        rows = order_rings(L, m)
        # (n_sets, n_rows, n_cols)
        P = tables[ells][:, m, :][:, thetas_idx[:, rows]].transpose(1, 2, 0)
        if P.shape[1] == 1:
            c = np.where(np.abs(P[:, 0, 0]) > 0, 1.0, np.inf)
        else:
            sv = np.linalg.svd(P, compute_uv=False)
            with np.errstate(divide="ignore"):
                c = sv[:, 0] / sv[:, -1]
        worst = np.maximum(worst, c)
    return worst


@lru_cache(maxsize=None)
def _design_cached(L: int) -> tuple:
    J = L // 2
    cand = np.linspace(0.0, math.pi / 2, N_CANDIDATES + 1)[1:]
    tables = legendre_table(L, cand)
    if J == 0:
        return (float(cand[len(cand) // 2]),)

    # 1x1 systems are trivially conditioned, so the outermost ring is placed
    # where the two single-unknown orders |m| = L, L - 1 are largest.
    last = np.minimum(np.abs(tables[L, L]), np.abs(tables[L, L - 1]))
    idx = np.zeros(J + 1, dtype=int)
    idx[J] = int(np.argmax(last))
    for j in range(J - 1, -1, -1):
        free = np.setdiff1d(np.arange(len(cand)), idx[j + 1:])
        sets = np.repeat(idx[None, :], len(free), axis=0)
        sets[:, j] = free
        # Only rings j..J are set, so only orders with ceil(|m|/2) >= j qualify.
        orders = range(max(2 * j - 1, 0), L + 1)
        score = _batched_max_cond(tables, sets, L, orders)
        idx[j] = free[int(np.argmin(score))]

    all_orders = range(L + 1)
    best = _batched_max_cond(tables, idx[None, :], L, all_orders)[0]
    for _ in range(_REFINE_SWEEPS):
        improved = False
        for j in range(J + 1):
            free = np.setdiff1d(np.arange(len(cand)), np.delete(idx, j))
            sets = np.repeat(idx[None, :], len(free), axis=0)
            sets[:, j] = free
            score = _batched_max_cond(tables, sets, L, all_orders)
            k = int(np.argmin(score))
            if score[k] < best - 1e-12:
                best = score[k]
                idx[j] = free[k]
                improved = True
        if not improved:
            break
    return tuple(float(cand[i]) for i in idx)


def design_colatitudes(L: int) -> np.ndarray:
    """Ring colatitudes ``theta_0 .. theta_{L/2}`` with well-conditioned ``P_m``.

    A greedy pass places the outermost ring first and then adds rings
    ``j = L/2 - 1, ..., 0``, each time picking, from 1000 equispaced
    candidates in ``(0, pi/2]``, the colatitude minimizing the largest
    condition number among the systems completed so far. A coordinate descent
    sweep over all rings then refines the result. Deterministic in ``L``.
    """
    _check_even(L)
    return np.array(_design_cached(L))


# ---------------------------------------------------------------------------
# Single-shell grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ring:
    j: int
    theta: float

    @property
    def phis(self) -> np.ndarray:
        n = 4 * self.j + 1
        return 2.0 * np.arange(n) * math.pi / n

    @property
    def size(self) -> int:
        return 4 * self.j + 1


@dataclass(frozen=True, eq=False)
class SingleShellGrid:
    """Iso-latitude grid for band-limit ``L``.

    ``hemisphere_map`` flags, per sample, whether the physical measurement is
    taken at the antipode of the grid point. It only affects exported
    directions; reconstruction uses the antipodal symmetry of the signal.
    """

    L: int
    rings: tuple
    hemisphere_map: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.hemisphere_map is None:
            object.__setattr__(self, "hemisphere_map", np.zeros(self.n_samples, dtype=bool))
        else:
            hm = np.asarray(self.hemisphere_map, dtype=bool)
            if hm.shape != (self.n_samples,):
                raise GridError("hemisphere_map length must equal the sample count")
            object.__setattr__(self, "hemisphere_map", hm)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.rings])

    @property
    def n_samples(self) -> int:
        return sum(r.size for r in self.rings)

    @property
    def ring_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([r.size for r in self.rings])])

    def ring_slice(self, j: int) -> slice:
        off = self.ring_offsets
        return slice(int(off[j]), int(off[j + 1]))

    def points(self):
        """``(theta, phi)`` arrays in canonical ring-major order."""
        theta = np.concatenate([np.full(r.size, r.theta) for r in self.rings])
        phi = np.concatenate([r.phis for r in self.rings])
        return theta, phi

    def directions(self, physical: bool = True) -> np.ndarray:
        """Unit vectors, ``(n_samples, 3)``; antipodes applied if ``physical``."""
        theta, phi = self.points()
        u = np.stack(
            [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1
        )
        if physical:
            u[self.hemisphere_map] *= -1.0
        return u

    def with_hemisphere_map(self, flags) -> "SingleShellGrid":
        return SingleShellGrid(self.L, self.rings, np.asarray(flags, dtype=bool))

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "thetas": [r.theta for r in self.rings],
            "ring_sizes": [r.size for r in self.rings],
            "hemisphere_map": self.hemisphere_map.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SingleShellGrid":
        grid = single_shell_grid(int(d["L"]), d["thetas"])
        if "ring_sizes" in d and list(d["ring_sizes"]) != [r.size for r in grid.rings]:
            raise GridError("ring sizes inconsistent with band-limit")
        if "hemisphere_map" in d:
            grid = grid.with_hemisphere_map(d["hemisphere_map"])
        return grid


def single_shell_grid(L: int, thetas=None) -> SingleShellGrid:
    """Iso-latitude grid; colatitudes default to :func:`design_colatitudes`."""
    try:
        _check_even(L)
    except ValueError as exc:
        raise GridError(str(exc)) from None
    if thetas is None:
        thetas = design_colatitudes(L)
    thetas = np.asarray(thetas, dtype=float)
    if thetas.shape != (L // 2 + 1,):
        raise GridError(f"expected {L // 2 + 1} colatitudes, got {thetas.size}")
    if len(np.unique(thetas)) != len(thetas):
        raise GridError("colatitudes must be distinct")
    if np.any(thetas <= 0) or np.any(thetas >= math.pi):
        raise GridError("colatitudes must lie in (0, pi)")
    rings = tuple(Ring(j, float(t)) for j, t in enumerate(thetas))
    return SingleShellGrid(L, rings)


# ---------------------------------------------------------------------------
# Band-limit lookup
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandlimitTable:
    """Step-function lookup of the SH band-limit needed at a b-value.

    ``anchors`` are ``(b, fa, L)`` triples. A query snaps to the nearest
    tabulated FA and returns the smallest ``L`` whose anchor b-value is at
    least the query (within ``rtol``, since published b-values are rounded).
    """

    anchors: tuple
    default_fa: float = 0.8
    rtol: float = 0.01

    def __post_init__(self):
        for b, fa, L in self.anchors:
            if L % 2 or L < 0:
                raise ValueError(f"anchor band-limit must be even, got {L}")
        for fa in self.fas:
            rows = sorted((b, L) for b, f, L in self.anchors if f == fa)
            Ls = [L for _, L in rows]
            if Ls != sorted(Ls):
                raise ValueError(f"band-limits must not decrease with b (FA={fa})")

    @property
    def fas(self):
        return sorted({fa for _, fa, _ in self.anchors})

    def lookup(self, b: float, fa: float | None = None) -> int:
        fa = self.default_fa if fa is None else fa
        if b < 0:
            raise ValueError("b-value must be >= 0")
        if not 0.0 <= fa <= 1.0:
            raise ValueError("FA must lie in [0, 1]")
        near = min(self.fas, key=lambda f: (abs(f - fa), -f))
        rows = sorted((ab, L) for ab, f, L in self.anchors if f == near)
        for ab, L in rows:
            if b <= ab * (1.0 + self.rtol):
                return int(L)
        raise ValueError(f"b-value {b} beyond table range (max {rows[-1][0]})")

    def to_dict(self):
        return {"anchors": [list(a) for a in self.anchors], "default_fa": self.default_fa,
                "rtol": self.rtol}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(a) for a in d["anchors"]), d.get("default_fa", 0.8),
                   d.get("rtol", 0.01))


# Only the FA = 0.8 curve is known at specific points; lower FAs need no
# larger band-limit, so they reuse it.
DEFAULT_BANDLIMITS = BandlimitTable(
    anchors=(
        (0.0, 0.8, 0),
        (206.0, 0.8, 2),
        (847.0, 0.8, 4),
        (2018.0, 0.8, 6),
        (4000.0, 0.8, 8),
    )
)


def bandlimit_for_bvalue(b, fa: float = 0.8, table: BandlimitTable = DEFAULT_BANDLIMITS):
    """Even SH band-limit required at b-value ``b`` (scalar or iterable)."""
    if np.ndim(b) == 0:
        return table.lookup(float(b), fa)
    return tuple(table.lookup(float(x), fa) for x in b)


# ---------------------------------------------------------------------------
# Multi-shell grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Shell:
    q: float
    b: float
    weight: float
    L: int
    grid: SingleShellGrid


@dataclass(frozen=True, eq=False)
class MultiShellGrid:
    N: int
    zeta: float
    shells: tuple

    @property
    def radial(self) -> RadialBasisSpec:
        return RadialBasisSpec(self.N, self.zeta)

    @property
    def Ls(self):
        return [s.L for s in self.shells]

    @property
    def L_max(self) -> int:
        return max(self.Ls)

    @property
    def q(self):
        return np.array([s.q for s in self.shells])

    @property
    def weights(self):
        return np.array([s.weight for s in self.shells])

    @property
    def n_samples(self) -> int:
        return sum(s.grid.n_samples for s in self.shells)

    @property
    def shell_offsets(self):
        return np.concatenate([[0], np.cumsum([s.grid.n_samples for s in self.shells])])

    def shell_slice(self, s: int) -> slice:
        off = self.shell_offsets
        return slice(int(off[s]), int(off[s + 1]))

    def points(self):
        """``(theta, phi, q)`` for all samples, shell-major."""
        th, ph, q = [], [], []
        for s in self.shells:
            t, p = s.grid.points()
            th.append(t)
            ph.append(p)
            q.append(np.full(t.size, s.q))
        return np.concatenate(th), np.concatenate(ph), np.concatenate(q)

    def bvalues(self):
        return np.concatenate([np.full(s.grid.n_samples, s.b) for s in self.shells])

    def directions(self, physical: bool = True):
        return np.concatenate([s.grid.directions(physical) for s in self.shells])

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "zeta": self.zeta,
            "shells": [
                {"q": s.q, "b": s.b, "weight": s.weight, "L": s.L, "grid": s.grid.to_dict()}
                for s in self.shells
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiShellGrid":
        shells = tuple(
            Shell(float(s["q"]), float(s["b"]), float(s["weight"]), int(s["L"]),
                  SingleShellGrid.from_dict(s["grid"]))
            for s in d["shells"]
        )
        if len(shells) != int(d["N"]) + 1:
            raise GridError("multi-shell grid must have N + 1 shells")
        return cls(int(d["N"]), float(d["zeta"]), shells)


def multi_shell_grid(N: int, b_max: float, fa: float = 0.8,
                     table: BandlimitTable = DEFAULT_BANDLIMITS, Ls=None) -> MultiShellGrid:
    """Gauss-Laguerre shells with the largest one at ``b_max``.

    ``zeta = b_max / x_N`` so that ``b_s = zeta * x_s`` (b = q**2). Per-shell
    band-limits come from ``table`` unless ``Ls`` is given explicitly.
    """
    if N < 0:
        raise GridError("N must be >= 0")
    if not b_max > 0:
        raise GridError("b_max must be positive")
    x = gauss_laguerre_rule(N, 1.0).nodes
    zeta = b_max / x[-1]
    rule: QuadratureRule = gauss_laguerre_rule(N, zeta)
    b = rule.b
    b[-1] = b_max
    if Ls is None:
        Ls = bandlimit_for_bvalue(b, fa, table)
    if len(Ls) != N + 1:
        raise GridError("need one band-limit per shell")
    shells = tuple(
        Shell(float(math.sqrt(bs)), float(bs), float(w), int(L), single_shell_grid(int(L)))
        for bs, w, L in zip(b, rule.weights, Ls)
    )
    return MultiShellGrid(N, float(zeta), shells)


def total_samples(Ls) -> int:
    return sum(n_sh_coeffs(L) for L in Ls)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def _scheme(grid):
    if isinstance(grid, MultiShellGrid):
        return grid.directions(), grid.bvalues()
    return grid.directions(), np.zeros(grid.n_samples)


def write_fsl(grid, bvec_path, bval_path, b: float | None = None):
    """FSL ``bvecs`` (3 rows of direction cosines) and ``bvals`` (1 row)."""
    u, bv = _scheme(grid)
    if b is not None and not isinstance(grid, MultiShellGrid):
        bv = np.full(len(u), float(b))
    np.savetxt(bvec_path, u.T, fmt="%.10f")
    np.savetxt(bval_path, bv[None, :], fmt="%.6f")


def write_mrtrix(grid, path, b: float | None = None):
    """MRtrix scheme: one ``x y z b`` line per sample."""
    u, bv = _scheme(grid)
    if b is not None and not isinstance(grid, MultiShellGrid):
        bv = np.full(len(u), float(b))
    np.savetxt(path, np.column_stack([u, bv]), fmt="%.10f %.10f %.10f %.6f")


def grid_to_json(grid) -> str:
    kind = "multi" if isinstance(grid, MultiShellGrid) else "single"
    return json.dumps({"kind": kind, **grid.to_dict()}, indent=2)


def grid_from_json(text: str):
    d = json.loads(text)
    kind = d.get("kind")
    if kind == "multi":
        return MultiShellGrid.from_dict(d)
    if kind == "single":
        return SingleShellGrid.from_dict(d)
    raise GridError(f"unknown grid kind {kind!r}")


def save_grid(grid, path):
    Path(path).write_text(grid_to_json(grid))


def load_grid(path):
    return grid_from_json(Path(path).read_text())
