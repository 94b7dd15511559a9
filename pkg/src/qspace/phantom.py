"""Gaussian-mixture diffusion phantoms, Rician noise and ground-truth oracles."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .sph_core import RadialBasisSpec, gauss_laguerre_rule, radial_matrix, sh_matrix
from .transforms import ShCoeffs, SpfCoeffs

# Default crossing-fiber compartment (mm^2/s)
LAMBDA_AXIAL = 1.7e-3
LAMBDA_RADIAL = 0.3e-3
MEAN_DIFFUSIVITY = (LAMBDA_AXIAL + 2 * LAMBDA_RADIAL) / 3


class PhantomError(ValueError):
    pass


def _frame(axis, secondary=None):
    """Rows: principal axis followed by two orthonormal perpendicular axes."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    if secondary is None:
        helper = np.eye(3)[np.argmin(np.abs(a))]
    else:
        helper = np.asarray(secondary, dtype=float)
    b = helper - (helper @ a) * a
    b /= np.linalg.norm(b)
    return np.stack([a, b, np.cross(a, b)])


@dataclass(frozen=True)
class FiberCompartment:
    fraction: float
    diffusivities: tuple = (LAMBDA_AXIAL, LAMBDA_RADIAL, LAMBDA_RADIAL)
    orientation: tuple = (1.0, 0.0, 0.0)
    secondary: tuple | None = None

    def __post_init__(self):
        l1, l2, l3 = self.diffusivities
        if not (l1 >= l2 >= l3 > 0):
            raise PhantomError("diffusivities must satisfy l1 >= l2 >= l3 > 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise PhantomError("fraction must lie in [0, 1]")
        if np.linalg.norm(self.orientation) == 0:
            raise PhantomError("orientation must be non-zero")

    @property
    def rotation(self) -> np.ndarray:
        """``R`` such that the tensor is ``R^T diag(lambda) R``."""
        return _frame(self.orientation, self.secondary)

    @property
    def tensor(self) -> np.ndarray:
        R = self.rotation
        return R.T @ np.diag(self.diffusivities) @ R


@dataclass(frozen=True)
class GmmPhantom:
    fibers: tuple
    d0: float = 1.0

    def __post_init__(self):
        if len(self.fibers) == 0:
            raise PhantomError("a phantom needs at least one fiber")
        total = sum(f.fraction for f in self.fibers)
        if abs(total - 1.0) > 1e-12:
            raise PhantomError(f"fractions must sum to 1 (got {total})")

    def to_dict(self):
        return {
            "d0": self.d0,
            "fibers": [
                {"fraction": f.fraction, "diffusivities": list(f.diffusivities),
                 "orientation": list(f.orientation)}
                for f in self.fibers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        fibers = d.get("fibers", [])
        return cls(
            tuple(
                FiberCompartment(
                    float(f["fraction"]),
                    tuple(f.get("diffusivities", (LAMBDA_AXIAL, LAMBDA_RADIAL, LAMBDA_RADIAL))),
                    tuple(f.get("orientation", (1.0, 0.0, 0.0))),
                )
                for f in fibers
            ),
            float(d.get("d0", 1.0)),
        )


def load_phantom(path) -> GmmPhantom:
    with open(path) as fh:
        return GmmPhantom.from_dict(json.load(fh))


def crossing_phantom(angle_deg: float, diffusivities=None, d0: float = 1.0) -> GmmPhantom:
    """Two equal-fraction fibers; the first along x, the second rotated about z."""
    if diffusivities is None:
        diffusivities = (LAMBDA_AXIAL, LAMBDA_RADIAL, LAMBDA_RADIAL)
    a = math.radians(angle_deg)
    f1 = FiberCompartment(0.5, tuple(diffusivities), (1.0, 0.0, 0.0))
    f2 = FiberCompartment(0.5, tuple(diffusivities), (math.cos(a), math.sin(a), 0.0))
    return GmmPhantom((f1, f2), d0)


def fractional_anisotropy(evals) -> float:
    l = np.asarray(evals, dtype=float)
    num = (l[0] - l[1]) ** 2 + (l[1] - l[2]) ** 2 + (l[2] - l[0]) ** 2
    return float(math.sqrt(0.5) * math.sqrt(num) / math.sqrt(np.sum(l * l)))


def diffusivities_from_fa(fa: float, mean_diffusivity: float = MEAN_DIFFUSIVITY,
                          mode: str = "trace", radial: float = LAMBDA_RADIAL):
    """Prolate eigenvalues ``(l1, l2, l2)`` with the requested FA.

    ``mode="trace"`` holds the mean diffusivity fixed; ``mode="axial"`` keeps
    the radial diffusivity at ``radial`` and adjusts only ``l1``.
    """
    if not 0.0 <= fa < 1.0:
        raise PhantomError("FA must lie in [0, 1)")
    if mode == "trace":
        if mean_diffusivity <= 0:
            raise PhantomError("mean diffusivity must be positive")
        a = fa / math.sqrt(3.0 - 2.0 * fa * fa)
        l1 = mean_diffusivity * (1.0 + 2.0 * a)
        l2 = mean_diffusivity * (1.0 - a)
    elif mode == "axial":
        # (l1 - r)^2 = fa^2 (l1^2 + 2 r^2), larger root
        f2 = fa * fa
        A, B, C = 1.0 - f2, -2.0 * radial, radial * radial * (1.0 - 2.0 * f2)
        l1 = (-B + math.sqrt(B * B - 4 * A * C)) / (2 * A)
        l2 = radial
    else:
        raise PhantomError(f"unknown FA mode {mode!r}")
    return (l1, l2, l2)


def fa_phantom(fa: float, mean_diffusivity: float = MEAN_DIFFUSIVITY, mode: str = "trace",
               orientation=(1.0, 0.0, 0.0), d0: float = 1.0) -> GmmPhantom:
    lam = diffusivities_from_fa(fa, mean_diffusivity, mode)
    return GmmPhantom((FiberCompartment(1.0, lam, tuple(orientation)),), d0)


def gmm_signal(phantom: GmmPhantom, b, direction) -> np.ndarray:
    """``d0 * sum_k f_k exp(-b u^T D_k u)`` for unit vectors ``direction``.

    ``direction`` is ``(3,)`` or ``(n, 3)``; ``b`` broadcasts against the
    number of directions.
    """
    u = np.asarray(direction, dtype=float)
    if np.any(np.abs(np.linalg.norm(u, axis=-1) - 1.0) > 1e-12):
        raise PhantomError("directions must be unit vectors")
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise PhantomError("b-values must be >= 0")
    out = 0.0
    for f in phantom.fibers:
        adc = np.einsum("...i,ij,...j->...", u, f.tensor, u)
        out = out + f.fraction * np.exp(-b * adc)
    return phantom.d0 * out


def _unit(theta, phi):
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)],
                    axis=-1)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


def noise_rng(experiment: str | int, realization: int) -> np.random.Generator:
    """Counter-based generator keyed by experiment id and realization index."""
    digest = hashlib.sha256(str(experiment).encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(key=[key, int(realization)]))


@dataclass(frozen=True)
class NoiseRealization:
    seed: int
    snr: float

    def __post_init__(self):
        if not self.snr > 0:
            raise PhantomError("SNR must be positive")

    def sigma(self, d0: float = 1.0) -> float:
        return d0 / self.snr

    def apply(self, values, d0: float = 1.0, experiment="default"):
        return add_rician_noise(values, d0, self.snr, noise_rng(experiment, self.seed))


def add_rician_noise(values, d0: float, snr: float, rng=None) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise with ``sigma = d0/snr``."""
    if not snr > 0:
        raise PhantomError("SNR must be positive")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    values = np.asarray(values, dtype=float)
    sigma = d0 / snr
    if np.isinf(snr):
        return values.copy()
    eta1 = rng.normal(0.0, sigma, values.shape)
    eta2 = rng.normal(0.0, sigma, values.shape)
    return np.sqrt((values + eta1) ** 2 + eta2 ** 2)


# ---------------------------------------------------------------------------
# Ground-truth coefficients
# ---------------------------------------------------------------------------


def _sphere_quadrature(L_oracle: int):
    nt = 2 * (L_oracle + 1)
    nphi = 2 * L_oracle + 1
    x, wx = leggauss(nt)
    theta = np.arccos(x)
    phi = 2.0 * math.pi * np.arange(nphi) / nphi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.repeat(wx, nphi) * (2.0 * math.pi / nphi)
    return T.ravel(), P.ravel(), W


def sphere_quadrature_sht(func, L: int, L_oracle: int) -> np.ndarray:
    """SH coefficients (even degrees up to ``L``) of ``func(theta, phi)`` by quadrature.

    ``func`` may return ``(n_points,)`` or ``(n_points, n_batch)``.
    """
    theta, phi, w = _sphere_quadrature(L_oracle)
    vals = np.asarray(func(theta, phi))
    Y = sh_matrix(L, theta, phi)
    wv = w.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals
    return Y.conj().T @ wv


def oracle_sh_coeffs(phantom: GmmPhantom, b: float, L: int, margin: int = 16) -> ShCoeffs:
    """Noise-free SH coefficients of the phantom at one b-value."""
    data = sphere_quadrature_sht(lambda t, p: gmm_signal(phantom, b, _unit(t, p)), L, L + margin)
    return ShCoeffs(L, data)


def oracle_spf_coeffs(phantom: GmmPhantom, spec: RadialBasisSpec, N: int, L: int,
                      margin: int = 12, sh_margin: int = 16) -> SpfCoeffs:
    """Noise-free SPF coefficients from dense radial and angular quadrature."""
    rule = gauss_laguerre_rule(N + margin, spec)
    theta, phi, w = _sphere_quadrature(L + sh_margin)
    u = _unit(theta, phi)
    Y = sh_matrix(L, theta, phi)
    # (n_points, n_nodes)
    vals = gmm_signal(phantom, rule.b[None, :], u[:, None, :])
    c = Y.conj().T @ (w[:, None] * vals)  # (K, n_nodes)
    R = radial_matrix(N, rule.q, RadialBasisSpec(N, spec.zeta))  # (n_nodes, N + 1)
    e = (c * rule.weights[None, :]) @ R  # (K, N + 1)
    return SpfCoeffs(N, L, e.T.reshape(-1))


def phantom_on_grid(phantom: GmmPhantom, grid, b: float | None = None) -> np.ndarray:
    """Noise-free samples on a single-shell (needs ``b``) or multi-shell grid."""
    from .sampling import MultiShellGrid

    if isinstance(grid, MultiShellGrid):
        return gmm_signal(phantom, grid.bvalues(), grid.directions(physical=False))
    if b is None:
        raise ValueError("b-value required for a single-shell grid")
    return gmm_signal(phantom, b, grid.directions(physical=False))
