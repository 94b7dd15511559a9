import csv
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from conftest import random_real_coeffs
from qspace.noise_model import (
    MmConfig,
    NoiseSpec,
    bessel_ratio,
    log_bessel_scaled,
    measurement_update,
    mm_denoise_multi,
    mm_denoise_single,
    ncc_nll,
    project_nonneg,
    sigma2_update,
)
from qspace.phantom import add_rician_noise, crossing_phantom, noise_rng, phantom_on_grid
from qspace.sampling import multi_shell_grid, single_shell_grid
from qspace.sph_core import sh_matrix
from qspace.transforms import ls_sht, nsht, nspft, spf_matrix

mp.mp.dps = 40


def mp_ratio(C, z):
    return float(mp.besseli(C, z) / mp.besseli(C - 1, z))


def mp_nll(d, k, s2, C):
    nu = C - 1
    total = mp.mpf(0)
    for di, ki in zip(d, k):
        di, ki = mp.mpf(di), mp.mpf(ki)
        total += ki**2 / (2 * s2) - mp.log(mp.besseli(nu, ki * di / s2)) + nu * mp.log(ki)
    return float(total)


# --- configuration ---------------------------------------------------------


def test_spec_validation():
    assert NoiseSpec(0.01).rician
    assert not NoiseSpec(0.01, 4).rician
    for bad in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(ValueError):
            NoiseSpec(bad)
    with pytest.raises(ValueError):
        NoiseSpec(1.0, 0)
    with pytest.raises(ValueError):
        MmConfig(nonneg="maybe")
    with pytest.raises(ValueError):
        MmConfig(max_iters=0)
    assert MmConfig(nonneg=True).nonneg_mode == "clamp"
    assert MmConfig(nonneg=False).nonneg_mode is None


# --- Bessel ratio ----------------------------------------------------------


def test_ratio_trivial_values():
    assert bessel_ratio(1, 0.0) == 0.0
    assert abs(bessel_ratio(1, 1e6) - 1.0) <= 1e-6
    assert_allclose(bessel_ratio(1, 1e6), 1 - 1 / 2e6, rtol=1e-11)


def test_ratio_reference_value():
    assert_allclose(bessel_ratio(1, 2.0), mp_ratio(1, 2.0), rtol=1e-14)
    assert bessel_ratio(1, 2.0) == pytest.approx(0.69777, abs=5e-6)


@pytest.mark.parametrize("C", [1, 2, 4, 8])
def test_ratio_vs_mpmath(C):
    z = np.logspace(-10, 12, 89)
    got = bessel_ratio(C, z)
    want = np.array([mp_ratio(C, zi) for zi in z])
    assert_allclose(got, want, rtol=1e-13)
    assert np.all(np.isfinite(got))


@given(st.floats(0.0, 1e9), st.floats(0.0, 1e9))
def test_ratio_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    r = bessel_ratio(1, np.array([lo, hi]))
    assert 0.0 <= r[0] <= r[1] < 1.0 or r[1] == 1.0


def test_ratio_odd():
    z = np.array([0.3, 5.0, 1e5])
    assert_allclose(bessel_ratio(2, -z), -bessel_ratio(2, z))


def test_log_bessel_scaled():
    for nu in (0, 1, 3):
        for z in (0.0, 1e-8, 0.5, 30.0, 700.0, 1e5, 1e11):
            if z == 0.0:
                want = -nu * math.log(2) - math.lgamma(nu + 1)
            else:
                want = float(mp.log(mp.besseli(nu, z) / mp.mpf(z) ** nu))
            assert_allclose(log_bessel_scaled(nu, z), want, rtol=1e-13, atol=1e-14)


# --- measurement update ----------------------------------------------------


def test_measurement_update_limits(rng):
    d = rng.uniform(0.1, 2.0, 20)
    assert np.all(measurement_update(d, np.zeros(20), NoiseSpec(0.1)) == 0)
    k = rng.uniform(0.1, 2.0, 20)
    assert_allclose(measurement_update(d, k, NoiseSpec(1e-300)), d, rtol=1e-15)


def test_measurement_update_direct(rng):
    d = rng.uniform(0.0, 3.0, 15)
    k = rng.uniform(0.0, 3.0, 15)
    for C, s2 in ((1, 0.04), (3, 0.3)):
        got = measurement_update(d, k, NoiseSpec(s2, C))
        want = [di * mp_ratio(C, ki * di / s2) if ki * di > 0 else 0.0 for di, ki in zip(d, k)]
        assert_allclose(got, want, rtol=1e-12, atol=1e-300)


# --- sigma^2 update --------------------------------------------------------


def test_sigma2_perfect_fit():
    d = np.linspace(0.5, 1.5, 30)
    s2 = sigma2_update(d, d, NoiseSpec(1.0), sigma2_prev=1e-30)
    assert s2 == pytest.approx(1e-12 * np.mean(d * d))


def test_sigma2_zero_prediction():
    d = np.array([0.3, 1.2, 0.7, 2.0])
    for C in (1, 2):
        s2 = sigma2_update(d, np.zeros(4), NoiseSpec(0.5, C))
        assert s2 == pytest.approx(d @ d / (2 * C * 4))


def test_sigma2_monte_carlo():
    sigma = 0.1
    k = np.linspace(0.5, 1.5, 1000)
    d = add_rician_noise(k, 1.0, 10.0, noise_rng("sigma-mc", 0))
    s2 = 0.05
    for _ in range(200):
        s2 = sigma2_update(d, k, NoiseSpec(1.0), sigma2_prev=s2)
    assert abs(s2 - sigma**2) <= 0.1 * sigma**2


# --- likelihood ------------------------------------------------------------


def test_nll_decreases_toward_data():
    d = np.array([1.0, 2.0, 0.5])
    spec = NoiseSpec(1.0)
    vals = [ncc_nll(d, t * d, spec) for t in (0.0, 0.1, 0.2, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_nll_vs_mpmath():
    r = np.random.default_rng(7)
    for _ in range(10):
        M = int(r.integers(2, 8))
        d = r.uniform(0.05, 3.0, M)
        k = r.uniform(0.05, 3.0, M)
        C = int(r.integers(1, 4))
        s2 = float(r.uniform(0.01, 1.0))
        assert_allclose(ncc_nll(d, k, NoiseSpec(s2, C)), mp_nll(d, k, s2, C), rtol=1e-9)


def test_nll_additive(rng):
    d = rng.uniform(0, 2, 12)
    k = rng.uniform(0, 2, 12)
    spec = NoiseSpec(0.2, 2)
    assert_allclose(ncc_nll(d, k, spec), ncc_nll(d[:5], k[:5], spec) + ncc_nll(d[5:], k[5:], spec))


def test_nll_zero_prediction_finite():
    assert np.isfinite(ncc_nll(np.array([0.4, 1.0]), np.zeros(2), NoiseSpec(0.1)))


# --- MM loop ---------------------------------------------------------------


@pytest.fixture(scope="module")
def g8():
    return single_shell_grid(8)


def noisy_single(grid, snr, seed):
    clean = phantom_on_grid(crossing_phantom(90), grid, 4000.0)
    return clean, add_rician_noise(clean, 1.0, snr, noise_rng("mm-test", seed))


@pytest.mark.parametrize("method", ["nsht", "ls"])
def test_sigma_zero_reproduces_transform(g8, method):
    _, d = noisy_single(g8, 10, 1)
    lam = 1e-3
    res = mm_denoise_single(d, g8, lam, NoiseSpec(1e-300), MmConfig(max_iters=1, nonneg=False))
    ref = nsht(d, g8, lam) if method == "nsht" else ls_sht(d, g8, lam=lam)
    if method == "ls":
        res = mm_denoise_single(d, g8, lam, NoiseSpec(1e-300), MmConfig(max_iters=1, nonneg=False),
                                method="ls")
    assert np.linalg.norm(res.coeffs.data - ref.data) <= 1e-10 * np.linalg.norm(ref.data)


def test_exact_recovery_noiseless(g8, rng):
    c = 0.05 * random_real_coeffs(8, rng)
    c[0] = 20.0  # keep the signal positive
    theta, phi = g8.points()
    d = (sh_matrix(8, theta, phi) @ c).real
    assert d.min() > 0
    res = mm_denoise_single(d, g8, 0.0, NoiseSpec(1e-14), MmConfig(max_iters=50))
    assert np.linalg.norm(res.coeffs.data - c) <= 1e-8 * np.linalg.norm(c)
    assert res.converged.all()


def test_mm_ls_objective_monotone(g8):
    _, d = noisy_single(g8, 10, 2)
    res = mm_denoise_single(d, g8, 1e-3, NoiseSpec(0.01), MmConfig(max_iters=60), method="ls")
    assert np.all(np.diff(res.objective[:, 0]) <= 1e-9)


def test_mm_denoising_helps_at_low_snr(g8):
    from qspace.phantom import oracle_sh_coeffs
    from qspace.metrics import nrmse

    truth = oracle_sh_coeffs(crossing_phantom(90), 4000.0, 8).data
    clean = phantom_on_grid(crossing_phantom(90), g8, 4000.0)
    D = np.stack([add_rician_noise(clean, 1.0, 10, noise_rng("mm-gain", r)) for r in range(40)],
                 axis=1)
    best_reg, best_den = np.inf, np.inf
    for lam in (1e-3, 3e-3, 1e-2, 3e-2, 1e-1):
        reg = nrmse(nsht(D, g8, lam).data, truth).mean()
        den = mm_denoise_single(D, g8, lam, NoiseSpec(0.01), MmConfig(), track=False)
        best_reg = min(best_reg, reg)
        best_den = min(best_den, nrmse(den.coeffs.data, truth).mean())
    assert best_den < best_reg


def test_mm_batched_matches_columns(g8):
    _, d1 = noisy_single(g8, 10, 3)
    _, d2 = noisy_single(g8, 10, 4)
    cfg = MmConfig(max_iters=30)
    both = mm_denoise_single(np.stack([d1, d2], 1), g8, 1e-2, NoiseSpec(0.01), cfg)
    one = mm_denoise_single(d2, g8, 1e-2, NoiseSpec(0.01), cfg)
    assert_allclose(both.coeffs.data[:, 1], one.coeffs.data, atol=1e-12)


def test_mm_nonconvergence_flag(g8):
    _, d = noisy_single(g8, 10, 5)
    res = mm_denoise_single(d, g8, 1e-2, NoiseSpec(0.01), MmConfig(max_iters=2, tol=1e-15))
    assert not res.converged[0] and res.n_iter[0] == 2
    assert res.objective.shape == (3, 1)


def test_mm_estimate_sigma(g8):
    D = np.stack([noisy_single(g8, 10, s)[1] for s in range(20)], axis=1)
    res = mm_denoise_single(D, g8, 1e-2, None, MmConfig(estimate_sigma=True, max_iters=300))
    assert np.all(np.isfinite(res.sigma2)) and np.all(res.sigma2 > 0)
    with pytest.raises(ValueError):
        mm_denoise_single(D, g8, 1e-2, None, MmConfig())


def test_mm_unknown_method(g8):
    with pytest.raises(ValueError):
        mm_denoise_single(np.ones(45), g8, 0.0, NoiseSpec(0.1), method="fft")


def test_diagnostics_csv(g8, tmp_path):
    _, d = noisy_single(g8, 10, 6)
    res = mm_denoise_single(d, g8, 1e-2, NoiseSpec(0.01), MmConfig(max_iters=5, tol=1e-15))
    path = tmp_path / "diag.csv"
    res.write_diagnostics(path)
    rows = list(csv.DictReader(open(path)))
    assert [r["iter"] for r in rows] == [str(i) for i in range(6)]
    assert set(rows[0]) == {"iter", "objective", "sigma2", "coeff_delta"}


@pytest.mark.parametrize("method", ["nsht", "ls"])
def test_qp_mode_nonnegative(g8, method):
    clean = phantom_on_grid(crossing_phantom(90), g8, 4000.0)
    d = add_rician_noise(clean, 1.0, 5, noise_rng("qp", 0))
    res = mm_denoise_single(d, g8, 0.0, NoiseSpec(0.04), MmConfig(nonneg="qp", max_iters=20),
                            method=method)
    theta, phi = g8.points()
    pred = (sh_matrix(8, theta, phi) @ res.coeffs.data).real
    assert pred.min() >= -1e-8


def test_project_nonneg_kkt(rng):
    A = rng.standard_normal((12, 5))
    H = A.T @ A + np.eye(5)
    c0 = rng.standard_normal(5) - 2.0
    c = project_nonneg(c0.astype(complex), H.astype(complex), A.astype(complex), iters=5000)
    assert (A @ c).real.min() >= -1e-7
    # feasible input is returned unchanged
    feas = np.linalg.lstsq(A, np.abs(rng.standard_normal(12)) + 1, rcond=None)[0]
    if (A @ feas).min() >= 0:
        assert_allclose(project_nonneg(feas.astype(complex), H, A).real, feas, atol=1e-10)


# --- multi-shell -----------------------------------------------------------


@pytest.fixture(scope="module")
def mgrid():
    return multi_shell_grid(3, 4000.0, 0.8)


@pytest.mark.parametrize("method", ["nspft", "ls"])
def test_multi_sigma_zero(mgrid, method):
    clean = phantom_on_grid(crossing_phantom(45), mgrid)
    d = add_rician_noise(clean, 1.0, 10, noise_rng("mm-multi", 0))
    cfg = MmConfig(max_iters=1, nonneg=False)
    res = mm_denoise_multi(d, mgrid, 1e-3, 1e-4, NoiseSpec(1e-300), cfg, method=method)
    if method == "nspft":
        ref = nspft(d, mgrid, 1e-3, 1e-4).data
    else:
        from qspace.transforms import ls_spft

        ref = ls_spft(d, mgrid, 1e-3, 1e-4).data
    assert np.linalg.norm(res.coeffs.data - ref) <= 1e-10 * np.linalg.norm(ref)


def test_multi_ls_monotone(mgrid):
    clean = phantom_on_grid(crossing_phantom(45), mgrid)
    d = add_rician_noise(clean, 1.0, 10, noise_rng("mm-multi", 1))
    res = mm_denoise_multi(d, mgrid, 1e-3, 1e-3, NoiseSpec(0.01), MmConfig(max_iters=50),
                           method="ls")
    assert np.all(np.diff(res.objective[:, 0]) <= 1e-9)


def test_multi_exact_recovery(mgrid, rng):
    from qspace.sph_core import n_sh_coeffs, sh_indices

    ell, _ = sh_indices(8)
    e = np.zeros(4 * n_sh_coeffs(8), dtype=complex)
    for n in range(4):
        blk = np.zeros(n_sh_coeffs(8), dtype=complex)
        blk[ell <= 2] = 1e-4 * random_real_coeffs(2, rng)
        e[n * 45:(n + 1) * 45] = blk
    e[0] = 1.0
    theta, phi, q = mgrid.points()
    d = (spf_matrix(3, 8, theta, phi, q, mgrid.radial) @ e).real
    assert d.min() > 0
    res = mm_denoise_multi(d, mgrid, 0.0, 0.0, NoiseSpec(1e-16), MmConfig(max_iters=50))
    assert np.linalg.norm(res.coeffs.data - e) <= 1e-8 * np.linalg.norm(e)
