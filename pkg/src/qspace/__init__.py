"""Sampling schemes and fast transforms for single- and multi-shell diffusion MRI.

Iso-latitude sampling grids with the minimum number of samples, an exact
order-by-order spherical harmonic transform on them, its spherical polar
Fourier extension across shells, regularized variants, and majorize-minimize
denoising under Rician or non-central chi noise.
"""

from .metrics import nrmse
from .noise_model import MmConfig, NoiseSpec, mm_denoise_multi, mm_denoise_single
from .phantom import GmmPhantom, crossing_phantom, fa_phantom, gmm_signal
from .sampling import (
    MultiShellGrid,
    SingleShellGrid,
    bandlimit_for_bvalue,
    multi_shell_grid,
    single_shell_grid,
)
from .sph_core import RadialBasisSpec, gauss_laguerre_rule, sh_matrix
from .transforms import (
    ShCoeffs,
    SpfCoeffs,
    inverse_sht,
    inverse_spft,
    ls_spft,
    ls_sht,
    nsht,
    nspft,
)

__version__ = "0.1.0"

__all__ = [
    "nrmse", "MmConfig", "NoiseSpec", "mm_denoise_multi", "mm_denoise_single",
    "GmmPhantom", "crossing_phantom", "fa_phantom", "gmm_signal",
    "MultiShellGrid", "SingleShellGrid", "bandlimit_for_bvalue", "multi_shell_grid",
    "single_shell_grid", "RadialBasisSpec", "gauss_laguerre_rule", "sh_matrix",
    "ShCoeffs", "SpfCoeffs", "inverse_sht", "inverse_spft", "ls_spft", "ls_sht",
    "nsht", "nspft",
]
