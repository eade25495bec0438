"""Spectral learning curves for kernel regression and wide networks."""

from .harmonics import degeneracy, gegenbauer, gegenbauer_all, measure_ratio, quadrature
from .kernels import (
    DotKernel,
    Spectrum,
    gaussian_spectrum,
    kernel_from_config,
    ntk_kernel,
    ntk_spectrum,
    nngp_kernel,
    spectrum_from_kernel,
)
from .theory import (
    TargetPowers,
    TheoryCurve,
    kernel_teacher_powers,
    learning_curve,
    mode_errors,
    multi_output_curve,
    pure_mode_powers,
    solve_t,
    stage_ratios,
)

__all__ = [
    "DotKernel",
    "Spectrum",
    "TargetPowers",
    "TheoryCurve",
    "degeneracy",
    "gaussian_spectrum",
    "gegenbauer",
    "gegenbauer_all",
    "kernel_from_config",
    "kernel_teacher_powers",
    "learning_curve",
    "measure_ratio",
    "mode_errors",
    "multi_output_curve",
    "nngp_kernel",
    "ntk_kernel",
    "ntk_spectrum",
    "pure_mode_powers",
    "quadrature",
    "solve_t",
    "spectrum_from_kernel",
    "stage_ratios",
]
