import math

import numpy as np
import pytest
from scipy import integrate, special

from kernelcurves.harmonics import degeneracy, measure_ratio, quadrature
from kernelcurves.kernels import (
    DotKernel,
    Spectrum,
    gaussian_dot_kernel,
    gaussian_spectrum,
    kernel_from_config,
    linear_kernel,
    nngp_kappa,
    ntk_kappa,
    ntk_kernel,
    relu_arccos_map,
    spectrum_from_kernel,
)


@pytest.mark.parametrize("depth", [1, 2, 3, 10])
def test_ntk_diagonal_equals_depth(depth):
    assert ntk_kappa(depth, 1.0) == pytest.approx(depth, rel=1e-14)
    assert nngp_kappa(depth, 1.0) == pytest.approx(1.0, rel=1e-14)


def test_two_layer_ntk_closed_form():
    z = np.linspace(-1, 1, 21)
    theta = np.arccos(z)
    expected = (np.sin(theta) + (np.pi - theta) * z) / np.pi + z * (np.pi - theta) / np.pi
    np.testing.assert_allclose(ntk_kappa(2, z), expected, atol=1e-14)


def test_arccos_map_fixes_one():
    assert relu_arccos_map(1.0) == pytest.approx(1.0)
    assert relu_arccos_map(-1.0) == pytest.approx(0.0, abs=1e-15)
    assert relu_arccos_map(0.0) == pytest.approx(1 / np.pi)


def test_nngp_matches_monte_carlo_network():
    # Activation sqrt(2) relu keeps unit variance; the layer map must agree
    # with a direct Gaussian average to Monte Carlo accuracy.
    rng = np.random.default_rng(11)
    n = 1_000_000
    for z in [-0.7, 0.0, 0.4, 0.9]:
        u = rng.standard_normal(n)
        v = z * u + math.sqrt(1 - z * z) * rng.standard_normal(n)
        prod = 2 * np.maximum(u, 0) * np.maximum(v, 0)
        se = prod.std(ddof=1) / math.sqrt(n)
        assert abs(prod.mean() - relu_arccos_map(z)) < 4 * se


def test_ntk_derivative_factor_monte_carlo():
    rng = np.random.default_rng(12)
    n = 1_000_000
    z = 0.3
    u = rng.standard_normal(n)
    v = z * u + math.sqrt(1 - z * z) * rng.standard_normal(n)
    prod = 2.0 * ((u > 0) & (v > 0))
    se = prod.std(ddof=1) / math.sqrt(n)
    assert abs(prod.mean() - (1 - np.arccos(z) / np.pi)) < 4 * se


def test_domain_check():
    with pytest.raises(ValueError):
        ntk_kappa(3, 1.01)
    with pytest.raises(ValueError):
        ntk_kappa(0, 0.5)


def _funk_hecke(f, d, k):
    # Angular form avoids the endpoint singularities of the NTK in z.
    mu = (d - 2) / 2
    qk = lambda z: special.eval_gegenbauer(k, mu, z) / special.eval_gegenbauer(k, mu, 1.0)
    g = lambda th: f(np.cos(th)) * qk(np.cos(th)) * np.sin(th) ** (d - 2)
    val = integrate.quad(g, 0, np.pi, limit=1000, epsabs=1e-15, epsrel=1e-12)[0]
    return val * measure_ratio(d)


@pytest.mark.parametrize("d", [3, 10])
def test_ntk_eigenvalues_against_adaptive_quadrature(d):
    spec = spectrum_from_kernel(ntk_kernel(3), d, kmax=8)
    for k in range(9):
        ref = _funk_hecke(lambda z: ntk_kappa(3, z), d, k)
        # The NTK is not smooth at z = +-1, so the error is absolute, ~r^-3.
        assert spec.eigenvalues[k] == pytest.approx(ref, rel=1e-7, abs=1e-9)


def test_linear_kernel_spectrum():
    d = 7
    spec = spectrum_from_kernel(linear_kernel(), d, kmax=5)
    expected = np.zeros(6)
    expected[1] = 1.0 / d
    np.testing.assert_allclose(spec.eigenvalues, expected, atol=1e-15)
    assert spec.tail_mass_estimate == pytest.approx(0.0, abs=1e-14)


def test_gaussian_dot_kernel_bessel_spectrum():
    # exp((z-1)/l^2) on S^{d-1}: lambda_k = e^{-1/l^2} Gamma(d/2) (2 l^2)^{d/2-1} I_{k+d/2-1}(1/l^2)
    d, ell = 5, 0.8
    spec = spectrum_from_kernel(gaussian_dot_kernel(ell), d, kmax=10)
    s = 1 / ell**2
    nu = d / 2 - 1
    ref = [math.exp(-s) * math.gamma(d / 2) * (2 / s) ** nu * special.iv(k + nu, s) for k in range(11)]
    np.testing.assert_allclose(spec.eigenvalues, ref, rtol=1e-10, atol=1e-16)


@pytest.mark.parametrize("depth,d", [(2, 5), (3, 15), (10, 15)])
def test_spectrum_trace_accounts_for_diagonal(depth, d):
    spec = spectrum_from_kernel(ntk_kernel(depth), d, kmax=60)
    assert spec.trace + spec.tail_mass_estimate == pytest.approx(depth, rel=1e-13)
    assert spec.tail_mass_estimate >= 0
    assert np.all(spec.eigenvalues >= 0)


def test_two_layer_ntk_odd_levels_vanish():
    spec = spectrum_from_kernel(ntk_kernel(2), 6, kmax=21)
    odd = spec.eigenvalues[3::2]
    assert np.all(odd < 1e-12 * spec.eigenvalues[0])


def test_spectrum_converges_in_quadrature_order():
    a = spectrum_from_kernel(ntk_kernel(3), 15, 40, quadrature(15, 1000))
    b = spectrum_from_kernel(ntk_kernel(3), 15, 40, quadrature(15, 3000))
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-6, atol=1e-14)


def test_non_psd_kernel_raises():
    bad = DotKernel(lambda z: -np.asarray(z, dtype=float), "negated")
    with pytest.raises(ValueError, match="negative"):
        spectrum_from_kernel(bad, 5, kmax=4)


def test_gaussian_measure_spectrum_sums_to_one():
    spec = gaussian_spectrum(20, lengthscale=3.0, kmax=200)
    assert spec.trace + spec.tail_mass_estimate == pytest.approx(1.0, rel=1e-14)
    assert spec.tail_mass_estimate < 1e-10
    assert spec.degeneracies[2] == math.comb(21, 2)


def test_gaussian_measure_one_dimension_mercer():
    # Direct check against the kernel integral operator in d = 1.
    ell, s = 0.7, 1.0
    spec = gaussian_spectrum(1, ell, s, kmax=40)
    x = np.linspace(-8, 8, 1601)
    dx = x[1] - x[0]
    w = np.exp(-x * x / (2 * s * s)) / math.sqrt(2 * math.pi * s * s) * dx
    K = np.exp(-((x[:, None] - x[None]) ** 2) / (2 * ell * ell))
    sw = np.sqrt(w)
    ev = np.sort(np.linalg.eigvalsh(sw[:, None] * K * sw[None]))[::-1][:6]
    np.testing.assert_allclose(ev, spec.eigenvalues[:6], rtol=1e-8)


def test_spectrum_roundtrip(tmp_path):
    spec = spectrum_from_kernel(ntk_kernel(3), 15, kmax=20)
    path = tmp_path / "s.csv"
    spec.save(path)
    back = Spectrum.load(path)
    np.testing.assert_array_equal(back.eigenvalues, spec.eigenvalues)
    np.testing.assert_array_equal(back.degeneracies, spec.degeneracies)
    assert back.d == 15 and back.tail_mass_estimate == spec.tail_mass_estimate
    assert path.read_text().splitlines()[0] == "k,lambda,degeneracy"
    assert (tmp_path / "s.csv.json").exists()


def test_spectrum_csv_writes_exact_degeneracy(tmp_path):
    spec = spectrum_from_kernel(ntk_kernel(2), 30, kmax=40)
    spec.save(tmp_path / "s.csv")
    last = (tmp_path / "s.csv").read_text().splitlines()[-1]
    assert last.split(",")[2] == str(degeneracy(30, 40))


def test_spectrum_validation():
    with pytest.raises(ValueError):
        Spectrum(np.array([1.0, -0.1]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        Spectrum(np.array([1.0]), np.array([0.0]))


def test_kernel_from_config():
    assert kernel_from_config({"type": "ntk", "depth": 4}).diagonal == pytest.approx(4)
    assert kernel_from_config({"type": "gaussian", "lengthscale": 2}).diagonal == pytest.approx(1)
    with pytest.raises(ValueError):
        kernel_from_config({"type": "laplace"})
