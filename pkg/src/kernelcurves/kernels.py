"""Dot-product kernels on the sphere and their Mercer spectra.

The ReLU NTK/NNGP recursions use the normalization in which every layer's
NNGP kernel satisfies ``K(x, x) = 1``, i.e. the activation is ``sqrt(2) relu``.
With that convention the depth-``L`` NTK has ``kappa(1) = L``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .harmonics import (
    QuadratureRule,
    check_dim,
    degeneracies,
    degeneracy,
    gegenbauer_all,
    measure_ratio,
    quadrature,
)

log = logging.getLogger(__name__)

_DOMAIN_TOL = 1e-12
# Relative size (to the largest eigenvalue) of a negative quadrature
# eigenvalue that is still attributed to roundoff.
NEGATIVE_TOL = 1e-10
DEFAULT_KMAX = 60
DEFAULT_ORDER = 1000


def _cosines(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z) > 1 + _DOMAIN_TOL):
        raise ValueError("cosine argument outside [-1, 1]")
    return np.clip(z, -1.0, 1.0)


def relu_arccos_map(z):
    """NNGP layer map for ReLU on cosines: ``(sqrt(1-z^2) + (pi - arccos z) z) / pi``."""
    z = _cosines(z)
    return (np.sqrt(1.0 - z * z) + (np.pi - np.arccos(z)) * z) / np.pi


def _ntk_nngp(depth: int, z):
    if int(depth) != depth or depth < 1:
        raise ValueError(f"depth must be an integer >= 1, got {depth!r}")
    nngp = _cosines(z)
    ntk = nngp.copy()
    for _ in range(2, int(depth) + 1):
        kdot = 1.0 - np.arccos(nngp) / np.pi
        nngp = np.clip(relu_arccos_map(nngp), -1.0, 1.0)
        ntk = nngp + ntk * kdot
    return ntk, nngp


def ntk_kappa(depth: int, z):
    """Bias-free fully connected ReLU NTK of the given depth, as a function of cosine."""
    out = _ntk_nngp(depth, z)[0]
    return float(out) if out.ndim == 0 else out


def nngp_kappa(depth: int, z):
    """NNGP kernel of the same network (``z`` itself at depth 1)."""
    out = _ntk_nngp(depth, z)[1]
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DotKernel:
    """Kernel ``K(x, x') = kappa(x . x')`` for unit-norm inputs."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    label: str
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, z):
        return self.evaluator(z)

    @property
    def diagonal(self) -> float:
        return float(self.evaluator(np.array(1.0)))


def ntk_kernel(depth: int) -> DotKernel:
    return DotKernel(
        lambda z: _ntk_nngp(depth, z)[0], f"ntk-depth-{depth}", {"type": "ntk", "depth": depth}
    )


def nngp_kernel(depth: int) -> DotKernel:
    return DotKernel(
        lambda z: _ntk_nngp(depth, z)[1], f"nngp-depth-{depth}", {"type": "nngp", "depth": depth}
    )


def linear_kernel() -> DotKernel:
    return DotKernel(lambda z: _cosines(z), "linear", {"type": "linear"})


def constant_kernel(c: float = 1.0) -> DotKernel:
    return DotKernel(
        lambda z: np.full_like(_cosines(z), c), f"constant-{c:g}", {"type": "constant", "c": c}
    )


def gaussian_dot_kernel(lengthscale: float) -> DotKernel:
    """RBF kernel restricted to the sphere: ``exp(-|x-x'|^2 / 2l^2) = exp((z-1)/l^2)``."""
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    ell2 = float(lengthscale) ** 2
    return DotKernel(
        lambda z: np.exp((_cosines(z) - 1.0) / ell2),
        f"gaussian-l{lengthscale:g}",
        {"type": "gaussian", "lengthscale": lengthscale},
    )


def kernel_from_config(cfg: dict) -> DotKernel:
    """Build a kernel from ``{"type": "ntk", "depth": 3}``-style records."""
    kind = cfg.get("type")
    if kind == "ntk":
        return ntk_kernel(int(cfg["depth"]))
    if kind == "nngp":
        return nngp_kernel(int(cfg["depth"]))
    if kind == "gaussian":
        return gaussian_dot_kernel(float(cfg["lengthscale"]))
    if kind == "linear":
        return linear_kernel()
    raise ValueError(f"unknown kernel type {kind!r}")


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues grouped into degenerate levels.

    ``measure`` is ``"sphere"`` (degeneracy N(d,k)), ``"gaussian"``
    (degeneracy binom(d+k-1, k)) or ``"discrete"`` (one mode per level).
    """

    eigenvalues: np.ndarray
    degeneracies: np.ndarray
    d: int | None = None
    measure: str = "sphere"
    label: str = ""
    tail_mass_estimate: float = 0.0
    quad_order: int | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        deg = np.asarray(self.degeneracies, dtype=float)
        if lam.ndim != 1 or lam.shape != deg.shape:
            raise ValueError("eigenvalues and degeneracies must be 1-d and aligned")
        if np.any(lam < 0):
            raise ValueError("spectrum eigenvalues must be nonnegative")
        if np.any(deg < 1):
            raise ValueError("degeneracies must be >= 1")
        lam.setflags(write=False)
        deg.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "degeneracies", deg)

    @property
    def kmax(self) -> int:
        return len(self.eigenvalues) - 1

    @property
    def levels(self) -> np.ndarray:
        return np.arange(len(self.eigenvalues))

    @property
    def trace(self) -> float:
        """``sum_k N_k lambda_k`` over the retained levels."""
        return float(self.degeneracies @ self.eigenvalues)

    @property
    def mode_count(self) -> float:
        """Number of modes with strictly positive eigenvalue."""
        return float(self.degeneracies[self.eigenvalues > 0].sum())

    def truncate(self, kmax: int) -> Spectrum:
        lam, deg = self.eigenvalues[: kmax + 1], self.degeneracies[: kmax + 1]
        tail = self.tail_mass_estimate + float(
            self.degeneracies[kmax + 1 :] @ self.eigenvalues[kmax + 1 :]
        )
        return replace(self, eigenvalues=lam, degeneracies=deg, tail_mass_estimate=tail)

    # -- serialization -------------------------------------------------

    def save(self, path) -> None:
        """Write ``k,lambda,degeneracy`` CSV plus a ``.json`` sidecar."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "lambda", "degeneracy"])
            for k, (lam, deg) in enumerate(zip(self.eigenvalues, self.degeneracies)):
                w.writerow([k, f"{lam:.17g}", _format_degeneracy(self, k, deg)])
        meta = {
            "d": self.d,
            "kmax": self.kmax,
            "label": self.label,
            "tail_mass_estimate": float(f"{self.tail_mass_estimate:.17g}"),
            "quad_order": self.quad_order,
            "measure": self.measure,
        }
        sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> Spectrum:
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"k", "lambda", "degeneracy"}:
            raise ValueError(f"{path}: expected header k,lambda,degeneracy")
        ks = [int(r["k"]) for r in rows]
        if ks != list(range(len(ks))):
            raise ValueError(f"{path}: levels must be consecutive from k=0")
        meta = {}
        side = sidecar_path(path)
        if side.exists():
            meta = json.loads(side.read_text())
        return cls(
            eigenvalues=np.array([float(r["lambda"]) for r in rows]),
            degeneracies=np.array([float(int(r["degeneracy"])) for r in rows]),
            d=meta.get("d"),
            measure=meta.get("measure", "sphere"),
            label=meta.get("label", ""),
            tail_mass_estimate=float(meta.get("tail_mass_estimate", 0.0)),
            quad_order=meta.get("quad_order"),
        )


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _format_degeneracy(spec: Spectrum, k: int, deg: float) -> str:
    if spec.measure == "sphere" and spec.d is not None:
        return str(degeneracy(spec.d, k))
    if spec.measure == "gaussian" and spec.d is not None:
        return str(math.comb(spec.d + k - 1, k))
    return str(int(deg))


def _clamp_negative(lam: np.ndarray, label: str) -> np.ndarray:
    scale = float(np.max(np.abs(lam))) if lam.size else 0.0
    neg = lam < 0
    if not neg.any():
        return lam
    worst = float(lam.min())
    if worst < -NEGATIVE_TOL * scale:
        raise ValueError(
            f"{label}: eigenvalue {worst:.3e} is negative beyond roundoff; the kernel "
            "is not positive semi-definite or the quadrature order is too low"
        )
    log.warning("%s: clamping %d roundoff-negative eigenvalues to 0", label, int(neg.sum()))
    lam = lam.copy()
    lam[neg] = 0.0
    return lam


def gegenbauer_coefficients(f, d: int, kmax: int, rule: QuadratureRule) -> np.ndarray:
    """``a_k = <f, Q_k>`` under the normalized measure of ``z``, for ``k <= kmax``."""
    check_dim(d)
    if rule.d != d:
        raise ValueError(f"quadrature rule built for d={rule.d}, not d={d}")
    fz = np.asarray(f(rule.nodes), dtype=float)
    Q = gegenbauer_all(d, kmax, rule.nodes.astype(np.longdouble))
    return (Q @ (rule.weights * fz)).astype(float) * measure_ratio(d)


def expand_scalar_function(f, d: int, kmax: int, rule: QuadratureRule | None = None) -> np.ndarray:
    """Coefficients of ``f(z) = sum_k a_k N(d,k) Q_k(z)``."""
    if rule is None:
        rule = quadrature(d, max(DEFAULT_ORDER, 4 * kmax))
    return gegenbauer_coefficients(f, d, kmax, rule)


def spectrum_from_kernel(
    kernel: DotKernel, d: int, kmax: int = DEFAULT_KMAX, rule: QuadratureRule | None = None
) -> Spectrum:
    """Mercer eigenvalues of a dot-product kernel under the uniform measure on S^{d-1}."""
    d = check_dim(d)
    if rule is None:
        rule = quadrature(d, max(DEFAULT_ORDER, 4 * kmax))
    if rule.order < kmax + 2:
        raise ValueError(f"quadrature order {rule.order} too low for kmax={kmax}")
    lam = _clamp_negative(gegenbauer_coefficients(kernel, d, kmax, rule), kernel.label)
    deg = degeneracies(d, kmax)
    tail = kernel.diagonal - float(deg @ lam)
    return Spectrum(
        eigenvalues=lam,
        degeneracies=deg,
        d=d,
        measure="sphere",
        label=f"{kernel.label}-d{d}",
        tail_mass_estimate=tail,
        quad_order=rule.order,
    )


def ntk_spectrum(depth: int, d: int, kmax: int = DEFAULT_KMAX, order: int | None = None) -> Spectrum:
    rule = quadrature(d, order or max(DEFAULT_ORDER, 4 * kmax))
    return spectrum_from_kernel(ntk_kernel(depth), d, kmax, rule)


def gaussian_spectrum(
    d: int, lengthscale: float, input_scale: float = 1.0, kmax: int = DEFAULT_KMAX
) -> Spectrum:
    """Closed-form spectrum of the RBF kernel under an isotropic Gaussian input law.

    Each coordinate has variance ``input_scale**2``.  With ``a = 1/(4 s^2)``,
    ``b = 1/(2 l^2)``, ``c = sqrt(a^2 + 2ab)``, ``A = a+b+c`` and ``B = b/A``
    the degree-``k`` eigenvalue is ``(2a/A)^(d/2) B^k``, repeated
    ``binom(d+k-1, k)`` times.
    """
    if int(d) != d or d < 1:
        raise ValueError("dimension must be a positive integer")
    if lengthscale <= 0 or input_scale <= 0:
        raise ValueError("lengthscale and input_scale must be positive")
    d = int(d)
    a = 1.0 / (4.0 * input_scale**2)
    b = 1.0 / (2.0 * lengthscale**2)
    c = math.sqrt(a * a + 2 * a * b)
    A = a + b + c
    B = b / A
    k = np.arange(kmax + 1)
    lam = np.exp(0.5 * d * math.log(2 * a / A) + k * math.log(B))
    deg = np.array([float(math.comb(d + kk - 1, kk)) for kk in range(kmax + 1)])
    return Spectrum(
        eigenvalues=lam,
        degeneracies=deg,
        d=d,
        measure="gaussian",
        label=f"gaussian-l{lengthscale:g}-s{input_scale:g}-d{d}",
        tail_mass_estimate=1.0 - float(deg @ lam),
    )


def discrete_spectrum_levels(eigenvalues: Sequence[float], label: str = "") -> Spectrum:
    """Wrap a per-mode eigenvalue list (degeneracy 1 each) as a Spectrum."""
    lam = np.asarray(eigenvalues, dtype=float)
    return Spectrum(eigenvalues=lam, degeneracies=np.ones_like(lam), measure="discrete", label=label)
