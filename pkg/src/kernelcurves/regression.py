"""Monte Carlo kernel ridge regression on the sphere with per-level error decomposition."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh

from .harmonics import check_dim, gegenbauer_all, gegenbauer_matrix_iter
from .kernels import (
    DotKernel,
    Spectrum,
    gaussian_spectrum,
    kernel_from_config,
    sidecar_path,
    spectrum_from_kernel,
)
from .harmonics import quadrature
from .theory import TheoryCurve, kernel_teacher_powers, learning_curve, pure_mode_powers

log = logging.getLogger(__name__)

_DOT_TOL = 1e-12
_NEG_TOL = 1e-10


class KRRFitError(RuntimeError):
    pass


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("KERNELCURVES_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class SphericalSample:
    points: np.ndarray
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def sample_sphere_rng(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform points on S^{d-1}: normalized standard Gaussian draws."""
    check_dim(d)
    if n < 0:
        raise ValueError("n must be nonnegative")
    x = rng.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1)
    while np.any(norms == 0):
        bad = norms == 0
        x[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(x, axis=1)
    return x / norms[:, None]


def sample_sphere(d: int, n: int, seed: int | None = None) -> SphericalSample:
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = sample_sphere_rng(d, n, np.random.default_rng(seed))
    return SphericalSample(pts, seed)


def _dots(A, B) -> np.ndarray:
    Z = np.asarray(A, dtype=float) @ np.asarray(B, dtype=float).T
    if np.any(np.abs(Z) > 1 + _DOT_TOL):
        raise ValueError("dot products exceed 1; inputs are not unit-norm")
    return np.clip(Z, -1.0, 1.0)


def _self_dots(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    norms2 = np.einsum("ij,ij->i", A, A)
    if np.any(np.abs(norms2 - 1) > _DOT_TOL):
        raise ValueError("inputs are not unit-norm")
    Z = _dots(A, A)
    Z = 0.5 * (Z + Z.T)
    # Exact ones on the diagonal: kernels with a sqrt(1 - z) term would
    # otherwise turn 1e-16 roundoff into 1e-8 errors.
    np.fill_diagonal(Z, 1.0)
    return Z


def gram(kernel: DotKernel, A, B=None) -> np.ndarray:
    """Matrix of ``kappa(a_i . b_j)``; symmetric by construction when ``B`` is omitted."""
    if B is None:
        return kernel(_self_dots(A))
    return kernel(_dots(A, B))


def rbf_gram(A, B, lengthscale: float) -> np.ndarray:
    """``exp(-|a-b|^2 / 2 l^2)`` for points in R^d."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T
    return np.exp(-np.maximum(sq, 0.0) / (2 * lengthscale**2))


# ---------------------------------------------------------------------------
# regression


def krr_fit(K, y, ridge: float) -> np.ndarray:
    """Solve ``(K + ridge I) alpha = y`` by Cholesky, with one refinement step.

    No jitter is ever added: a failed factorization at ``ridge = 0`` is
    reported with the smallest eigenvalue of ``K``.
    """
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    A = K + ridge * np.eye(K.shape[0]) if ridge else K
    try:
        factor = cho_factor(A, lower=True, check_finite=True)
    except LinAlgError:
        min_eig = float(eigvalsh(A, subset_by_index=[0, 0])[0])
        raise KRRFitError(
            f"Cholesky factorization failed (ridge={ridge:g}, min eigenvalue {min_eig:.3e}); "
            "the Gram matrix is numerically singular. Use a positive ridge or add explicit jitter."
        ) from None
    pivots = np.diag(factor[0]) ** 2
    if pivots.min() <= A.shape[0] * np.finfo(float).eps * np.abs(np.diag(A)).max():
        min_eig = float(eigvalsh(A, subset_by_index=[0, 0])[0])
        raise KRRFitError(
            f"Gram matrix is numerically singular (ridge={ridge:g}, min eigenvalue {min_eig:.3e}); "
            "use a positive ridge or add explicit jitter."
        )
    alpha = cho_solve(factor, y)
    alpha += cho_solve(factor, y - A @ alpha)
    resid = np.linalg.norm(A @ alpha - y)
    if resid > 1e-8 * max(np.linalg.norm(y), np.finfo(float).tiny):
        raise KRRFitError(f"linear solve residual {resid:.3e} exceeds 1e-8 |y|; Gram is ill-conditioned")
    return alpha


def predict(kernel: DotKernel, alpha, X_train, X_test) -> np.ndarray:
    """``f(x) = sum_i alpha_i kappa(x . x_i)``."""
    return gram(kernel, X_test, X_train) @ np.asarray(alpha, dtype=float)


# ---------------------------------------------------------------------------
# teachers


@dataclass(frozen=True)
class Teacher:
    """``f*(x) = sum_i s_i kappa(x . c_i)`` or, for pure modes, ``sum_i s_i Q_k(x . c_i)``."""

    kind: str
    centers: np.ndarray
    signs: np.ndarray
    degree: int | None = None

    def __post_init__(self):
        if self.kind not in ("kernel", "pure"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.kind == "pure" and (self.degree is None or self.degree < 0):
            raise ValueError("pure-mode teacher needs a nonnegative degree")
        if not np.all(np.abs(self.signs) == 1):
            raise ValueError("teacher signs must be exactly +-1")

    @property
    def p_prime(self) -> int:
        return len(self.signs)


def draw_teacher(kind: str, d: int, p_prime: int, rng: np.random.Generator, degree: int | None = None) -> Teacher:
    centers = sample_sphere_rng(d, p_prime, rng)
    signs = rng.choice(np.array([-1.0, 1.0]), size=p_prime)
    return Teacher(kind, centers, signs, degree)


def teacher_eval(teacher: Teacher, kernel: DotKernel, X) -> np.ndarray:
    Z = _dots(X, teacher.centers)
    if teacher.kind == "kernel":
        return kernel(Z) @ teacher.signs
    Qk = gegenbauer_all(teacher.centers.shape[1], teacher.degree, Z)[teacher.degree]
    return Qk @ teacher.signs


def teacher_level_coefficients(teacher: Teacher, spectrum: Spectrum) -> np.ndarray:
    """Per-level scale ``c_k`` with teacher level-``k`` component ``c_k sum_i s_i Q_k(x . c_i)``."""
    if teacher.kind == "kernel":
        return spectrum.eigenvalues * spectrum.degeneracies
    c = np.zeros(len(spectrum.eigenvalues))
    if teacher.degree < len(c):
        c[teacher.degree] = 1.0
    return c


# ---------------------------------------------------------------------------
# empirical decomposition


def gegenbauer_forms(d: int, kmax: int, Z, u, v) -> np.ndarray:
    """``[u^T Q_k(Z) v for k = 0..kmax]`` with ``Q_k`` applied entrywise."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.empty(kmax + 1)
    for k, Qk in gegenbauer_matrix_iter(d, kmax, Z):
        out[k] = u @ (Qk @ v)
    return out


def _clamp_levels(E: np.ndarray, scale: np.ndarray) -> np.ndarray:
    neg = E < 0
    if neg.any():
        if np.any(E[neg] < -_NEG_TOL * scale[neg]):
            k = int(np.argmin(E / np.maximum(scale, np.finfo(float).tiny)))
            raise ArithmeticError(f"level {k} error {E[k]:.3e} is negative beyond roundoff")
        log.warning("clamping %d roundoff-negative level errors to 0", int(neg.sum()))
        E = np.where(neg, 0.0, E)
    return E


def empirical_mode_errors(
    spectrum: Spectrum,
    X,
    alpha,
    Xbar,
    abar,
    kmax: int | None = None,
    teacher_coeffs=None,
    teacher_self=None,
) -> np.ndarray:
    """Exact per-level ``L2`` error between a kernel student and a teacher.

    The student is ``sum_j alpha_j kappa(x . x_j)``; the teacher is
    ``sum_i abar_i kappa(x . xbar_i)`` unless ``teacher_coeffs`` says
    otherwise (see :func:`teacher_level_coefficients`).  For the kernel
    teacher this reduces to

        E_k = lambda_k^2 N_k (a'Q_k(XX')a - 2 a'Q_k(XXbar')abar + abar'Q_k(XbarXbar')abar)

    ``alpha=None`` means no student (the ``p = 0`` error).  ``teacher_self``
    may carry precomputed ``abar'Q_k(XbarXbar')abar`` values.
    """
    if spectrum.measure != "sphere" or spectrum.d is None:
        raise ValueError("empirical decomposition needs a spherical spectrum")
    Xbar = np.asarray(Xbar, dtype=float)
    d = spectrum.d
    if Xbar.shape[1] != d or (X is not None and np.asarray(X).shape[1] != d):
        raise ValueError(f"data dimension does not match spectrum d={d}")
    kmax = spectrum.kmax if kmax is None else int(kmax)
    lam = spectrum.eigenvalues[: kmax + 1]
    N = spectrum.degeneracies[: kmax + 1]
    s = lam * N
    t = s if teacher_coeffs is None else np.asarray(teacher_coeffs, dtype=float)[: kmax + 1]
    if teacher_self is None:
        bb = gegenbauer_forms(d, kmax, _self_dots(Xbar), abar, abar)
    else:
        bb = np.asarray(teacher_self)[: kmax + 1]
    if alpha is None:
        E = t * t * bb / N
        return _clamp_levels(E, np.abs(t * t * bb) / N)
    X = np.asarray(X, dtype=float)
    aa = gegenbauer_forms(d, kmax, _self_dots(X), alpha, alpha)
    ab = gegenbauer_forms(d, kmax, _dots(X, Xbar), alpha, abar)
    E = (s * s * aa - 2 * s * t * ab + t * t * bb) / N
    scale = (np.abs(s * s * aa) + 2 * np.abs(s * t * ab) + np.abs(t * t * bb)) / N
    return _clamp_levels(E, scale)


# ---------------------------------------------------------------------------
# experiment harness


@dataclass
class ExperimentConfig:
    """Monte Carlo setup; ``teacher`` is ``{"kind": "kernel"|"pure", "p_prime": n, "degree": k}``.

    ``measure="gaussian"`` switches to Gaussian inputs with the RBF kernel
    (total error only, estimated on ``test_points`` fresh samples).
    """

    kernel: dict
    d: int
    ridge: float
    teacher: dict
    p_list: list
    trials: int = 50
    kmax: int = 60
    seed: int = 0
    redraw_teacher: bool = True
    test_points: int = 0
    quad_order: int = 1000
    measure: str = "sphere"
    input_scale: float = 1.0

    def __post_init__(self):
        if self.measure not in ("sphere", "gaussian"):
            raise ValueError("measure must be 'sphere' or 'gaussian'")
        if self.measure == "sphere":
            check_dim(self.d)
        elif self.kernel.get("type") != "gaussian":
            raise ValueError("Gaussian inputs are supported with the gaussian kernel only")
        if self.ridge < 0:
            raise ValueError("lambda must be nonnegative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.p_list or any(int(p) != p or p < 1 for p in self.p_list):
            raise ValueError("p_list must contain positive integers")
        self.p_list = [int(p) for p in self.p_list]
        kind = self.teacher.get("kind", "kernel")
        if kind not in ("kernel", "pure"):
            raise ValueError(f"unknown teacher kind {kind!r}")
        if int(self.teacher.get("p_prime", 0)) < 1:
            raise ValueError("teacher.p_prime must be >= 1")
        if kind == "pure":
            if self.measure != "sphere":
                raise ValueError("pure-mode teachers need spherical inputs")
            if not 0 <= int(self.teacher.get("degree", -1)) <= self.kmax:
                raise ValueError("pure-mode teacher degree must lie in [0, kmax]")

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        if "lambda" in raw:
            raw["ridge"] = raw.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown experiment config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("ridge")
        return out


@dataclass
class ExperimentResult:
    p_list: np.ndarray
    trial_errors: np.ndarray  # (trials, n_p, levels); NaN where a fit failed
    config: dict
    trial_totals: np.ndarray | None = None  # test-set totals when available
    levels: bool = True

    @property
    def n_trials(self) -> int:
        return self.trial_errors.shape[0]

    @property
    def failed(self) -> np.ndarray:
        return np.isnan(self.trial_errors).any(axis=2).sum(axis=0)

    def _stats(self, arr):
        ok = ~np.isnan(arr)
        n = ok.sum(axis=0)
        mean = np.nanmean(arr, axis=0) if np.all(n > 0) else _safe_nanmean(arr)
        with np.errstate(invalid="ignore", divide="ignore"):
            std = np.where(n >= 2, np.nanstd(arr, axis=0, ddof=1) if arr.shape[0] >= 2 else np.nan, np.nan)
        return mean, std, n

    @property
    def mean(self) -> np.ndarray:
        return self._stats(self.trial_errors)[0]

    @property
    def std(self) -> np.ndarray:
        return self._stats(self.trial_errors)[1]

    @property
    def totals(self) -> np.ndarray:
        """Per-trial totals: test-set estimates if present, else sums over levels."""
        if self.trial_totals is not None:
            return self.trial_totals
        return self.trial_errors.sum(axis=2)

    @property
    def mean_total(self) -> np.ndarray:
        return self._stats(self.totals)[0]

    @property
    def std_total(self) -> np.ndarray:
        return self._stats(self.totals)[1]

    def stderr(self) -> np.ndarray:
        return self.std / np.sqrt(self.n_trials - self.failed)[:, None]

    def stderr_total(self) -> np.ndarray:
        return self.std_total / np.sqrt(self.n_trials - self.failed)

    def normalized_mean(self) -> np.ndarray:
        """Mean level errors divided by their value at the smallest p."""
        m = self.mean
        return np.divide(m, m[0], out=np.zeros_like(m), where=m[0] > 0)

    def save(self, path) -> None:
        """CSV ``p,mean_total,std_total,mean_k0,std_k0,...,failed_trials`` plus JSON sidecar."""
        path = Path(path)
        mean, std = self.mean, self.std
        mt, st = self.mean_total, self.std_total
        n_lv = mean.shape[1] if self.levels else 0
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["p", "mean_total", "std_total"]
            for k in range(n_lv):
                head += [f"mean_k{k}", f"std_k{k}"]
            w.writerow(head + ["failed_trials"])
            for i, p in enumerate(self.p_list):
                row = [str(int(p)), _fmt(mt[i]), _fmt(st[i])]
                for k in range(n_lv):
                    row += [_fmt(mean[i, k]), _fmt(std[i, k])]
                w.writerow(row + [str(int(self.failed[i]))])
        meta = {"config": self.config, "trials": self.n_trials, "seed": self.config.get("seed")}
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _safe_nanmean(arr):
    with np.errstate(invalid="ignore"):
        s = np.nansum(arr, axis=0)
        n = (~np.isnan(arr)).sum(axis=0)
        return np.where(n > 0, s / np.maximum(n, 1), np.nan)


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def experiment_spectrum(config: ExperimentConfig) -> Spectrum:
    if config.measure == "gaussian":
        return gaussian_spectrum(
            config.d, float(config.kernel["lengthscale"]), config.input_scale, config.kmax
        )
    kernel = kernel_from_config(config.kernel)
    rule = quadrature(config.d, max(config.quad_order, 4 * config.kmax))
    return spectrum_from_kernel(kernel, config.d, config.kmax, rule)


def theory_for_config(
    config: ExperimentConfig, spectrum: Spectrum | None = None, p_list=None
) -> TheoryCurve:
    """Prediction matching an experiment; the trace deficit beyond kmax is included."""
    spectrum = experiment_spectrum(config) if spectrum is None else spectrum
    pp = int(config.teacher["p_prime"])
    if config.teacher.get("kind", "kernel") == "pure":
        target = pure_mode_powers(spectrum, int(config.teacher["degree"]), pp)
    else:
        target = kernel_teacher_powers(spectrum, pp)
    grid = config.p_list if p_list is None else p_list
    return learning_curve(spectrum, target, grid, config.ridge, include_tail=True,
                          meta={"config": config.to_dict()})


def _sphere_trial(config: ExperimentConfig, spectrum: Spectrum, kernel: DotKernel, trial: int):
    rng = np.random.default_rng(config.seed + trial)
    tk = config.teacher
    if config.redraw_teacher:
        teacher = draw_teacher(tk.get("kind", "kernel"), config.d, int(tk["p_prime"]), rng, tk.get("degree"))
    else:
        teacher = draw_teacher(
            tk.get("kind", "kernel"), config.d, int(tk["p_prime"]),
            np.random.default_rng([config.seed, 1]), tk.get("degree"),
        )
    coeffs = teacher_level_coefficients(teacher, spectrum)
    bb = gegenbauer_forms(config.d, config.kmax, _self_dots(teacher.centers), teacher.signs, teacher.signs)
    levels = np.full((len(config.p_list), config.kmax + 1), np.nan)
    totals = np.full(len(config.p_list), np.nan) if config.test_points else None
    for i, p in enumerate(config.p_list):
        X = sample_sphere_rng(config.d, p, rng)
        y = teacher_eval(teacher, kernel, X)
        try:
            alpha = krr_fit(gram(kernel, X), y, config.ridge)
            levels[i] = empirical_mode_errors(
                spectrum, X, alpha, teacher.centers, teacher.signs,
                teacher_coeffs=coeffs, teacher_self=bb,
            )
        except (KRRFitError, ArithmeticError) as exc:
            log.warning("trial %d, p=%d failed: %s", trial, p, exc)
            continue
        if totals is not None:
            Xt = sample_sphere_rng(config.d, config.test_points, rng)
            totals[i] = float(np.mean((predict(kernel, alpha, X, Xt) - teacher_eval(teacher, kernel, Xt)) ** 2))
    return levels, totals


def _gaussian_trial(config: ExperimentConfig, trial: int):
    rng = np.random.default_rng(config.seed + trial)
    ell = float(config.kernel["lengthscale"])
    s = config.input_scale
    n_test = config.test_points or 2000
    draw_c = rng if config.redraw_teacher else np.random.default_rng([config.seed, 1])
    pp = int(config.teacher["p_prime"])
    centers = s * draw_c.standard_normal((pp, config.d))
    signs = draw_c.choice(np.array([-1.0, 1.0]), size=pp)
    totals = np.full(len(config.p_list), np.nan)
    for i, p in enumerate(config.p_list):
        X = s * rng.standard_normal((p, config.d))
        y = rbf_gram(X, centers, ell) @ signs
        try:
            alpha = krr_fit(rbf_gram(X, X, ell), y, config.ridge)
        except KRRFitError as exc:
            log.warning("trial %d, p=%d failed: %s", trial, p, exc)
            continue
        Xt = s * rng.standard_normal((n_test, config.d))
        resid = rbf_gram(Xt, X, ell) @ alpha - rbf_gram(Xt, centers, ell) @ signs
        totals[i] = float(np.mean(resid**2))
    return totals


def run_experiment(config: ExperimentConfig, spectrum: Spectrum | None = None) -> ExperimentResult:
    """Average empirical errors over ``config.trials`` independent trials.

    Trial ``i`` draws everything from ``default_rng(seed + i)``: the teacher
    first (unless fixed), then a fresh training set for each ``p`` in order.
    Results therefore depend only on the config, never on scheduling.
    """
    trials = range(config.trials)
    workers = min(n_threads(), config.trials)
    if config.measure == "gaussian":
        with ThreadPoolExecutor(workers) as pool:
            totals = np.array(list(pool.map(lambda i: _gaussian_trial(config, i), trials)))
        levels = np.where(np.isnan(totals), np.nan, 0.0)[:, :, None]
        return ExperimentResult(np.array(config.p_list), levels, config.to_dict(), totals, levels=False)

    spectrum = experiment_spectrum(config) if spectrum is None else spectrum
    kernel = kernel_from_config(config.kernel)
    with ThreadPoolExecutor(workers) as pool:
        out = list(pool.map(lambda i: _sphere_trial(config, spectrum, kernel, i), trials))
    levels = np.array([o[0] for o in out])
    totals = np.array([o[1] for o in out]) if config.test_points else None
    return ExperimentResult(np.array(config.p_list), levels, config.to_dict(), totals)
