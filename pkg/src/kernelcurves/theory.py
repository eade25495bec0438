"""Learning-curve predictions from a kernel eigenspectrum.

All sums over modes run over degenerate levels weighted by their degeneracy.
With ``g_k = (1/lambda_k + p/(ridge + t))^{-1}``:

* ``t`` solves ``t = sum_k N_k g_k``;
* ``gamma = sum_k N_k g_k^2``;
* ``E_k = (P_k / lambda_k) g_k^2 / (1 - p gamma / (ridge + t)^2)`` where
  ``P_k`` is the summed second moment of the teacher weights on level ``k``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernels import Spectrum, sidecar_path

T_MIN = 1e-300
RTOL = 1e-12
PREFACTOR_EPS = 1e-12
_MAX_ITER = 4000


class InterpolationThresholdError(ArithmeticError):
    """Ridgeless fixed point has no positive root (p at or above the mode count)."""


class FixedPointError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# fixed point


def _positive_levels(spectrum: Spectrum):
    lam = spectrum.eigenvalues
    keep = lam > 0
    if not keep.any():
        raise ValueError("spectrum has no strictly positive eigenvalue")
    return lam[keep], spectrum.degeneracies[keep]


def _bisect_increasing(fn, lo: float, hi: float, rtol: float = RTOL) -> float:
    """Root of an increasing function with ``fn(lo) < 0 <= fn(hi)``.

    Midpoints are geometric while the bracket spans more than a factor of
    four, so brackets reaching down to ``T_MIN`` close in a few dozen steps.
    """
    for _ in range(_MAX_ITER):
        if hi - lo <= rtol * hi:
            return 0.5 * (lo + hi)
        if lo > 0 and hi > 4 * lo:
            mid = math.sqrt(lo) * math.sqrt(hi)
        else:
            mid = 0.5 * (lo + hi)
        if fn(mid) < 0:
            lo = mid
        else:
            hi = mid
    raise FixedPointError("bisection did not converge")


def _tail(spectrum: Spectrum, include_tail: bool) -> float:
    return max(spectrum.tail_mass_estimate, 0.0) if include_tail else 0.0


def solve_t(spectrum: Spectrum, p: float, ridge: float, include_tail: bool = False) -> float:
    """Solve ``t = sum_k N_k (1/lambda_k + p/(ridge+t))^{-1}`` for ``t > 0``.

    The root is bracketed in ``(0, trace]`` and found by bisection on
    ``t/(ridge+t) - sum_k N_k lambda_k / (ridge + t + p lambda_k)``, which is
    strictly increasing in ``t`` and shares its root with the original
    equation.

    With ``include_tail`` the spectrum's trace deficit beyond ``kmax`` is
    added to the sum as modes whose eigenvalues are negligible next to
    ``(ridge + t)/p``; each such mode contributes ``g = lambda`` to ``t`` and
    nothing to ``gamma``.
    """
    if p < 0 or ridge < 0:
        raise ValueError("p and ridge must be nonnegative")
    lam, deg = _positive_levels(spectrum)
    mass = deg * lam
    tail = _tail(spectrum, include_tail)
    trace = float(mass.sum()) + tail
    if p == 0:
        return trace

    def psi(t):
        z = ridge + t
        return (t - tail) / z - float(np.sum(mass / (z + p * lam)))

    lo = 0.0 if ridge > 0 else T_MIN
    if ridge == 0 and psi(lo) >= 0:
        raise InterpolationThresholdError(
            f"ridgeless fixed point collapses to t=0 at p={p:g}: p is at or beyond "
            f"the number of modes ({float(deg.sum()):g})"
        )
    if psi(trace) < 0:  # only reachable through roundoff
        return trace
    return _bisect_increasing(psi, lo, trace)


def gamma_of(spectrum: Spectrum, p: float, ridge: float, t: float) -> float:
    """``gamma = sum_k N_k (1/lambda_k + p/(ridge+t))^{-2}``."""
    lam, deg = _positive_levels(spectrum)
    z = ridge + t
    g = lam * z / (z + p * lam)
    return float(np.sum(deg * g * g))


def fixed_point_residual(
    spectrum: Spectrum, p: float, ridge: float, t: float, include_tail: bool = False
) -> float:
    lam, deg = _positive_levels(spectrum)
    z = ridge + t
    return t - _tail(spectrum, include_tail) - float(np.sum(deg * lam * z / (z + p * lam)))


# ---------------------------------------------------------------------------
# targets


@dataclass(frozen=True)
class TargetPowers:
    """Per-level sums ``P_k = sum_m <wbar_km^2>`` in the ``sqrt(lambda) phi`` basis.

    ``P_k * lambda_k`` is the power the target places on level ``k`` under the
    input measure, and equals the ``p = 0`` error of that level.
    """

    powers: np.ndarray
    description: str = ""

    def __post_init__(self):
        pw = np.asarray(self.powers, dtype=float)
        if pw.ndim != 1 or np.any(pw < 0):
            raise ValueError("target powers must be a nonnegative 1-d array")
        pw.setflags(write=False)
        object.__setattr__(self, "powers", pw)

    def check_aligned(self, spectrum: Spectrum) -> None:
        if len(self.powers) != len(spectrum.eigenvalues):
            raise ValueError(
                f"target has {len(self.powers)} levels, spectrum has {len(spectrum.eigenvalues)}"
            )


def kernel_teacher_powers(spectrum: Spectrum, p_prime: int) -> TargetPowers:
    """Teacher ``sum_i a_i K(x, xbar_i)`` with ``a_i = +-1``: ``<wbar^2> = p' lambda``."""
    return TargetPowers(
        p_prime * spectrum.eigenvalues * spectrum.degeneracies, f"kernel:pprime={p_prime}"
    )


def pure_mode_powers(spectrum: Spectrum, degree: int, p_prime: int) -> TargetPowers:
    """Teacher ``sum_i a_i Q_k(x . xbar_i)``: level power ``p'/N(d,k)``, zero elsewhere."""
    lam = spectrum.eigenvalues[degree]
    if lam <= 0:
        raise ValueError(f"level {degree} has zero eigenvalue; a pure mode there is unlearnable")
    pw = np.zeros_like(spectrum.eigenvalues)
    pw[degree] = p_prime / (spectrum.degeneracies[degree] * lam)
    return TargetPowers(pw, f"pure:k={degree},pprime={p_prime}")


def powers_from_function_power(spectrum: Spectrum, level_power, description: str = "") -> TargetPowers:
    """Convert per-level function power (under the measure) into ``P_k``."""
    lp = np.asarray(level_power, dtype=float)
    lam = spectrum.eigenvalues
    pw = np.divide(lp, lam, out=np.zeros_like(lp), where=lam > 0)
    return TargetPowers(pw, description)


# ---------------------------------------------------------------------------
# mode errors and curves


@dataclass
class ModeErrorPoint:
    p: float
    errors: np.ndarray
    t: float
    gamma: float
    prefactor: float
    flag: str = ""

    @property
    def total(self) -> float:
        return float(self.errors.sum())


def _diagnostics(spectrum: Spectrum, p: float, ridge: float, include_tail: bool = False):
    t = solve_t(spectrum, p, ridge, include_tail)
    gamma = gamma_of(spectrum, p, ridge, t)
    z = ridge + t
    denom = 1.0 - p * gamma / (z * z)
    return t, gamma, denom


def _level_errors(spectrum, powers, p, ridge, t, prefactor):
    lam = spectrum.eigenvalues
    z = ridge + t
    shrink = 1.0 / (1.0 + p * lam / z)
    return powers * lam * shrink * shrink * prefactor


def mode_errors(
    spectrum: Spectrum, target: TargetPowers, p: float, ridge: float, include_tail: bool = False
) -> ModeErrorPoint:
    """Predicted per-level errors at one sample size.

    A vanishing prefactor denominator (the ridgeless divergence near the
    interpolation threshold) gives NaN errors with ``flag="diverged"``
    instead of raising.
    """
    target.check_aligned(spectrum)
    n = len(spectrum.eigenvalues)
    try:
        t, gamma, denom = _diagnostics(spectrum, p, ridge, include_tail)
    except InterpolationThresholdError:
        return ModeErrorPoint(p, np.full(n, np.nan), 0.0, np.nan, np.inf, "interpolation-threshold")
    if denom <= PREFACTOR_EPS:
        return ModeErrorPoint(p, np.full(n, np.nan), t, gamma, np.inf, "diverged")
    pref = 1.0 / denom
    errs = _level_errors(spectrum, target.powers, p, ridge, t, pref)
    return ModeErrorPoint(p, errs, t, gamma, pref)


@dataclass
class TheoryCurve:
    """Per-level predictions on a grid of sample sizes.

    ``floor`` is a p-independent error added to every total (the target
    power a discrete kernel cannot represent); it is zero otherwise.
    """

    ridge: float
    p: np.ndarray
    errors: np.ndarray
    t: np.ndarray
    gamma: np.ndarray
    prefactor: np.ndarray
    flags: list[str]
    floor: float = 0.0
    per_class: list["TheoryCurve"] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> np.ndarray:
        return self.errors.sum(axis=1) + self.floor

    @property
    def n_levels(self) -> int:
        return self.errors.shape[1]

    def normalized(self) -> np.ndarray:
        """Errors divided by their value at the first grid point."""
        base = self.errors[0]
        return np.divide(self.errors, base, out=np.zeros_like(self.errors), where=base > 0)

    def save(self, path, levels: Sequence[int] | None = None) -> None:
        """CSV ``p,E_total,E_k0,...,t,gamma,prefactor,flag`` plus JSON sidecar."""
        levels = list(range(self.n_levels)) if levels is None else list(levels)
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "E_total"] + [f"E_k{k}" for k in levels] + ["t", "gamma", "prefactor", "flag"])
            for i, p in enumerate(self.p):
                row = [_fmt(p), _fmt(self.total[i])]
                row += [_fmt(self.errors[i, k]) for k in levels]
                row += [_fmt(self.t[i]), _fmt(self.gamma[i]), _fmt(self.prefactor[i]), self.flags[i]]
                w.writerow(row)
        meta = dict(self.meta)
        meta.update({"lambda": self.ridge, "floor": self.floor, "levels_written": levels})
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _validate_grid(p_list) -> np.ndarray:
    p = np.asarray(p_list, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or np.any(np.diff(p) < 0):
        raise ValueError("p_list must be a nonempty, nondecreasing list of nonnegative sizes")
    return p


def _curve_diagnostics(spectrum, p, ridge, include_tail):
    t = np.zeros_like(p)
    gamma = np.zeros_like(p)
    pref = np.zeros_like(p)
    flags = []
    for i, pi in enumerate(p):
        try:
            ti, gi, denom = _diagnostics(spectrum, pi, ridge, include_tail)
        except InterpolationThresholdError:
            t[i], gamma[i], pref[i] = 0.0, np.nan, np.inf
            flags.append("interpolation-threshold")
            continue
        t[i], gamma[i] = ti, gi
        if denom <= PREFACTOR_EPS:
            pref[i] = np.inf
            flags.append("diverged")
        else:
            pref[i] = 1.0 / denom
            flags.append("")
    return t, gamma, pref, flags


def _curve_errors(spectrum, powers, p, ridge, t, pref, flags):
    errs = np.full((len(p), len(spectrum.eigenvalues)), np.nan)
    for i, pi in enumerate(p):
        if not flags[i]:
            errs[i] = _level_errors(spectrum, powers, pi, ridge, t[i], pref[i])
    return errs


def learning_curve(
    spectrum: Spectrum,
    target: TargetPowers,
    p_list,
    ridge: float,
    include_tail: bool = False,
    meta: dict | None = None,
) -> TheoryCurve:
    """Predicted errors along ``p_list``; failing points are flagged, not raised."""
    target.check_aligned(spectrum)
    p = _validate_grid(p_list)
    t, gamma, pref, flags = _curve_diagnostics(spectrum, p, ridge, include_tail)
    errs = _curve_errors(spectrum, target.powers, p, ridge, t, pref, flags)
    info = {"spectrum": spectrum.label, "target": target.description, "include_tail": include_tail}
    info.update(meta or {})
    return TheoryCurve(ridge, p, errs, t, gamma, pref, flags, meta=info)


def multi_output_curve(
    spectrum: Spectrum,
    targets: Sequence[TargetPowers],
    p_list,
    ridge: float,
    floors: Sequence[float] | None = None,
    include_tail: bool = False,
    meta: dict | None = None,
) -> TheoryCurve:
    """Sum of independent per-output curves sharing one kernel.

    The fixed point depends only on the spectrum, so it is solved once per
    ``p`` and reused for every output.
    """
    if not targets:
        raise ValueError("need at least one target")
    for tg in targets:
        tg.check_aligned(spectrum)
    floors = [0.0] * len(targets) if floors is None else list(floors)
    p = _validate_grid(p_list)
    t, gamma, pref, flags = _curve_diagnostics(spectrum, p, ridge, include_tail)
    per_class = []
    for tg, fl in zip(targets, floors):
        errs = _curve_errors(spectrum, tg.powers, p, ridge, t, pref, flags)
        per_class.append(
            TheoryCurve(ridge, p, errs, t, gamma, pref, list(flags), floor=fl,
                        meta={"spectrum": spectrum.label, "target": tg.description})
        )
    total = np.sum([c.errors for c in per_class], axis=0)
    info = {
        "spectrum": spectrum.label,
        "targets": [tg.description for tg in targets],
        "include_tail": include_tail,
    }
    info.update(meta or {})
    return TheoryCurve(
        ridge, p, total, t, gamma, pref, flags, floor=float(sum(floors)), per_class=per_class, meta=info
    )


# ---------------------------------------------------------------------------
# power laws


@dataclass(frozen=True)
class PowerLawSpec:
    a: float
    b: float
    ridge: float = 0.0

    def __post_init__(self):
        if not (self.a > 1 and self.b > 1):
            raise ValueError("power-law exponents need a > 1 and b > 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


def powerlaw_exponent(spec: PowerLawSpec, regime: str = "small-p") -> tuple[float, float]:
    """Predicted decay exponent ``beta`` in ``E_g ~ p^-beta`` and the crossover size.

    ``beta = min(a-1, 2b)`` below ``p* = ridge^(-1/(b-1))`` and that value
    divided by ``b`` above it.  ``p*`` is infinite for ridgeless regression.
    """
    base = min(spec.a - 1.0, 2.0 * spec.b)
    p_star = math.inf if spec.ridge == 0 else spec.ridge ** (-1.0 / (spec.b - 1.0))
    if regime == "small-p":
        return base, p_star
    if regime == "large-p":
        return base / spec.b, p_star
    raise ValueError(f"regime must be 'small-p' or 'large-p', got {regime!r}")


def powerlaw_problem(spec: PowerLawSpec, n_modes: int = 10_000) -> tuple[Spectrum, TargetPowers]:
    """Spectrum ``lambda_r = r^-b`` with target power ``lambda_r <wbar_r^2> = r^-a``."""
    rho = np.arange(1, n_modes + 1, dtype=float)
    lam = rho ** (-spec.b)
    spectrum = Spectrum(lam, np.ones_like(lam), measure="discrete", label=f"powerlaw-b{spec.b:g}")
    target = TargetPowers(rho ** (spec.b - spec.a), f"powerlaw-a{spec.a:g}")
    return spectrum, target


def loglog_slope(p, e) -> float:
    """Least-squares slope of ``log e`` against ``log p``."""
    return float(np.polyfit(np.log(p), np.log(e), 1)[0])


# ---------------------------------------------------------------------------
# learning stages at large input dimension


@dataclass(frozen=True)
class StageSpec:
    """Rescaled O(1) eigenvalues ``lam_bar[k]`` and the stage ``p = alpha * d^level``."""

    lam_bar: np.ndarray
    level: int
    alpha: float
    ridge: float = 0.0

    def __post_init__(self):
        lb = np.asarray(self.lam_bar, dtype=float)
        if lb.ndim != 1 or np.any(lb <= 0):
            raise ValueError("rescaled eigenvalues must be positive")
        if not 0 <= self.level < len(lb):
            raise ValueError("stage level outside the provided eigenvalues")
        if self.alpha <= 0 or self.ridge < 0:
            raise ValueError("alpha must be positive and ridge nonnegative")
        object.__setattr__(self, "lam_bar", lb)


def rescaled_eigenvalues(spectrum: Spectrum, kmax: int | None = None) -> np.ndarray:
    """``N(d,k) lambda_k``: the O(1) combination that keeps the trace finite."""
    s = spectrum if kmax is None else spectrum.truncate(kmax)
    return s.eigenvalues * s.degeneracies


def stage_ratios(spec: StageSpec, asymptotic: bool = False) -> np.ndarray:
    """Per-level ``E_k(alpha) / E_k(0)`` in the large-dimension limit.

    Levels below the stage are fully learned (ratio 0), levels above are
    untouched apart from the shared prefactor, and the stage level follows
    ``(1/(1-gamma)) (1 + alpha lam_bar / (t + ridge))^{-2}`` with ``t`` the
    root of ``t = S + (t+ridge) lam_bar / (t + ridge + alpha lam_bar)``,
    ``S = sum_{m > level} lam_bar_m``.  With ``asymptotic=True`` the
    large-alpha limits are returned instead.
    """
    lb, ell, alpha, r = spec.lam_bar, spec.level, spec.alpha, spec.ridge
    upper = float(lb[ell + 1 :].sum())
    lbl = lb[ell]
    out = np.empty_like(lb)
    out[:ell] = 0.0
    if asymptotic:
        out[ell] = (r + upper) ** 2 / (lbl * lbl * alpha * alpha)
        out[ell + 1 :] = 1.0
        return out

    def u(t):
        z = t + r
        return t - upper - z * lbl / (z + alpha * lbl)

    lo = upper if (upper > 0 or r > 0) else T_MIN
    hi = upper + lbl
    if u(lo) >= 0:
        t = lo
    else:
        t = _bisect_increasing(u, lo, hi)
    z = t + r
    gamma = alpha * lbl * lbl / (z + alpha * lbl) ** 2
    if not 0 <= gamma < 1:
        raise FixedPointError(f"stage fixed point gave gamma={gamma}")
    pref = 1.0 / (1.0 - gamma)
    out[ell] = pref / (1.0 + alpha * lbl / z) ** 2
    out[ell + 1 :] = pref
    return out
