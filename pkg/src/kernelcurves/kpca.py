"""Kernel PCA under the uniform measure on a finite dataset."""

from __future__ import annotations

import csv
import gzip
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, eigh

from .kernels import DotKernel, Spectrum
from .regression import KRRFitError, gram, krr_fit
from .theory import TargetPowers, TheoryCurve, multi_output_curve

log = logging.getLogger(__name__)

MAX_POINTS = 20_000
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteDataset:
    points: np.ndarray
    targets: np.ndarray
    source: str = ""
    normalized: bool = False
    allow_duplicates: bool = False

    def __post_init__(self):
        X = np.asarray(self.points, dtype=float)
        Y = np.asarray(self.targets, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError("points must be (n, d) and targets (n, C) with matching n")
        if not self.allow_duplicates and len(np.unique(X, axis=0)) != len(X):
            raise ValueError("dataset contains duplicate rows; the Gram matrix would be singular")
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "targets", Y)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return self.targets.shape[1]


# ---------------------------------------------------------------------------
# loading


def _read_csv(path: Path):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    xcols = [i for i, h in enumerate(header) if h.strip().startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.strip().startswith("y")]
    if not xcols or not ycols or len(xcols) + len(ycols) != len(header):
        raise DatasetFormatError(f"{path}: header must be x0..x(d-1),y0..y(C-1)")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DatasetFormatError(f"{path}: rows do not match the header width {len(header)}")
    return data[:, xcols], data[:, ycols]


def _open_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file of unsigned bytes; dimensions come from the header."""
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: magic number {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise DatasetFormatError(f"{path}: truncated payload ({len(raw) - head} of {size} bytes)")
    return np.frombuffer(raw, dtype=">u1", count=size, offset=head).reshape(dims)


def load_dataset(
    path,
    format: str = "csv",
    labels_path=None,
    normalize: bool = False,
    subset: int | None = None,
    seed: int = 0,
    allow_duplicates: bool = False,
    n_classes: int = 10,
) -> DiscreteDataset:
    """Load a CSV (``x0..,y0..``) table or an IDX image/label pair.

    IDX pixels are scaled to ``[0, 1]`` and labels one-hot encoded.  A subset
    is the first ``subset`` rows of a permutation from ``default_rng(seed)``.
    """
    path = Path(path)
    if format == "csv":
        X, Y = _read_csv(path)
    elif format in ("idx", "idx-images+idx-labels"):
        if labels_path is None:
            raise ValueError("IDX datasets need a labels file")
        imgs = read_idx(path, IMAGE_MAGIC)
        labels = read_idx(labels_path, LABEL_MAGIC)
        if labels.ndim != 1 or labels.shape[0] != imgs.shape[0]:
            raise DatasetFormatError(
                f"{imgs.shape[0]} images but {labels.shape[0] if labels.ndim else 0} labels"
            )
        if labels.size and labels.max() >= n_classes:
            raise DatasetFormatError(f"label {labels.max()} exceeds {n_classes} classes")
        X = imgs.reshape(imgs.shape[0], -1).astype(float) / 255.0
        Y = np.eye(n_classes)[labels]
    else:
        raise ValueError(f"unknown dataset format {format!r}")

    if subset is not None:
        if not 1 <= subset <= X.shape[0]:
            raise ValueError(f"subset must lie in [1, {X.shape[0]}]")
        idx = np.random.default_rng(seed).permutation(X.shape[0])[:subset]
        X, Y = X[idx], Y[idx]
    if normalize:
        norms = np.linalg.norm(X, axis=1)
        if np.any(norms == 0):
            raise ValueError("cannot normalize zero rows onto the sphere")
        X = X / norms[:, None]
    src = str(path) if labels_path is None else f"{path}+{labels_path}"
    return DiscreteDataset(X, Y, src, normalize, allow_duplicates)


# ---------------------------------------------------------------------------
# eigensystem


@dataclass(frozen=True)
class DiscreteEigensystem:
    """``K Phi^T = n Phi^T Lambda`` with ``(1/n) Phi Phi^T = I``.

    Rows of ``phi`` are modes evaluated at the data points.  ``rank`` counts
    the modes treated as nonzero; the remainder get ``W = 0``.
    """

    eigenvalues: np.ndarray
    phi: np.ndarray
    rank: int
    gram: np.ndarray = field(repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    residual: np.ndarray | None = None
    clamped_mass: float = 0.0

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def spectrum(self) -> Spectrum:
        lam = self.eigenvalues[: self.rank]
        return Spectrum(lam, np.ones_like(lam), measure="discrete", label="discrete")

    def synthesize(self, W) -> np.ndarray:
        """``y_i = sum_rho sqrt(lambda_rho) W_rho phi_rho(x_i)``."""
        W = np.asarray(W, dtype=float)
        return self.phi.T @ (np.sqrt(self.eigenvalues)[:, None] * W)


def _rank_cutoff(S: np.ndarray) -> float:
    return S.size * np.finfo(float).eps * max(float(S.max(initial=0.0)), 0.0)


def discrete_spectrum(
    kernel: DotKernel, data: DiscreteDataset, max_points: int = MAX_POINTS
) -> DiscreteEigensystem:
    """Diagonalize the Gram matrix under the uniform measure on the data.

    Eigenvalues below ``n * eps * max`` are numerically zero: they are
    clamped if negative and excluded from the theory either way.
    """
    n = data.n
    if n > max_points:
        raise MemoryError(f"dataset of {n} points exceeds the dense-eigensolver guard {max_points}")
    K = gram(kernel, data.points)
    K = 0.5 * (K + K.T)
    try:
        S, U = eigh(K)
    except LinAlgError as exc:
        raise RuntimeError(f"eigendecomposition failed: {exc}") from None
    order = np.argsort(-S, kind="stable")
    S, U = S[order], U[:, order]
    cut = _rank_cutoff(S)
    neg = S < 0
    clamped = float(-S[neg].sum())
    if clamped > 1e-8 * np.trace(K):
        raise ArithmeticError(f"negative eigenvalue mass {clamped:.3e} too large; kernel is not PSD")
    if neg.any():
        log.warning("clamping %d roundoff-negative Gram eigenvalues", int(neg.sum()))
    S = np.where(neg, 0.0, S)
    rank = int(np.sum(S > cut))
    eig = DiscreteEigensystem(S / n, np.sqrt(n) * U.T, rank, K, clamped_mass=clamped / n)
    W, resid = project_targets(eig, data.targets)
    object.__setattr__(eig, "weights", W)
    object.__setattr__(eig, "residual", resid)
    return eig


def project_targets(eig: DiscreteEigensystem, Y) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``W = Lambda^{-1/2} (1/n) Phi Y`` and the unrepresentable power.

    Returns ``(W, residual)`` where ``residual[c]`` is the part of the
    squared norm ``(1/n)|y_c|^2`` outside the nonzero eigenspace.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != eig.n:
        raise ValueError("targets do not match the eigensystem size")
    r = eig.rank
    coef = eig.phi[:r] @ Y / eig.n
    W = np.zeros((eig.n, Y.shape[1]))
    W[:r] = coef / np.sqrt(eig.eigenvalues[:r])[:, None]
    norm2 = (Y * Y).sum(axis=0) / eig.n
    resid = np.maximum(norm2 - (coef * coef).sum(axis=0), 0.0)
    return W, resid


def dataset_learning_curve(
    eig: DiscreteEigensystem, p_list, ridge: float, per_class: bool = True
) -> TheoryCurve:
    """Theory curve with per-mode powers ``W_rho c^2`` summed over classes.

    Unrepresentable target power enters as a constant floor on the total.
    """
    p = np.asarray(p_list, dtype=float)
    if np.any(p > eig.n):
        raise ValueError(f"sample sizes must not exceed the dataset size {eig.n}")
    spec = eig.spectrum()
    W = eig.weights[: eig.rank]
    targets = [TargetPowers(W[:, c] ** 2, f"class{c}") for c in range(W.shape[1])]
    curve = multi_output_curve(spec, targets, p, ridge, floors=list(eig.residual),
                               meta={"n": eig.n, "rank": eig.rank})
    if not per_class:
        curve.per_class = []
    return curve


@dataclass
class SubsetResult:
    p_list: np.ndarray
    errors: np.ndarray  # (trials, n_p)

    @property
    def mean(self) -> np.ndarray:
        return np.nanmean(self.errors, axis=0)

    @property
    def std(self) -> np.ndarray:
        return np.nanstd(self.errors, axis=0, ddof=1)

    @property
    def stderr(self) -> np.ndarray:
        n = (~np.isnan(self.errors)).sum(axis=0)
        return self.std / np.sqrt(n)


def subset_regression_errors(
    eig: DiscreteEigensystem, Y, p_list, ridge: float, trials: int = 20, seed: int = 0
) -> SubsetResult:
    """KRR on random subsets, scored by ``(1/n) sum_i |f(x_i) - y_i|^2`` over the whole dataset."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    K = eig.gram
    errs = np.full((trials, len(p_list)), np.nan)
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        for i, p in enumerate(p_list):
            idx = rng.choice(eig.n, size=int(p), replace=False)
            try:
                alpha = krr_fit(K[np.ix_(idx, idx)], Y[idx], ridge)
            except KRRFitError as exc:
                log.warning("subset trial %d, p=%d failed: %s", trial, p, exc)
                continue
            resid = K[:, idx] @ alpha - Y
            errs[trial, i] = float((resid * resid).sum() / eig.n)
    return SubsetResult(np.asarray(p_list), errs)


def decade_edges(n_modes: int) -> list[int]:
    """Mode-index bin edges ``0, 1, 10, 100, ...`` covering ``n_modes``."""
    edges = [0, 1]
    while edges[-1] < n_modes:
        edges.append(min(edges[-1] * 10, n_modes))
    return edges


def aggregate_modes(curve: TheoryCurve, edges) -> TheoryCurve:
    """Sum mode errors over index bins ``[edges[i], edges[i+1])``; totals are unchanged."""
    edges = list(edges)
    if edges[0] != 0 or edges[-1] != curve.n_levels or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must increase from 0 to the number of modes")
    binned = np.stack([curve.errors[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1)
    meta = dict(curve.meta)
    meta["bin_edges"] = edges
    return TheoryCurve(curve.ridge, curve.p, binned, curve.t, curve.gamma, curve.prefactor,
                       list(curve.flags), floor=curve.floor, meta=meta)
