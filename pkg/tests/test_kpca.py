import gzip
import struct
from dataclasses import replace

import numpy as np
import pytest

from kernelcurves.kernels import linear_kernel, ntk_kernel
from kernelcurves.kpca import (
    DatasetFormatError,
    DiscreteDataset,
    aggregate_modes,
    dataset_learning_curve,
    decade_edges,
    discrete_spectrum,
    load_dataset,
    project_targets,
    subset_regression_errors,
)
from kernelcurves.regression import draw_teacher, sample_sphere_rng, teacher_eval


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(0)
    X = sample_sphere_rng(6, 80, rng)
    t = draw_teacher("kernel", 6, 5, rng)
    Y = np.column_stack([teacher_eval(t, ntk_kernel(3), X), np.sign(X[:, 0])])
    data = DiscreteDataset(X, Y)
    return data, discrete_spectrum(ntk_kernel(3), data)


def _write_csv(path, X, Y):
    head = [f"x{i}" for i in range(X.shape[1])] + [f"y{j}" for j in range(Y.shape[1])]
    rows = [",".join(head)] + [",".join(f"{v:.17g}" for v in np.r_[x, y]) for x, y in zip(X, Y)]
    path.write_text("\n".join(rows) + "\n")


def _write_idx(path, magic, dims, payload, compress=False):
    raw = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)
    if compress:
        with gzip.open(path, "wb") as fh:
            fh.write(raw)
    else:
        path.write_bytes(raw)


def test_csv_roundtrip_and_normalize(tmp_path):
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((20, 4)), rng.standard_normal((20, 2))
    _write_csv(tmp_path / "d.csv", X, Y)
    data = load_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(data.points, X)
    np.testing.assert_array_equal(data.targets, Y)
    norm = load_dataset(tmp_path / "d.csv", normalize=True)
    np.testing.assert_allclose(np.linalg.norm(norm.points, axis=1), 1.0, atol=1e-12)
    assert norm.normalized


def test_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "bad.csv")


def test_subset_is_seeded(tmp_path):
    rng = np.random.default_rng(2)
    _write_csv(tmp_path / "d.csv", rng.standard_normal((50, 3)), rng.standard_normal((50, 1)))
    a = load_dataset(tmp_path / "d.csv", subset=10, seed=4)
    b = load_dataset(tmp_path / "d.csv", subset=10, seed=4)
    c = load_dataset(tmp_path / "d.csv", subset=10, seed=5)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_duplicates_rejected():
    X = np.eye(3)[[0, 1, 1]]
    with pytest.raises(ValueError, match="duplicate"):
        DiscreteDataset(X, np.zeros(3))
    assert DiscreteDataset(X, np.zeros(3), allow_duplicates=True).n == 3


@pytest.mark.parametrize("compress", [False, True])
def test_idx_images_and_labels(tmp_path, compress):
    rng = np.random.default_rng(3)
    pix = rng.integers(0, 256, size=6 * 28 * 28, dtype=np.uint8)
    labels = np.array([0, 3, 9, 1, 1, 7], dtype=np.uint8)
    suffix = ".gz" if compress else ""
    _write_idx(tmp_path / f"img{suffix}", 0x803, (6, 28, 28), pix, compress)
    _write_idx(tmp_path / f"lab{suffix}", 0x801, (6,), labels, compress)
    data = load_dataset(tmp_path / f"img{suffix}", "idx", tmp_path / f"lab{suffix}", allow_duplicates=True)
    assert data.points.shape == (6, 784)
    np.testing.assert_allclose(data.points.ravel(), pix / 255.0)
    assert data.targets.shape == (6, 10)
    np.testing.assert_array_equal(data.targets.argmax(1), labels)


def test_idx_errors(tmp_path):
    _write_idx(tmp_path / "img", 0x801, (2, 2, 2), [0] * 8)
    _write_idx(tmp_path / "lab", 0x801, (2,), [0, 1])
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(tmp_path / "img", "idx", tmp_path / "lab")
    _write_idx(tmp_path / "img", 0x803, (2, 2, 2), [0] * 5)
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_dataset(tmp_path / "img", "idx", tmp_path / "lab")
    _write_idx(tmp_path / "img", 0x803, (3, 1, 2), [1, 2, 3, 4, 5, 6])
    with pytest.raises(DatasetFormatError, match="labels"):
        load_dataset(tmp_path / "img", "idx", tmp_path / "lab")


def test_eigensystem_orthonormal_and_reconstructs(small):
    _, eig = small
    n = eig.n
    assert np.abs(eig.phi @ eig.phi.T / n - np.eye(n)).max() < 1e-8
    recon = eig.phi.T @ (eig.eigenvalues[:, None] * eig.phi)
    assert np.linalg.norm(recon - eig.gram) / np.linalg.norm(eig.gram) < 1e-6
    assert np.all(np.diff(eig.eigenvalues) <= 0)
    np.testing.assert_allclose(eig.gram @ eig.phi.T, n * eig.phi.T * eig.eigenvalues, atol=1e-9)


def test_projection_recovers_targets(small):
    data, eig = small
    assert eig.rank == eig.n
    np.testing.assert_allclose(eig.synthesize(eig.weights), data.targets, atol=1e-6)


def test_projection_of_principal_component(small):
    _, eig = small
    rho = 3
    Y = np.sqrt(eig.eigenvalues[rho]) * eig.phi[rho]
    W, resid = project_targets(eig, Y)
    expected = np.zeros(eig.n)
    expected[rho] = 1
    np.testing.assert_allclose(W[:, 0], expected, atol=1e-10)
    W0, _ = project_targets(eig, np.zeros(eig.n))
    assert np.all(W0 == 0)


def test_parseval(small):
    data, eig = small
    lhs = (eig.eigenvalues[:, None] * eig.weights**2).sum(0)
    rhs = (data.targets**2).sum(0) / eig.n
    np.testing.assert_allclose(lhs + eig.residual, rhs, rtol=1e-10)


def test_zero_modes_become_floor():
    rng = np.random.default_rng(5)
    X = sample_sphere_rng(4, 32, rng)
    y = X[:, 0] + X[:, 1] ** 2
    eig = discrete_spectrum(linear_kernel(), DiscreteDataset(X, y))
    assert eig.rank == 4
    # the part outside span(x) is the residual of a least-squares fit on x
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    outside = np.mean((y - X @ coef) ** 2)
    assert eig.residual[0] == pytest.approx(outside, rel=1e-9)
    curve = dataset_learning_curve(eig, [0, 2], 0.0)
    assert curve.floor == pytest.approx(outside)
    assert curve.total[0] == pytest.approx(np.mean(y**2), rel=1e-9)


def test_single_eigenfunction_target(small):
    _, eig = small
    W, resid = project_targets(eig, eig.phi[2])
    curve = dataset_learning_curve(replace(eig, weights=W, residual=resid), [0, 10], 0.0)
    assert np.count_nonzero(curve.errors[0] > 1e-20) == 1
    assert curve.errors[0, 2] == pytest.approx(1.0)


def test_binned_errors_sum_to_total(small):
    _, eig = small
    curve = dataset_learning_curve(eig, [1, 4, 16, 64], 0.0)
    edges = decade_edges(curve.n_levels)
    assert edges == [0, 1, 10, 80]
    binned = aggregate_modes(curve, edges)
    np.testing.assert_allclose(binned.total, curve.total, rtol=1e-12)
    assert len(curve.per_class) == 2


def test_sample_size_bound(small):
    _, eig = small
    with pytest.raises(ValueError):
        dataset_learning_curve(eig, [eig.n + 1], 0.0)


def test_size_guard():
    X = sample_sphere_rng(4, 30, np.random.default_rng(0))
    with pytest.raises(MemoryError):
        discrete_spectrum(ntk_kernel(2), DiscreteDataset(X, X[:, :1]), max_points=20)


def test_tiny_dataset_subset_average_follows_theory():
    rng = np.random.default_rng(8)
    X = sample_sphere_rng(4, 32, rng)
    t = draw_teacher("kernel", 4, 4, rng)
    y = teacher_eval(t, ntk_kernel(2), X)
    eig = discrete_spectrum(ntk_kernel(2), DiscreteDataset(X, y))
    p = [2, 4, 8, 16]
    curve = dataset_learning_curve(eig, p, 0.0)
    emp = subset_regression_errors(eig, y, p, 0.0, trials=200, seed=1)
    assert np.all(np.diff(curve.total) < 0) and np.all(np.diff(emp.mean) < 0)
    ratio = emp.mean / curve.total
    assert np.all((ratio > 0.5) & (ratio < 2.0))
