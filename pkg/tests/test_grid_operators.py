"""Oracle tests for the Neumann Laplacian and regularization operators."""

import numpy as np
import pytest

from nsms.grid import Grid
from nsms.msfield import bilaplacian, laplacian_neumann, neumann_matrix


def dense_from_operator(op, grid):
    """Assemble the matrix column by column; independent of neumann_matrix."""
    n = grid.n_cells
    mat = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        mat[:, j] = op(e.reshape(grid.shape), grid).ravel()
    return mat


def test_laplacian_constant_is_zero():
    for grid in (Grid.line(2.0, 17), Grid.rectangle(1.0, 1.5, 8, 6)):
        f = np.full(grid.shape, 3.7)
        assert np.abs(laplacian_neumann(f, grid)).max() == 0.0


def test_laplacian_cosine_eigenfunction_second_order():
    length = 1.3
    errs = []
    for n in (64, 128):
        grid = Grid.line(length, n)
        z = grid.axis_centers(0)
        f = np.cos(np.pi * z / length)
        exact = -((np.pi / length) ** 2) * f
        errs.append(np.abs(laplacian_neumann(f, grid) - exact).max())
    assert errs[1] < errs[0]
    order = np.log2(errs[0] / errs[1])
    assert order > 1.9
    assert errs[1] < 1e-2


def test_laplacian_cosine_2d():
    grid = Grid.rectangle(1.0, 2.0, 96, 48)
    xx, yy = grid.center_mesh()
    f = np.cos(np.pi * xx / 1.0) * np.cos(np.pi * yy / 2.0)
    exact = -(np.pi**2 + (np.pi / 2.0) ** 2) * f
    err = np.abs(laplacian_neumann(f, grid) - exact).max()
    assert err < 5e-3


def test_laplacian_symmetric_negative_semidefinite():
    for grid in (Grid.line(1.0, 16), Grid.rectangle(1.0, 1.0, 4, 4)):
        mat = dense_from_operator(laplacian_neumann, grid)
        assert np.abs(mat - mat.T).max() < 1e-12
        ev = np.linalg.eigvalsh(mat)
        assert ev.max() < 1e-10
        # constants span the kernel
        const = np.ones(grid.n_cells)
        assert np.abs(mat @ const).max() < 1e-10


def test_matrix_matches_stencil():
    rng = np.random.default_rng(3)
    for grid in (Grid.line(1.0, 12), Grid.rectangle(1.0, 0.5, 6, 5)):
        f = rng.normal(size=grid.shape)
        via_matrix = (neumann_matrix(grid) @ f.ravel()).reshape(grid.shape)
        np.testing.assert_allclose(via_matrix, laplacian_neumann(f, grid),
                                   rtol=0.0, atol=1e-12)


def test_laplacian_vector_components_independent():
    grid = Grid.line(1.0, 10)
    rng = np.random.default_rng(1)
    f = rng.normal(size=(10, 3))
    out = laplacian_neumann(f, grid)
    for k in range(3):
        np.testing.assert_array_equal(out[:, k], laplacian_neumann(f[:, k], grid))


def test_laplacian_rejects_wrong_shape():
    grid = Grid.line(1.0, 10)
    with pytest.raises(Exception):
        laplacian_neumann(np.zeros(11), grid)


def test_bilaplacian_constant_and_cosine():
    length = 1.0
    grid = Grid.line(length, 256)
    assert np.abs(bilaplacian(np.full(grid.shape, 2.0), grid)).max() == 0.0
    z = grid.axis_centers(0)
    f = np.cos(np.pi * z / length)
    exact = (np.pi / length) ** 4 * f
    err = np.abs(bilaplacian(f, grid) - exact).max()
    coarse = Grid.line(length, 128)
    zc = coarse.axis_centers(0)
    fc = np.cos(np.pi * zc / length)
    err_c = np.abs(bilaplacian(fc, coarse) - (np.pi / length) ** 4 * fc).max()
    assert np.log2(err_c / err) > 1.8
    assert err < 5e-2


def test_bilaplacian_positive_semidefinite_form():
    for grid in (Grid.line(1.0, 16), Grid.rectangle(1.0, 1.0, 4, 4)):
        mat = dense_from_operator(bilaplacian, grid)
        ev = np.linalg.eigvalsh(0.5 * (mat + mat.T))
        assert ev.min() > -1e-10
