from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from niot.grid import (
    ForcingPair,
    Grid2D,
    UnbalancedForcing,
    build_grid,
    cell_divergence,
    cell_gradient_sq,
    face_gradient,
    harmonic_face_coefficient,
    harmonic_face_derivatives,
)


def dense_gradient(nx: int, ny: int, h: float) -> np.ndarray:
    """Face-difference matrix built by explicit loops over cell pairs."""
    rows = []
    for j in range(ny):
        for i in range(nx - 1):
            r = np.zeros(nx * ny)
            r[j * nx + i] = -1 / h
            r[j * nx + i + 1] = 1 / h
            rows.append(r)
    for j in range(ny - 1):
        for i in range(nx):
            r = np.zeros(nx * ny)
            r[j * nx + i] = -1 / h
            r[(j + 1) * nx + i] = 1 / h
            rows.append(r)
    return np.array(rows)


def test_build_grid_counts():
    g = build_grid(2, 2, 1.0)
    assert g.n_cells == 4 and g.n_faces == 4
    assert build_grid(52, 52).n_cells == 2704
    assert build_grid(208, 208).n_cells == 43264
    assert build_grid(52, 52).h == pytest.approx(1 / 52)


@pytest.mark.parametrize("args", [(2, 1, 1.0), (1, 5, 1.0), (3, 3, 0.0), (3, 3, -1.0)])
def test_build_grid_rejects(args):
    with pytest.raises(ValueError):
        build_grid(*args)


def test_face_counts_and_ordering():
    g = build_grid(4, 3)
    assert g.n_xfaces == 9 and g.n_yfaces == 8
    left, right = g.face_cells
    assert (left[0], right[0]) == (0, 1)
    assert (left[g.n_xfaces], right[g.n_xfaces]) == (0, 4)


def test_gradient_matches_dense_oracle():
    rng = np.random.default_rng(1)
    g = build_grid(4, 4, 0.3)
    u = rng.normal(size=g.shape)
    np.testing.assert_allclose(face_gradient(g, u), dense_gradient(4, 4, 0.3) @ u.ravel(), rtol=0, atol=1e-13)


def test_gradient_of_constant_and_linear():
    g = build_grid(3, 2, 0.5)
    assert np.all(face_gradient(g, np.full(g.shape, 7.0)) == 0)
    x, _ = g.cell_centers()
    gx, gy = g.split_faces(face_gradient(g, 2.5 * x))
    np.testing.assert_allclose(gx, 2.5)
    np.testing.assert_allclose(gy, 0.0, atol=1e-15)


def test_divergence_matches_dense_transpose():
    rng = np.random.default_rng(2)
    g = build_grid(3, 3, 0.7)
    q = rng.normal(size=g.n_faces)
    ref = -(dense_gradient(3, 3, 0.7).T @ q)
    np.testing.assert_allclose(cell_divergence(g, q).ravel(), ref, atol=1e-13)
    assert np.all(cell_divergence(g, np.zeros(g.n_faces)) == 0)


@settings(max_examples=60, deadline=None)
@given(nx=st.integers(2, 8), ny=st.integers(2, 8), seed=st.integers(0, 2**31 - 1))
def test_adjointness_and_conservation(nx, ny, seed):
    rng = np.random.default_rng(seed)
    g = build_grid(nx, ny)
    u = rng.normal(size=g.shape)
    q = rng.normal(size=g.n_faces)
    lhs = np.sum(cell_divergence(g, q) * u) * g.cell_area
    rhs = -np.sum(q * face_gradient(g, u)) * g.cell_area
    scale = np.linalg.norm(q) * np.linalg.norm(u)
    assert abs(lhs - rhs) <= 1e-12 * scale
    assert abs(g.integrate(cell_divergence(g, q))) <= 1e-12 * max(1.0, np.abs(q).sum())


def test_harmonic_coefficient_examples():
    g = build_grid(2, 2)
    k = harmonic_face_coefficient(g, np.full(g.shape, 3.0), 1e-8)
    np.testing.assert_allclose(k, 3.0 + 1e-8, rtol=1e-15)
    mu = np.array([[0.0, 1e3], [0.0, 1e3]])
    kx, _ = g.split_faces(harmonic_face_coefficient(g, mu, 1e-8))
    np.testing.assert_allclose(kx, 2e-8, rtol=1e-6)
    eps = 1e-12
    mu = np.array([[1.0, 3.0], [1.0, 3.0]])
    kx, _ = g.split_faces(harmonic_face_coefficient(g, mu, eps))
    np.testing.assert_allclose(kx, 2 * (1 + eps) * (3 + eps) / (4 + 2 * eps))
    with pytest.raises(ValueError):
        harmonic_face_coefficient(g, -mu, 1e-8)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0, 1e6), b=st.floats(0, 1e6))
def test_harmonic_symmetric_and_below_arithmetic(a, b):
    g = build_grid(2, 2)
    k1 = harmonic_face_coefficient(g, np.array([[a, b], [a, b]]), 1e-8)[0]
    k2 = harmonic_face_coefficient(g, np.array([[b, a], [b, a]]), 1e-8)[0]
    assert k1 == k2
    assert k1 <= 0.5 * (a + b) + 1e-8 + 1e-12 * (a + b)
    assert k1 > 0


def test_harmonic_derivatives_against_finite_differences():
    rng = np.random.default_rng(3)
    g = build_grid(3, 3)
    mu = rng.uniform(0.1, 2.0, size=g.shape)
    dl, dr = harmonic_face_derivatives(g, mu, 1e-8)
    left, right = g.face_cells
    eps = 1e-6
    for f in (0, 4, 7, g.n_faces - 1):
        for cell, d in ((left[f], dl[f]), (right[f], dr[f])):
            e = np.zeros(g.n_cells)
            e[cell] = eps
            kp = harmonic_face_coefficient(g, mu + e.reshape(g.shape), 1e-8)[f]
            km = harmonic_face_coefficient(g, mu - e.reshape(g.shape), 1e-8)[f]
            assert (kp - km) / (2 * eps) == pytest.approx(d, rel=1e-7)


def loop_cell_gradient_sq(u: np.ndarray, h: float) -> np.ndarray:
    ny, nx = u.shape
    out = np.zeros_like(u)
    for j in range(ny):
        for i in range(nx):
            east = ((u[j, i + 1] - u[j, i]) / h) ** 2 if i + 1 < nx else 0.0
            west = ((u[j, i] - u[j, i - 1]) / h) ** 2 if i > 0 else 0.0
            north = ((u[j + 1, i] - u[j, i]) / h) ** 2 if j + 1 < ny else 0.0
            south = ((u[j, i] - u[j - 1, i]) / h) ** 2 if j > 0 else 0.0
            out[j, i] = 0.5 * (east + west) + 0.5 * (north + south)
    return out


def test_cell_gradient_sq_against_loop():
    rng = np.random.default_rng(4)
    g = build_grid(4, 4, 0.25)
    u = rng.normal(size=g.shape)
    np.testing.assert_allclose(cell_gradient_sq(g, u), loop_cell_gradient_sq(u, 0.25), rtol=1e-13)
    assert np.all(cell_gradient_sq(g, np.ones(g.shape)) == 0)


def test_cell_gradient_sq_linear_interior():
    g = build_grid(6, 5, 0.2)
    x, _ = g.cell_centers()
    c = cell_gradient_sq(g, 3.0 * x)
    np.testing.assert_allclose(c[:, 1:-1], 9.0, rtol=1e-12)
    assert np.all(c >= 0)


def test_forcing_pair_balance():
    g = build_grid(3, 3)
    fp = np.zeros(g.shape)
    fm = np.zeros(g.shape)
    fp[0, 0] = 1.0
    fm[2, 2] = 1.0
    pair = ForcingPair(g, fp, fm)
    assert pair.net.sum() == 0
    fm[2, 2] = 1.0 + 1e-9
    with pytest.raises(UnbalancedForcing):
        ForcingPair(g, fp, fm)
    with pytest.raises(ValueError):
        ForcingPair(g, -fp, -fp)


def test_grid_is_immutable():
    g = Grid2D(3, 3, 1.0)
    with pytest.raises(Exception):
        g.nx = 4
