"""Weighted Neumann Poisson solver ``-div((mu + mu_min) grad u) = f+ - f-``."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ForcingPair, Grid2D, UnbalancedForcing, harmonic_face_coefficient

logger = logging.getLogger(__name__)

PRECONDITIONERS = ("none", "diagonal", "ilu")
METHODS = ("cg", "direct")


class NoConvergence(RuntimeError):
    """The iterative solver hit its iteration budget."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverSettings:
    rtol: float = 1e-10
    max_iterations: int | None = None  # None means 10 * n_cells
    preconditioner: str = "diagonal"
    method: str = "direct"

    def __post_init__(self) -> None:
        if not 0 < self.rtol < 1:
            raise ValueError(f"rtol must lie in (0, 1), got {self.rtol}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}; choose from {PRECONDITIONERS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")


@dataclass(frozen=True)
class PotentialSolution:
    u: np.ndarray
    flux: np.ndarray
    face_coeff: np.ndarray
    residual_norm: float
    iterations: int


def assemble_weighted_laplacian(grid: Grid2D, mu: np.ndarray, mu_min: float) -> sp.csr_matrix:
    """Five-point operator of ``-div((mu + mu_min) grad .)`` with zero-flux walls.

    Face coefficients are harmonic means; off-diagonal entries are
    ``-k_face / h**2`` and every row sums to zero.
    """
    k = harmonic_face_coefficient(grid, mu, mu_min)
    return _laplacian_from_faces(grid, k)


@lru_cache(maxsize=8)
def _pattern(grid: Grid2D, drop_last: bool):
    """CSC structure of the face-assembled operator and each face's slots in it.

    With ``drop_last`` the last row and column are removed (pinned cell).
    """
    n = grid.n_cells
    left, right = grid.face_cells
    faces = np.arange(grid.n_faces)
    rows = np.concatenate([left, right, left, right])
    cols = np.concatenate([left, right, right, left])
    face = np.concatenate([faces, faces, faces, faces])
    sign = np.concatenate([np.ones(2 * grid.n_faces), -np.ones(2 * grid.n_faces)])
    size = n
    if drop_last:
        keep = (rows < n - 1) & (cols < n - 1)
        rows, cols, face, sign = rows[keep], cols[keep], face[keep], sign[keep]
        size = n - 1
    key = cols.astype(np.int64) * size + rows
    uniq, slot = np.unique(key, return_inverse=True)
    indices = (uniq % size).astype(np.int32)
    indptr = np.searchsorted(uniq // size, np.arange(size + 1)).astype(np.int32)
    return size, indptr, indices, slot, face, sign / grid.h**2


def _assemble(grid: Grid2D, k: np.ndarray, drop_last: bool = False) -> sp.csc_matrix:
    size, indptr, indices, slot, face, coef = _pattern(grid, drop_last)
    data = np.bincount(slot, coef * k[face], minlength=indices.size)
    return sp.csc_matrix((data, indices, indptr), shape=(size, size))


def _laplacian_from_faces(grid: Grid2D, k: np.ndarray) -> sp.csr_matrix:
    A = _assemble(grid, k).tocsr()
    A.sort_indices()
    return A


def _project(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def _pcg(A, b, x0, M, rtol, maxiter):
    """Conjugate gradients on the consistent singular system, mean-projected."""
    bnorm = np.linalg.norm(b)
    x = _project(x0.copy())
    r = _project(b - A @ x)
    z = _project(M(r))
    p = z.copy()
    rz = r @ z
    it = 0
    rnorm = np.linalg.norm(r)
    while rnorm > rtol * bnorm:
        if it >= maxiter:
            break
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        r = _project(r)
        it += 1
        # periodically replace the recursive residual to stop drift
        if it % 50 == 0:
            r = _project(b - A @ x)
        rnorm = np.linalg.norm(r)
        z = _project(M(r))
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return _project(x), it


def _preconditioner(grid: Grid2D, k: np.ndarray, A: sp.csr_matrix, kind: str):
    if kind == "none":
        return lambda r: r
    if kind == "diagonal":
        inv = 1.0 / A.diagonal()
        return lambda r: inv * r
    # incomplete factorization of the pinned (nonsingular) block; unpivoted so
    # that the preconditioner stays close to symmetric
    ilu = spla.spilu(
        _assemble(grid, k, drop_last=True),
        drop_tol=1e-4,
        fill_factor=10,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )

    def apply(r):
        z = np.zeros_like(r)
        z[:-1] = ilu.solve(r[:-1])
        return z

    return apply


def _direct(grid: Grid2D, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    # pin the last cell, then re-centre
    x = np.zeros(grid.n_cells)
    lu = spla.splu(
        _assemble(grid, k, drop_last=True),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    x[:-1] = lu.solve(b[:-1])
    return _project(x)


def solve_poisson(
    grid: Grid2D,
    mu: np.ndarray,
    forcing: ForcingPair,
    settings: SolverSettings | None = None,
    mu_min: float = 1e-8,
    x0: np.ndarray | None = None,
) -> PotentialSolution:
    """Zero-mean potential and face flux for conductivity ``mu``.

    ``x0`` is an optional initial guess for the iterative method; the returned
    potential always has zero mean.
    """
    settings = settings or SolverSettings()
    mu = grid.check_cell_field(mu, "mu")
    if np.any(mu < 0):
        raise ValueError("conductivity must be nonnegative")
    total = forcing.fplus.sum()
    imbalance = forcing.fplus.sum() - forcing.fminus.sum()
    if abs(imbalance) > 1e-10 * total:
        raise UnbalancedForcing(f"net forcing integral {imbalance * grid.cell_area:g} is not zero")
    b = _project(forcing.net.ravel())

    k = harmonic_face_coefficient(grid, mu, mu_min)
    G = grid.gradient_matrix
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        u = np.zeros(grid.n_cells)
        iterations = 0
    elif settings.method == "direct":
        u = _direct(grid, k, b)
        iterations = 1
    else:
        maxiter = settings.max_iterations or 10 * grid.n_cells
        guess = np.zeros(grid.n_cells) if x0 is None else np.asarray(x0, float).ravel()
        A = _laplacian_from_faces(grid, k)
        u, iterations = _pcg(A, b, guess, _preconditioner(grid, k, A, settings.preconditioner), settings.rtol, maxiter)
    grad_u = G @ u
    residual = float(np.linalg.norm(G.T @ (k * grad_u) - b))
    if settings.method == "cg" and residual > settings.rtol * bnorm:
        raise NoConvergence(
            f"CG stopped after {iterations} iterations with relative residual {residual / bnorm:.3e}",
            residual,
            iterations,
        )
    logger.debug("poisson solve: %d iterations, residual %.3e", iterations, residual)
    flux = -k * grad_u
    return PotentialSolution(u.reshape(grid.shape), flux, k, residual, iterations)
