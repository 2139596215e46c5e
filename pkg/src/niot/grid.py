"""Cartesian pixel grid and the discrete operators living on it.

Cell fields are arrays of shape ``(ny, nx)``; row ``j`` holds the cells with
y-index ``j`` so that ``field[0, 0]`` is the lower-left pixel.  Flattening in
C order gives the row-major cell enumeration used by every sparse operator.

Face fields are 1-D arrays over the interior faces only: the ``(nx - 1) * ny``
faces separating horizontal neighbours come first (row-major over
``(ny, nx - 1)``), followed by the ``nx * (ny - 1)`` faces separating vertical
neighbours (row-major over ``(ny - 1, nx)``).  Boundary faces carry no flux and
are never stored.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Grid2D:
    """Uniform ``nx`` by ``ny`` grid of square cells of width ``h``."""

    nx: int
    ny: int
    h: float

    def __post_init__(self) -> None:
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("cell counts must be integers")
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if not np.isfinite(self.h) or self.h <= 0:
            raise ValueError(f"cell width must be positive, got {self.h}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_xfaces(self) -> int:
        return (self.nx - 1) * self.ny

    @property
    def n_yfaces(self) -> int:
        return self.nx * (self.ny - 1)

    @property
    def n_faces(self) -> int:
        return self.n_xfaces + self.n_yfaces

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of cell-centre coordinates, lower-left origin."""
        x = (np.arange(self.nx) + 0.5) * self.h
        y = (np.arange(self.ny) + 0.5) * self.h
        return np.meshgrid(x, y)

    @cached_property
    def face_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices ``(left, right)`` of the two cells of every face.

        "Right" is the cell on the positive side of the face normal (+x for
        x-faces, +y for y-faces).
        """
        idx = np.arange(self.n_cells).reshape(self.shape)
        left = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
        right = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
        return left, right

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Sparse ``(n_faces, n_cells)`` matrix of ``(u_right - u_left) / h``."""
        left, right = self.face_cells
        rows = np.arange(self.n_faces)
        data = np.concatenate([-np.ones(self.n_faces), np.ones(self.n_faces)]) / self.h
        return sp.csr_matrix(
            (data, (np.concatenate([rows, rows]), np.concatenate([left, right]))),
            shape=(self.n_faces, self.n_cells),
        )

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Unsigned ``(n_faces, n_cells)`` face-to-cell incidence (0/1)."""
        return abs(self.gradient_matrix) * self.h

    def check_cell_field(self, u: np.ndarray, name: str = "field") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise ValueError(f"{name} has shape {u.shape}, grid expects {self.shape}")
        return u

    def check_face_field(self, q: np.ndarray, name: str = "face field") -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_faces,):
            raise ValueError(f"{name} has shape {q.shape}, grid expects ({self.n_faces},)")
        return q

    def integrate(self, u: np.ndarray) -> float:
        return float(np.sum(u) * self.cell_area)

    def split_faces(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """View a face field as ``(qx, qy)`` with shapes ``(ny, nx-1)`` and ``(ny-1, nx)``."""
        q = self.check_face_field(q)
        return (
            q[: self.n_xfaces].reshape(self.ny, self.nx - 1),
            q[self.n_xfaces :].reshape(self.ny - 1, self.nx),
        )


def build_grid(nx: int, ny: int, h: float | None = None) -> Grid2D:
    """Build a grid; ``h`` defaults to ``1 / nx`` (unit width domain)."""
    if h is None:
        h = 1.0 / nx
    return Grid2D(int(nx), int(ny), float(h))


class UnbalancedForcing(ValueError):
    """Source and sink masses differ."""


@dataclass(frozen=True)
class ForcingPair:
    """Balanced source and sink densities of the transport constraint."""

    grid: Grid2D
    fplus: np.ndarray
    fminus: np.ndarray

    def __post_init__(self) -> None:
        fp = self.grid.check_cell_field(self.fplus, "fplus")
        fm = self.grid.check_cell_field(self.fminus, "fminus")
        if np.any(fp < 0) or np.any(fm < 0):
            raise ValueError("source and sink densities must be nonnegative")
        plus, minus = fp.sum(), fm.sum()
        if abs(plus - minus) > 1e-12 * max(plus, minus, np.finfo(float).tiny):
            raise UnbalancedForcing(f"unbalanced forcing: source mass {plus!r} vs sink mass {minus!r}")
        object.__setattr__(self, "fplus", fp)
        object.__setattr__(self, "fminus", fm)

    @property
    def net(self) -> np.ndarray:
        return self.fplus - self.fminus

    def scaled(self, c: float) -> "ForcingPair":
        return ForcingPair(self.grid, c * self.fplus, c * self.fminus)


def face_gradient(grid: Grid2D, u: np.ndarray) -> np.ndarray:
    """Normal derivative ``(u_right - u_left) / h`` on every interior face."""
    u = grid.check_cell_field(u, "u")
    return grid.gradient_matrix @ u.ravel()


def cell_divergence(grid: Grid2D, q: np.ndarray) -> np.ndarray:
    """Net outflow of a face flux per unit cell area (boundary flux is zero).

    This is minus the transpose of :func:`face_gradient`, so
    ``sum(div(q) * u) == -sum(q * grad(u))`` exactly up to rounding.
    """
    q = grid.check_face_field(q, "q")
    return -(grid.gradient_matrix.T @ q).reshape(grid.shape)


def harmonic_face_coefficient(grid: Grid2D, mu: np.ndarray, mu_min: float) -> np.ndarray:
    """Harmonic mean of ``mu + mu_min`` over the two cells of each face."""
    mu = grid.check_cell_field(mu, "mu")
    if np.any(mu < 0):
        raise ValueError("conductivity must be nonnegative")
    left, right = grid.face_cells
    a = mu.ravel()[left] + mu_min
    b = mu.ravel()[right] + mu_min
    return 2.0 * a * b / (a + b)


def harmonic_face_derivatives(grid: Grid2D, mu: np.ndarray, mu_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the harmonic face coefficient w.r.t. its left and right cell."""
    left, right = grid.face_cells
    a = mu.ravel()[left] + mu_min
    b = mu.ravel()[right] + mu_min
    s2 = (a + b) ** 2
    return 2.0 * b * b / s2, 2.0 * a * a / s2


def cell_gradient_sq(grid: Grid2D, u: np.ndarray) -> np.ndarray:
    """Cell-wise ``|grad u|^2`` reconstructed from face differences.

    For each direction the squared normal derivatives on the two faces of the
    cell are averaged; a boundary face counts as zero slope.
    """
    g = face_gradient(grid, u)
    return 0.5 * (grid.incidence.T @ (g * g)).reshape(grid.shape)
