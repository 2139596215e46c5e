"""Branched-transport regularizer: Joule dissipation plus concave building cost.

The dissipation is evaluated on faces with the same harmonic coefficients as
the elliptic operator, ``E = 1/2 sum_f k_f (grad u)_f^2 h^2``, so that its
derivative follows from the variational identity without an extra solve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid2D, face_gradient, harmonic_face_coefficient, harmonic_face_derivatives


@dataclass(frozen=True)
class RegParams:
    gamma: float = 0.5
    mu_min: float = 1e-8

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.mu_min <= 0:
            raise ValueError("mu_min must be positive")


def dissipation_energy(grid: Grid2D, mu: np.ndarray, u: np.ndarray, params: RegParams) -> float:
    k = harmonic_face_coefficient(grid, mu, params.mu_min)
    g = face_gradient(grid, u)
    return float(0.5 * np.sum(k * g * g) * grid.cell_area)


def mass_term(grid: Grid2D, mu: np.ndarray, params: RegParams) -> float:
    mu = grid.check_cell_field(mu, "mu")
    return float(np.sum(mu**params.gamma) / (2.0 * params.gamma) * grid.cell_area)


def dissipation_gradient(grid: Grid2D, mu: np.ndarray, u: np.ndarray, mu_min: float) -> np.ndarray:
    """L2 gradient of the dissipation at the equilibrium potential ``u``.

    Each face contributes ``-dk/dmu * (grad u)^2 / 2`` to both of its cells.
    With equal neighbours ``dk/dmu = 1/2`` and this is ``-cell_gradient_sq / 2``.
    """
    mu = grid.check_cell_field(mu, "mu")
    g2 = face_gradient(grid, u) ** 2
    dleft, dright = harmonic_face_derivatives(grid, mu, mu_min)
    left, right = grid.face_cells
    n = grid.n_cells
    acc = np.bincount(left, dleft * g2, minlength=n) + np.bincount(right, dright * g2, minlength=n)
    return -0.5 * acc.reshape(grid.shape)


def mass_gradient(mu: np.ndarray, params: RegParams) -> np.ndarray:
    """``mu^(gamma-1) / 2`` with the power taken at ``max(mu, mu_min)``."""
    return 0.5 * np.maximum(mu, params.mu_min) ** (params.gamma - 1.0)


def scaled_mass_gradient(mu: np.ndarray, params: RegParams) -> np.ndarray:
    """``mu^(2/gamma) * mass_gradient(mu)`` without forming the singular factor.

    Above ``mu_min`` this is the single power ``mu^(2/gamma + gamma - 1)``,
    which has a positive exponent and vanishes at zero.
    """
    g = params.gamma
    mu = np.asarray(mu, dtype=float)
    above = mu >= params.mu_min
    out = np.empty_like(mu)
    out[above] = 0.5 * mu[above] ** (2.0 / g + g - 1.0)
    out[~above] = 0.5 * mu[~above] ** (2.0 / g) * params.mu_min ** (g - 1.0)
    return out


def reg_gradient(grid: Grid2D, mu: np.ndarray, u: np.ndarray, params: RegParams) -> np.ndarray:
    """L2 gradient of ``E + M_gamma`` for the converged potential ``u`` of ``mu``."""
    return dissipation_gradient(grid, mu, u, params.mu_min) + mass_gradient(mu, params)
