"""Porous-media smoothing map ``I(mu) = alpha * rho(t*)`` and its adjoint.

``rho`` solves ``d_t rho = div(rho^(m-1) grad rho)`` with zero-flux walls and
``rho(0) = mu``.  Each time step is a backward-Euler step of the conservative
finite-volume form, solved by damped Newton.  The Jacobian of the converged
step is kept so that ``I'(mu)^T r`` costs one transposed triangular solve per
step.

Also contains the closed-form self-similar (Barenblatt) solution used to
calibrate ``(m, t*)`` from a Hagen-Poiseuille power law.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import integrate, special

from .grid import Grid2D

logger = logging.getLogger(__name__)


class NewtonNoConvergence(RuntimeError):
    def __init__(self, step: int, residual: float):
        super().__init__(f"Newton failed on time step {step} (residual {residual:.3e})")
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class PmParams:
    m: float = 2.0
    t_star: float = 1e-3
    substeps: int = 5
    step_ratio: float = 2.0
    alpha: float = 1.0
    newton_tol: float = 1e-10
    newton_max: int = 30

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"PM exponent must be >= 1, got {self.m}")
        if self.t_star <= 0:
            raise ValueError("t_star must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.step_ratio < 1:
            raise ValueError("step_ratio must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def substep_schedule(params: PmParams) -> list[float]:
    """Geometric time steps ``t* (r-1) r^(k-1) / (r^S - 1)`` summing to ``t*``."""
    S, r, T = params.substeps, params.step_ratio, params.t_star
    if S == 1:
        return [T]
    if r == 1.0:
        w = np.ones(S)
    else:
        w = r ** np.arange(S)
    steps = T * w / w.sum()
    # put the rounding remainder in the last step so the sum is t* exactly
    steps[-1] = T - math.fsum(steps[:-1])
    return [float(s) for s in steps]


# ---------------------------------------------------------------------------
# Barenblatt solution and exponent calibration


def unit_sphere_measure(n: int) -> float:
    """Surface measure of the unit sphere in R^n (2 for n = 1, 2 pi for n = 2)."""
    return 2.0 * math.pi ** (n / 2) / special.gamma(n / 2)


def _theta_integral(m: float, n: int) -> float:
    val, _ = integrate.quad(
        lambda th: np.cos(th) ** ((m + 1) / (m - 1)) * np.sin(th) ** (n - 1),
        0.0,
        math.pi / 2,
        epsabs=1e-14,
        epsrel=1e-12,
    )
    return val


@dataclass(frozen=True)
class BarenblattProfile:
    """Self-similar solution ``t^-a (A - B |x|^2 t^-2b)_+^(1/(m-1))`` of mass ``M`` in R^n."""

    m: float
    n: int
    M: float = 1.0
    beta: float = field(init=False)
    alpha: float = field(init=False)
    B: float = field(init=False)
    A: float = field(init=False)
    w_n: float = field(init=False)
    z_mn: float = field(init=False)

    def __post_init__(self) -> None:
        if self.m <= 1:
            raise ValueError("the Barenblatt profile needs m > 1")
        if self.n < 1 or self.M <= 0:
            raise ValueError("need n >= 1 and positive mass")
        m, n = self.m, self.n
        beta = 1.0 / (2.0 + (m - 1.0) * n)
        # constant for d_t rho = div(rho^(m-1) grad rho)
        B = beta * (m - 1.0) / 2.0
        w_n = unit_sphere_measure(n)
        z = _theta_integral(m, n)
        A = (B ** (n / 2) * self.M / (w_n * z)) ** (2.0 * beta * (m - 1.0))
        for name, value in (("beta", beta), ("alpha", beta * n), ("B", B), ("A", A), ("w_n", w_n), ("z_mn", z)):
            object.__setattr__(self, name, value)

    def density(self, t: float, r: np.ndarray) -> np.ndarray:
        """Profile as a function of the distance ``r`` from the centre."""
        if t <= 0:
            raise ValueError("time must be positive")
        r = np.asarray(r, dtype=float)
        core = np.maximum(self.A - self.B * r * r * t ** (-2.0 * self.beta), 0.0)
        return t ** (-self.alpha) * core ** (1.0 / (self.m - 1.0))


def barenblatt_eval(t: float, x, profile: BarenblattProfile) -> np.ndarray:
    """Density at point(s) ``x`` (last axis of length ``n``) and time ``t``."""
    x = np.asarray(x, dtype=float)
    if profile.n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        r = np.abs(x)
    else:
        if x.shape[-1] != profile.n:
            raise ValueError(f"points must have {profile.n} coordinates")
        r = np.linalg.norm(x, axis=-1)
    return profile.density(t, r)


def barenblatt_radius(t: float, profile: BarenblattProfile) -> float:
    if t <= 0:
        raise ValueError("time must be positive")
    return t**profile.beta * math.sqrt(profile.A / profile.B)


def pm_exponents(p: float, kappa: float, d: int) -> tuple[float, float]:
    """``(m, t*)`` such that a point mass ``M`` spreads to radius ``(M / kappa)^(1/p)``.

    The spreading happens across a channel, so the Barenblatt dimension is
    ``n = d - 1``.
    """
    if d not in (2, 3):
        raise ValueError("ambient dimension must be 2 or 3")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    n = d - 1
    if p <= n:
        raise ValueError(f"need p > d - 1 = {n}, got p = {p}")
    m = (2.0 + p - n) / (p - n)
    prof = BarenblattProfile(m, n, 1.0)
    # r(t) = t^beta B^-beta (w z)^(-beta (m-1)) M^(1/p); solve r(t*) = (M / kappa)^(1/p)
    tb = kappa ** (-1.0 / p) * (prof.w_n * prof.z_mn) ** (prof.beta * (m - 1.0)) * prof.B**prof.beta
    return m, tb ** (1.0 / prof.beta)


# ---------------------------------------------------------------------------
# Discrete forward map


@dataclass
class StepRecord:
    tau: float
    iterations: int
    residuals: list[float]
    lu: spla.SuperLU = field(repr=False)


@dataclass
class NewtonTrace:
    grid: Grid2D
    steps: list[StepRecord]
    mass: float

    @property
    def iterations(self) -> list[int]:
        return [s.iterations for s in self.steps]


def _diffusivity(grid: Grid2D, rho: np.ndarray, m: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face diffusivity (arithmetic mean of rho^(m-1)) and its derivatives."""
    left, right = grid.face_cells
    rl, rr = rho[left], rho[right]
    if m == 1.0:
        one = np.ones_like(rl)
        return one, 0.0 * one, 0.0 * one
    D = 0.5 * (rl ** (m - 1.0) + rr ** (m - 1.0))

    def deriv(r):
        out = np.zeros_like(r)
        pos = r > 0
        out[pos] = 0.5 * (m - 1.0) * r[pos] ** (m - 2.0)
        return out

    return D, deriv(rl), deriv(rr)


def _residual(grid: Grid2D, rho, rho_prev, tau, m):
    G = grid.gradient_matrix
    D, _, _ = _diffusivity(grid, rho, m)
    return rho - rho_prev + tau * (G.T @ (D * (G @ rho)))


def _jacobian(grid: Grid2D, rho, tau, m) -> sp.csc_matrix:
    G = grid.gradient_matrix
    D, dl, dr = _diffusivity(grid, rho, m)
    left, right = grid.face_cells
    grad = G @ rho
    rows = np.arange(grid.n_faces)
    dD = sp.csr_matrix(
        (np.concatenate([dl * grad, dr * grad]), (np.concatenate([rows, rows]), np.concatenate([left, right]))),
        shape=(grid.n_faces, grid.n_cells),
    )
    J = sp.identity(grid.n_cells, format="csr") + tau * (G.T @ (sp.diags(D) @ G + dD))
    return J.tocsc()


def _newton_step(grid: Grid2D, rho_prev: np.ndarray, tau: float, params: PmParams, index: int) -> tuple[np.ndarray, StepRecord]:
    m = params.m
    scale = max(np.abs(rho_prev).max(), np.finfo(float).tiny)
    rho = rho_prev.copy()
    F = _residual(grid, rho, rho_prev, tau, m)
    res = np.abs(F).max() / scale
    history = [res]
    it = 0
    while res > params.newton_tol:
        if it >= params.newton_max:
            raise NewtonNoConvergence(index, res)
        delta = spla.splu(_jacobian(grid, rho, tau, m)).solve(-F)
        s = 1.0
        for _ in range(21):
            trial = rho + s * delta
            if np.any(trial < 0):
                trial = np.maximum(trial, 0.0)
            F_trial = _residual(grid, trial, rho_prev, tau, m)
            res_trial = np.abs(F_trial).max() / scale
            if res_trial < res:
                break
            s *= 0.5
        else:
            raise NewtonNoConvergence(index, res)
        rho, F, res = trial, F_trial, res_trial
        history.append(res)
        it += 1
    # factor at the converged state and take one polishing step with it; an
    # undamped step restores the discrete mass balance to rounding level
    lu = spla.splu(_jacobian(grid, rho, tau, m))
    if res > 0:
        rho = rho + lu.solve(-F)
    return rho, StepRecord(tau, it, history, lu)


def pm_forward(grid: Grid2D, mu: np.ndarray, params: PmParams) -> tuple[np.ndarray, NewtonTrace]:
    """Evolve ``mu`` to ``t*`` and return ``(alpha * rho(t*), trace)``."""
    mu = grid.check_cell_field(mu, "mu")
    if np.any(mu < 0):
        raise ValueError("initial density must be nonnegative")
    rho = mu.ravel().copy()
    steps = []
    for k, tau in enumerate(substep_schedule(params)):
        rho, rec = _newton_step(grid, rho, tau, params, k)
        steps.append(rec)
        logger.debug("PM step %d: tau=%.3e, %d Newton iterations", k, tau, rec.iterations)
    # rounding-level negatives only; the discrete scheme is order preserving
    rho = np.maximum(rho, 0.0)
    trace = NewtonTrace(grid, steps, float(mu.sum()))
    return params.alpha * rho.reshape(grid.shape), trace


def pm_tangent_apply(v: np.ndarray, trace: NewtonTrace, params: PmParams) -> np.ndarray:
    """Directional derivative ``I'(mu) v`` using the retained step Jacobians."""
    grid = trace.grid
    w = grid.check_cell_field(v, "v").ravel()
    for rec in trace.steps:
        w = rec.lu.solve(w)
    return params.alpha * w.reshape(grid.shape)


def pm_adjoint_apply(residual: np.ndarray, trace: NewtonTrace, params: PmParams) -> np.ndarray:
    """``I'(mu)^T residual``: transposed step solves in reverse time order."""
    grid = trace.grid
    w = grid.check_cell_field(residual, "residual").ravel()
    for rec in reversed(trace.steps):
        w = rec.lu.solve(w, trans="T")
    return params.alpha * w.reshape(grid.shape)


def identity_map(mu: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * np.asarray(mu, dtype=float)


def identity_adjoint(residual: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * np.asarray(residual, dtype=float)
