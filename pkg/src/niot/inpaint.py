"""Network inpainting driver: objective, gradient and mirror-descent loop.

The objective is ``J(mu) = E(mu) + M_gamma(mu) + lambda * D(I(mu), I_obs)``
with ``D`` the ``W``-weighted L2 misfit.  Iterates follow

    mu <- mu - dt * mu^(2/gamma) * grad J(mu)

with a backtracking time step that only accepts steps which keep ``mu``
nonnegative and decrease ``J``.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .elliptic import SolverSettings, solve_poisson
from .grid import ForcingPair, Grid2D
from .pm import PmParams, identity_adjoint, identity_map, pm_adjoint_apply, pm_forward
from .regularizer import (
    RegParams,
    dissipation_energy,
    dissipation_gradient,
    mass_gradient,
    mass_term,
    scaled_mass_gradient,
)

logger = logging.getLogger(__name__)

MAP_KINDS = ("identity", "pm")
WEIGHT_KINDS = ("mask", "one")
MU0_KINDS = ("uniform", "from_observation")
STOP_REASONS = ("tolerance_met", "k_max", "step_underflow")


class StepInadmissible(ArithmeticError):
    """The requested step would make the conductivity negative somewhere."""


@dataclass(frozen=True)
class NiotConfig:
    gamma: float = 0.5
    lam: float = 0.0
    map_kind: str = "identity"
    alpha: float = 1.0
    pm: PmParams | None = None
    weight_kind: str = "mask"
    mu0_kind: str = "uniform"
    mu0_value: float = 1.0
    mu_plus_rel: float = 1e-5
    mu_min: float = 1e-8
    dt0: float = 1e-2
    dt_min: float = 1e-6
    dt_max: float = 1.0
    dt_grow: float = 1.05
    stop_tol: float = 1e-5
    k_max: int = 20000
    elliptic: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.map_kind not in MAP_KINDS:
            raise ValueError(f"map_kind must be one of {MAP_KINDS}")
        if self.weight_kind not in WEIGHT_KINDS:
            raise ValueError(f"weight_kind must be one of {WEIGHT_KINDS}")
        if self.mu0_kind not in MU0_KINDS:
            raise ValueError(f"mu0_kind must be one of {MU0_KINDS}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.mu0_value < 0:
            raise ValueError("uniform initial value must be nonnegative")
        if not 0 < self.dt_min <= self.dt0 <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt0 <= dt_max")
        if self.dt_grow < 1:
            raise ValueError("dt_grow must be >= 1")
        if self.stop_tol <= 0 or self.k_max < 0:
            raise ValueError("stop_tol must be positive and k_max nonnegative")

    @property
    def reg(self) -> RegParams:
        return RegParams(self.gamma, self.mu_min)

    def pm_params(self) -> PmParams:
        """PM map parameters with the map scaling taken from ``alpha``."""
        return dataclasses.replace(self.pm or PmParams(), alpha=self.alpha)


# ---------------------------------------------------------------------------
# Fitting term


def confidence_from_mask(mask: np.ndarray) -> np.ndarray:
    """``W = 1 - mask``: zero confidence inside the corrupted region."""
    mask = _check_binary(mask, "mask")
    return 1.0 - mask


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    binary = (np.abs(mask) <= 1e-12) | (np.abs(mask - 1.0) <= 1e-12)
    if not binary.all():
        raise ValueError(f"{name} must be binary (0/1)")
    return np.round(mask)


def discrepancy(grid: Grid2D, image: np.ndarray, observed: np.ndarray, W: np.ndarray) -> float:
    diff = grid.check_cell_field(image) - grid.check_cell_field(observed)
    return float(0.5 * np.sum(diff * diff * W) * grid.cell_area)


def confidence(grid: Grid2D, mask: np.ndarray | None, cfg: NiotConfig) -> np.ndarray:
    if cfg.weight_kind == "one" or mask is None:
        if cfg.weight_kind == "mask":
            raise ValueError("weight_kind 'mask' needs a mask")
        return np.ones(grid.shape)
    return confidence_from_mask(grid.check_cell_field(mask, "mask"))


# ---------------------------------------------------------------------------
# Objective and gradient


@dataclass
class Evaluation:
    """Objective decomposition at one conductivity, plus what the gradient needs."""

    J: float
    E: float
    M: float
    D: float
    u: np.ndarray
    image: np.ndarray | None
    trace: object = None


def evaluate(
    grid: Grid2D,
    mu: np.ndarray,
    forcing: ForcingPair,
    observed: np.ndarray | None,
    W: np.ndarray | None,
    cfg: NiotConfig,
) -> Evaluation:
    reg = cfg.reg
    sol = solve_poisson(grid, mu, forcing, cfg.elliptic, mu_min=cfg.mu_min)
    E = dissipation_energy(grid, mu, sol.u, reg)
    M = mass_term(grid, mu, reg)
    image, trace, D = None, None, 0.0
    if cfg.lam > 0:
        if cfg.map_kind == "identity":
            image = identity_map(mu, cfg.alpha)
        else:
            image, trace = pm_forward(grid, mu, cfg.pm_params())
        D = discrepancy(grid, image, observed, W)
    return Evaluation(E + M + cfg.lam * D, E, M, D, sol.u, image, trace)


def gradient_from_evaluation(
    grid: Grid2D, mu: np.ndarray, ev: Evaluation, observed, W, cfg: NiotConfig
) -> np.ndarray:
    grad = dissipation_gradient(grid, mu, ev.u, cfg.mu_min) + mass_gradient(mu, cfg.reg)
    if cfg.lam > 0:
        r = W * (ev.image - observed)
        if cfg.map_kind == "identity":
            grad = grad + cfg.lam * identity_adjoint(r, cfg.alpha)
        else:
            grad = grad + cfg.lam * pm_adjoint_apply(r, ev.trace, cfg.pm_params())
    return grad


def total_gradient(
    grid: Grid2D,
    mu: np.ndarray,
    forcing: ForcingPair,
    observed: np.ndarray | None,
    W: np.ndarray | None,
    cfg: NiotConfig,
) -> tuple[np.ndarray, Evaluation]:
    """L2 gradient of ``J`` and the objective parts it was computed from."""
    mu = grid.check_cell_field(mu, "mu")
    ev = evaluate(grid, mu, forcing, observed, W, cfg)
    return gradient_from_evaluation(grid, mu, ev, observed, W, cfg), ev


def update_direction(mu: np.ndarray, grad: np.ndarray, cfg: NiotConfig) -> np.ndarray:
    """``mu^(2/gamma) * grad`` with the mass part taken as a single power."""
    reg = cfg.reg
    rest = grad - mass_gradient(mu, reg)
    return mu ** (2.0 / cfg.gamma) * rest + scaled_mass_gradient(mu, reg)


def update_norm(grid: Grid2D, direction: np.ndarray) -> float:
    return float(np.abs(direction).sum() * grid.cell_area)


def mirror_step(mu: np.ndarray, grad: np.ndarray, dt: float, cfg: NiotConfig, direction: np.ndarray | None = None) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if direction is None:
        direction = update_direction(mu, grad, cfg)
    new = mu - dt * direction
    if np.any(new < 0):
        raise StepInadmissible(f"step dt={dt:g} drives {int(np.sum(new < 0))} cells negative")
    return new


def initial_mu(observed: np.ndarray | None, cfg: NiotConfig, grid: Grid2D | None = None) -> np.ndarray:
    if cfg.mu0_kind == "uniform":
        shape = grid.shape if grid is not None else np.shape(observed)
        return np.full(shape, float(cfg.mu0_value))
    if cfg.map_kind == "pm":
        raise ValueError("initial data from the observation needs an invertible map (identity)")
    if observed is None:
        raise ValueError("initial data from the observation needs an observed image")
    observed = np.asarray(observed, dtype=float)
    mu_plus = cfg.mu_plus_rel * observed.max()
    return observed / cfg.alpha + mu_plus


# ---------------------------------------------------------------------------
# Optimization loop


@dataclass
class IterationRecord:
    k: int
    dt: float
    J: float
    E: float
    M: float
    D: float
    update_norm: float
    accepted: bool


@dataclass
class RunReport:
    records: list[IterationRecord]
    stopping_reason: str
    iterations: int
    final_update_norm: float
    mu: np.ndarray
    image: np.ndarray
    u: np.ndarray

    @property
    def accepted(self) -> list[IterationRecord]:
        return [r for r in self.records if r.accepted]

    def to_dict(self) -> dict:
        return {
            "stopping_reason": self.stopping_reason,
            "iterations": self.iterations,
            "final_update_norm": self.final_update_norm,
            "records": [dataclasses.asdict(r) for r in self.records],
        }


def run_niot(
    grid: Grid2D,
    forcing: ForcingPair,
    cfg: NiotConfig,
    observed: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    mu0: np.ndarray | None = None,
    callback: Callable[[int, np.ndarray, Evaluation], None] | None = None,
) -> RunReport:
    """Minimize ``J`` from ``initial_mu`` (or ``mu0``) by adaptive mirror descent."""
    if cfg.lam > 0:
        if observed is None:
            raise ValueError("lambda > 0 needs an observed image")
        observed = grid.check_cell_field(observed, "observed")
        W = confidence(grid, mask, cfg)
    else:
        W = None
    mu = grid.check_cell_field(initial_mu(observed, cfg, grid) if mu0 is None else mu0, "mu0").copy()
    if np.any(mu < 0):
        raise ValueError("initial conductivity must be nonnegative")

    grad, ev = total_gradient(grid, mu, forcing, observed, W, cfg)
    direction = update_direction(mu, grad, cfg)
    norm = update_norm(grid, direction)
    records = [IterationRecord(0, 0.0, ev.J, ev.E, ev.M, ev.D, norm, True)]
    dt = cfg.dt0
    k = 0
    reason = "k_max"
    while True:
        if norm < cfg.stop_tol:
            reason = "tolerance_met"
            break
        if k >= cfg.k_max:
            reason = "k_max"
            break
        try:
            trial = mirror_step(mu, grad, dt, cfg, direction)
            ev_trial = evaluate(grid, trial, forcing, observed, W, cfg)
            accepted = ev_trial.J < ev.J
        except StepInadmissible:
            ev_trial, accepted = None, False
        if not accepted:
            if ev_trial is not None:
                records.append(
                    IterationRecord(k + 1, dt, ev_trial.J, ev_trial.E, ev_trial.M, ev_trial.D, float("nan"), False)
                )
            else:
                records.append(IterationRecord(k + 1, dt, *(float("nan"),) * 5, False))
            dt *= 0.5
            if dt < cfg.dt_min:
                reason = "step_underflow"
                break
            continue
        k += 1
        mu, ev = trial, ev_trial
        grad = gradient_from_evaluation(grid, mu, ev, observed, W, cfg)
        direction = update_direction(mu, grad, cfg)
        norm = update_norm(grid, direction)
        records.append(IterationRecord(k, dt, ev.J, ev.E, ev.M, ev.D, norm, True))
        if callback is not None:
            callback(k, mu, ev)
        if k % 100 == 0:
            logger.info("iter %d: J=%.6e dt=%.3e update=%.3e", k, ev.J, dt, norm)
        dt = min(dt * cfg.dt_grow, cfg.dt_max)

    if ev.image is not None:
        image = ev.image
    elif cfg.map_kind == "identity":
        image = identity_map(mu, cfg.alpha)
    else:
        image = pm_forward(grid, mu, cfg.pm_params())[0]
    logger.info("stopped after %d iterations: %s (update norm %.3e)", k, reason, norm)
    return RunReport(records, reason, k, norm, mu, image, ev.u)


# ---------------------------------------------------------------------------
# Topology diagnostics


def support(mu: np.ndarray, threshold_rel: float) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    top = mu.max()
    if top <= 0:
        return np.zeros(mu.shape, dtype=bool)
    return mu >= threshold_rel * top


def connectivity_check(mu: np.ndarray, forcing: ForcingPair, threshold_rel: float) -> bool:
    """True iff every sink cell is 4-connected to a source cell through the support."""
    if not 0 < threshold_rel < 1:
        raise ValueError("threshold_rel must lie in (0, 1)")
    labels, _ = ndimage.label(support(mu, threshold_rel))
    source_labels = set(np.unique(labels[forcing.fplus > 0])) - {0}
    sink_labels = labels[forcing.fminus > 0]
    return bool(source_labels) and all(lab in source_labels for lab in sink_labels)
