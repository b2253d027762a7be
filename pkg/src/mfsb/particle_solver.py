"""Coupled N-particle FBSDE of the weak penalized problem.

The N-particle system runs the same Picard scheme as the mean-field solver
with two substitutions: the law argument of the drift and of the sensitivity
functional is the running empirical measure of the ensemble itself, and the
terminal condition is k * grad phi(X^i_T) (the system is solved directly in
the rescaled adjoint variables, so no 1/N factors appear).  Brownian
increments come from an explicit :class:`~mfsb.fbsde.NoiseBank` so the
system can be synchronously coupled with mean-field copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import pmean
from .fbsde import (FbsdeSolution, NoiseBank, SolverConfig, TimeGrid,
                    estimate_Z, solve_ensemble)
from .measures import ParticleCloud, sample
from .mkv_solver import ValueEstimate
from .model import ProblemSpec

__all__ = ["NParticleSolution", "solve_nparticle_fbsde", "nparticle_value"]


@dataclass
class NParticleSolution:
    """N-particle (X, Y) ensemble plus the diagonal Z regression estimate.

    Off-diagonal Z blocks are never computed: the values, drifts and chaos
    diagnostics only use aggregate increments, and O(N^2) storage is
    avoided.
    """

    X: np.ndarray
    Y: np.ndarray
    Z_diag: np.ndarray
    control: np.ndarray
    grid: TimeGrid
    picard_residuals: list
    converged: bool
    events: list
    noise_bank_id: str

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def x_cloud(self, j: int) -> ParticleCloud:
        return ParticleCloud(self.X[:, j, :])

    def xy_cloud(self, j: int) -> ParticleCloud:
        return ParticleCloud(np.concatenate([self.X[:, j, :], self.Y[:, j, :]], axis=1))


def _phi_terminal(k: float, phi):
    def values(cloud: ParticleCloud) -> np.ndarray:
        return k * phi.grad(cloud.points)
    return values


def solve_nparticle_fbsde(spec: ProblemSpec, k: float, phi, N: int,
                          grid: TimeGrid, cfg: SolverConfig,
                          noise: NoiseBank) -> NParticleSolution:
    """Solve the N-particle FBSDE with terminal Y^i_T = k grad phi(X^i_T).

    With ``interaction none`` (and measure-free f2) the system factorizes
    into independent single-particle solves on the matching noise rows,
    bit-exactly.
    """
    if not np.isfinite(k) or k < 0:
        raise ValueError("penalty weight k must be finite and nonnegative")
    if noise.n != N:
        raise ValueError(f"noise bank holds {noise.n} rows, expected N={N}")
    extra = tuple(_scalar_features(phi))
    raw = solve_ensemble(spec, grid, noise, _phi_terminal(k, phi), cfg,
                         terminal_law_free=True, extra_features=extra)
    raw.Z = estimate_Z(raw, spec, noise)
    return NParticleSolution(
        X=raw.X, Y=raw.Y, Z_diag=raw.Z, control=raw.control, grid=raw.grid,
        picard_residuals=raw.picard_residuals, converged=raw.converged,
        events=raw.events, noise_bank_id=noise.bank_id)


def _scalar_features(phi):
    probe_dim = np.atleast_1d(getattr(phi, "direction", np.zeros(1))).size
    count = len(phi.regression_features(np.zeros((1, probe_dim))))
    return [lambda X, i=i, phi=phi: phi.regression_features(X)[i] for i in range(count)]


def nparticle_value(sol: NParticleSolution, spec: ProblemSpec, k: float, phi,
                    target_cloud: ParticleCloud | None = None,
                    target_seed: int = 0) -> ValueEstimate:
    """Average running-cost quadrature plus k (mean phi(X_T) - mu_fin(phi)).

    ``mu_fin(phi)`` is estimated on ``target_cloud`` (drawn from the spec's
    terminal law with ``target_seed`` when not supplied).
    """
    grid = sol.grid
    dt = grid.dt
    n = sol.n
    running = np.zeros(n)
    for j in range(grid.steps):
        running += dt * spec.cost.f1_value(grid.nodes[j], sol.control[:, j])
        if not spec.cost.f2.is_zero:
            running += dt * np.asarray(
                spec.cost.f2.value(grid.nodes[j], sol.X[:, j], sol.x_cloud(j)))
    if target_cloud is None:
        target_cloud = sample(spec.mu_fin, max(sol.n, 256), target_seed)
    gap = float(pmean(phi.value(sol.X[:, grid.steps]))
                - pmean(phi.value(target_cloud.points)))
    run_mean = float(pmean(running))
    std = float(np.std(running, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(value=run_mean + k * gap, std_error=std,
                         running=run_mean, penalty_term=k * gap)
